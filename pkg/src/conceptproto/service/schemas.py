"""Pydantic request/response models for the service endpoints."""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    name: str
    version: str
    status: str = "ok"


class TrainRequest(BaseModel):
    config: str = Field(description="path to a run-configuration file")
    out: str = Field(description="artifact store directory to create")


class EpochLossRow(BaseModel):
    epoch: int
    cka: float
    ccd: float
    total: float


class TrainResponse(BaseModel):
    store: str
    epochs: int
    classes: list[str]
    loss_csv: str
    final_losses: EpochLossRow | None = None
    cka_upper_tri_initial: list[float]
    cka_upper_tri_final: list[float]
    mean_cka_initial: float
    mean_cka_final: float
    test_accuracy: float | None = None


class ExtractRequest(BaseModel):
    store: str
    data: str = Field(description="path to a dataset manifest")


class ExtractResponse(BaseModel):
    store: str
    bank_version: int
    centroid_version: int
    num_prototypes: int
    classes: list[str]


class ClassifyRequest(BaseModel):
    store: str
    data: str
    report: str = Field(description="path for the JSON report")


class ClassifyResponse(BaseModel):
    report: str
    accuracy: float
    n_samples: int
    classes: list[str]


class ExplainRequest(BaseModel):
    store: str
    data: str
    top_k: int = 5
    out: str


class NullPrototype(BaseModel):
    slot: str
    max_response: float


class ExplainResponse(BaseModel):
    out_dir: str
    grids: list[str]
    distribution_csv: str
    discriminativeness_csv: str
    null_prototypes: list[NullPrototype]


class HeatmapRequest(BaseModel):
    store: str
    data: str
    out: str


class HeatmapResponse(BaseModel):
    out_dir: str
    files: list[str]
    upper_triangle_means: list[float]
    mean_over_layers: float


class AblateRequest(BaseModel):
    config: str
    mode: str = Field(description="cka-only | ccd-only | both")
    out: str


class AblateResponse(BaseModel):
    mode: str
    store: str
    accuracy: float
    mean_cka_initial: float
    mean_cka_final: float


class SweepRequest(BaseModel):
    config: str
    values: list[int]
    out: str


class SweepRun(BaseModel):
    segment_channels: int
    accuracy: float
    store: str
    num_slots: int


class SweepResponse(BaseModel):
    runs: list[SweepRun]


class FewshotRequest(BaseModel):
    store: str
    data: str
    k: int = 5
    seed: int = 0
    unseen_fraction: float = 1 / 3


class FewshotResponse(BaseModel):
    k: int
    seed: int
    accuracy: float
    per_class: dict[str, float]
    n_query: int
    n_ties: int
    seen_classes: list[str]
    unseen_classes: list[str]
    report: str
    split_file: str


class GradcheckRequest(BaseModel):
    config: str | None = None
    seed: int | None = None


class GradcheckMode(BaseModel):
    max_rel_error: float
    median_rel_error: float
    n_params: int


class GradcheckResponse(BaseModel):
    modes: dict[str, GradcheckMode]
