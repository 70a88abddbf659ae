"""FastAPI service exposing every experiment runner. Paths in requests are
resolved on the service host; heavy artifacts are written to disk and the
responses carry summaries plus the file locations."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from ..errors import ToolkitError
from .. import experiments
from . import schemas

API_VERSION = "0.1.0"


def create_app() -> FastAPI:
    app = FastAPI(
        title="conceptproto",
        version=API_VERSION,
        description="Multi-level concept-prototype classification service",
    )

    def _run(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ToolkitError as e:
            raise HTTPException(status_code=400, detail=f"{type(e).__name__}: {e}") from e
        except FileNotFoundError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(name="conceptproto", version=API_VERSION)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        return _run(experiments.run_train, req.config, req.out)

    @app.post("/extract", response_model=schemas.ExtractResponse)
    def extract(req: schemas.ExtractRequest):
        return _run(experiments.run_extract, req.store, req.data)

    @app.post("/classify", response_model=schemas.ClassifyResponse)
    def classify(req: schemas.ClassifyRequest):
        return _run(experiments.run_classify, req.store, req.data, req.report)

    @app.post("/explain", response_model=schemas.ExplainResponse)
    def explain(req: schemas.ExplainRequest):
        return _run(experiments.run_explain, req.store, req.data, req.top_k, req.out)

    @app.post("/cka-heatmap", response_model=schemas.HeatmapResponse)
    def cka_heatmap(req: schemas.HeatmapRequest):
        return _run(experiments.run_heatmap, req.store, req.data, req.out)

    @app.post("/ablate", response_model=schemas.AblateResponse)
    def ablate(req: schemas.AblateRequest):
        if req.mode not in ("cka-only", "ccd-only", "both"):
            raise HTTPException(status_code=422, detail=f"mode must be cka-only, ccd-only, or both; got {req.mode!r}")
        return _run(experiments.run_ablate, req.config, req.mode, req.out)

    @app.post("/sweep-channels", response_model=schemas.SweepResponse)
    def sweep_channels(req: schemas.SweepRequest):
        return _run(experiments.run_sweep, req.config, req.values, req.out)

    @app.post("/fewshot", response_model=schemas.FewshotResponse)
    def fewshot(req: schemas.FewshotRequest):
        return _run(
            experiments.run_fewshot, req.store, req.data, req.k, req.seed, req.unseen_fraction
        )

    @app.post("/gradcheck", response_model=schemas.GradcheckResponse)
    def gradcheck(req: schemas.GradcheckRequest):
        return _run(experiments.run_gradcheck, req.config, req.seed)

    return app


app = create_app()
