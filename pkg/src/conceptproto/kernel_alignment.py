"""Segment-similarity math: linear Gram matrices, the unbiased HSIC
estimator, CKA, and the per-layer segment-diversity loss.

All functions accept torch tensors (gradients flow through) or anything
`torch.as_tensor` understands, and return torch scalars / matrices.
"""

from __future__ import annotations

from typing import Sequence

import torch

from .errors import (
    BatchTooSmallError,
    DegenerateSegmentError,
    NonFiniteInputError,
    ShapeMismatchError,
)


def _as_matrix(x, name: str) -> torch.Tensor:
    t = torch.as_tensor(x)
    if t.ndim != 2:
        raise ShapeMismatchError(f"{name} must be 2-D (samples x features), got shape {tuple(t.shape)}")
    if not t.is_floating_point():
        t = t.double()
    return t


def gram_linear(segments) -> torch.Tensor:
    """Linear kernel matrix K with K[a, b] = <row_a, row_b>."""
    x = _as_matrix(segments, "segments")
    if x.shape[0] < 1:
        raise ShapeMismatchError("need at least one sample row")
    if not torch.isfinite(x.detach()).all():
        bad = int((~torch.isfinite(x.detach())).sum())
        raise NonFiniteInputError(f"segment matrix contains {bad} non-finite entries")
    return x @ x.T


def _check_gram_pair(k: torch.Tensor, l: torch.Tensor) -> int:
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ShapeMismatchError(f"K must be square, got {tuple(k.shape)}")
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise ShapeMismatchError(f"L must be square, got {tuple(l.shape)}")
    if k.shape[0] != l.shape[0]:
        raise ShapeMismatchError(f"batch sizes differ: K is {k.shape[0]}, L is {l.shape[0]}")
    b = int(k.shape[0])
    if b < 4:
        raise BatchTooSmallError(
            f"unbiased HSIC needs batch size >= 4; got B={b} "
            f"(the B(B-3) denominator vanishes or flips sign below that)"
        )
    return b


def hsic_unbiased(k, l) -> torch.Tensor:
    """Unbiased HSIC estimate from two Gram matrices.

    With Kt, Lt the zero-diagonal copies of K, L and B the batch size:

        ( tr(Kt Lt) + (1'Kt1)(1'Lt1)/((B-1)(B-2)) - 2/(B-2) * 1'Kt Lt 1 ) / (B(B-3))

    The estimate can be slightly negative; that is a property of the
    estimator, not an error.
    """
    k = torch.as_tensor(k)
    l = torch.as_tensor(l)
    b = _check_gram_pair(k, l)

    kt = k - torch.diag_embed(torch.diagonal(k))
    lt = l - torch.diag_embed(torch.diagonal(l))

    trace_term = (kt * lt.T).sum()          # tr(Kt Lt)
    sum_term = kt.sum() * lt.sum() / ((b - 1) * (b - 2))
    cross_term = (kt.sum(dim=0) @ lt.sum(dim=1)) * 2.0 / (b - 2)   # 1' Kt Lt 1
    return (trace_term + sum_term - cross_term) / (b * (b - 3))


def cka(x, y) -> torch.Tensor:
    """CKA similarity between two segment sample matrices (rows = samples)."""
    kx = gram_linear(x)
    ky = gram_linear(y)
    hxy = hsic_unbiased(kx, ky)
    hxx = hsic_unbiased(kx, kx)
    hyy = hsic_unbiased(ky, ky)
    if float(hxx.detach()) <= 0.0 or float(hyy.detach()) <= 0.0:
        raise DegenerateSegmentError(
            f"degenerate segment: self-HSIC terms must be positive, "
            f"got {float(hxx.detach()):.3e} and {float(hyy.detach()):.3e}"
        )
    return hxy / torch.sqrt(hxx * hyy)


def _pairwise_cka(segments: Sequence) -> tuple[list[torch.Tensor], dict[tuple[int, int], torch.Tensor]]:
    """Shared pair machinery: self-HSIC per segment and CKA per strict pair."""
    mats = [_as_matrix(s, f"segment {i}") for i, s in enumerate(segments)]
    m = len(mats)
    if m < 2:
        raise ShapeMismatchError(f"need at least 2 segments to compare, got {m}")
    b = mats[0].shape[0]
    for i, s in enumerate(mats):
        if s.shape[0] != b:
            raise ShapeMismatchError(f"segment {i} has batch size {s.shape[0]}, expected {b}")

    grams = [gram_linear(s) for s in mats]
    selfs = []
    for i, g in enumerate(grams):
        h = hsic_unbiased(g, g)
        if float(h.detach()) <= 0.0:
            raise DegenerateSegmentError(
                f"segment {i} is degenerate (self-HSIC {float(h.detach()):.3e} <= 0)"
            )
        selfs.append(h)

    pairs: dict[tuple[int, int], torch.Tensor] = {}
    for i in range(m):
        for j in range(i + 1, m):
            hxy = hsic_unbiased(grams[i], grams[j])
            pairs[(i, j)] = hxy / torch.sqrt(selfs[i] * selfs[j])
    return selfs, pairs


def cka_loss_layer(segments: Sequence) -> torch.Tensor:
    """Mean pairwise CKA over the strict upper triangle of one layer's segments.

    Equals 2/(M(M-1)) * sum_{i<j} CKA(S_i, S_j). The i == j diagonal is a
    constant 1 with no gradient and is excluded; the normalizer counts
    exactly the strict pairs.
    """
    _, pairs = _pairwise_cka(segments)
    m = len(segments)
    total = sum(pairs.values())
    return total * (2.0 / (m * (m - 1)))


def cka_similarity_matrix(segments: Sequence) -> tuple[torch.Tensor, torch.Tensor]:
    """Full M x M CKA matrix (unit diagonal) and its strict-upper-triangle mean."""
    _, pairs = _pairwise_cka(segments)
    m = len(segments)
    dtype = next(iter(pairs.values())).dtype if pairs else torch.float64
    mat = torch.eye(m, dtype=dtype)
    for (i, j), v in pairs.items():
        mat[i, j] = v
        mat[j, i] = v
    mean = torch.stack(list(pairs.values())).mean()
    return mat, mean
