"""Scale-invariant log-depth loss and depth evaluation metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, _make

PRED_FLOOR_M = 1e-3

# column order of the KITTI-style results table
TABLE_COLUMNS = ("abs_rel", "sq_rel", "rms", "log_rms", "log10", "delta1", "delta2", "delta3")
_HEADERS = {
    "abs_rel": "abs rel",
    "sq_rel": "sq rel",
    "rms": "rms",
    "log_rms": "log rms",
    "log10": "log10",
    "delta1": "d<1.25",
    "delta2": "d<1.25^2",
    "delta3": "d<1.25^3",
}


class EmptyMaskError(ValueError):
    """No ground-truth pixel survived masking."""


@dataclass(frozen=True)
class LossParams:
    lam: float = 0.85
    alpha: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


def valid_mask(gt: np.ndarray, cap_m: float) -> np.ndarray:
    if not cap_m > 0:
        raise ValueError(f"depth cap must be positive, got {cap_m}")
    gt = np.asarray(gt)
    mask = (gt > 0) & (gt <= cap_m)
    if not mask.any():
        raise EmptyMaskError("no valid ground-truth pixels")
    return mask


def silog_inner(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, lam: float) -> float:
    """Variance term under the square root, evaluated without autodiff."""
    d = np.log(gt[mask]) - np.log(pred[mask])
    n = d.size
    return float(np.sum(d * d) / n - lam * np.sum(d) ** 2 / n**2)


def silog_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray, params: LossParams = LossParams()) -> Tensor:
    """``alpha * sqrt(mean(d^2) - lam * mean(d)^2)`` with ``d = log gt - log pred``.

    All masked pixels of the batch share one normaliser N.
    """
    gt = np.asarray(gt)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    if gt.shape != pred.shape:
        gt = gt.reshape(pred.shape)
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("loss needs at least one valid pixel")
    p = pred.data[mask]
    if np.any(p <= 0):
        raise ValueError("prediction must be strictly positive on valid pixels")
    d = np.log(gt[mask].astype(pred.dtype)) - np.log(p)
    s = d.sum()
    inner = np.sum(d * d) / n - params.lam * s * s / (n * n)
    root = np.sqrt(max(inner, 0.0))
    loss = np.asarray(params.alpha * root, dtype=pred.dtype)

    def bw(g):
        out = np.zeros_like(pred.data)
        if root > 0:
            d_inner = (2 * d / n - 2 * params.lam * s / (n * n)) * (params.alpha / (2 * root))
            out[mask] = g * d_inner * (-1.0 / p)
        return (out,)

    return _make(loss, (pred,), bw, "silog")


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rms: float
    log10: float
    log_rms: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **extra) -> str:
        return json.dumps({**self.to_dict(), **extra}, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


def eval_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray, cap_m: float | None = None) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape:
        pred = pred.reshape(gt.shape)
    if not mask.any():
        raise EmptyMaskError("no valid pixels to evaluate")
    hi = cap_m if cap_m is not None else np.inf
    p = np.clip(pred[mask], PRED_FLOOR_M, hi)
    t = gt[mask]
    err = p - t
    ratio = np.maximum(t / p, p / t)
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(err) / t)),
        sq_rel=float(np.mean(err**2 / t)),
        rms=float(np.sqrt(np.mean(err**2))),
        log10=float(np.mean(np.abs(np.log10(p) - np.log10(t)))),
        log_rms=float(np.sqrt(np.mean((np.log(p) - np.log(t)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        n_pixels=int(mask.sum()),
    )


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Pixel-weighted mean of every metric."""
    if not reports:
        raise ValueError("cannot aggregate an empty list of reports")
    weights = np.array([r.n_pixels for r in reports], dtype=np.float64)
    total = weights.sum()
    fields = [f for f in MetricsReport.__dataclass_fields__ if f != "n_pixels"]
    values = {f: float(np.dot(weights, [getattr(r, f) for r in reports]) / total) for f in fields}
    return MetricsReport(**values, n_pixels=int(total))


def format_table(rows: Sequence[tuple], columns: Sequence[str] = TABLE_COLUMNS, extra: Sequence[str] = ()) -> str:
    """Aligned plain-text table. ``rows`` holds ``(label, report, {extra_col: value})``."""
    headers = ["method", *extra, *[_HEADERS[c] for c in columns]]
    body = []
    for label, report, extras in rows:
        cells = [label]
        for col in extra:
            v = extras[col]
            cells.append(f"{v:,}" if isinstance(v, int) else str(v))
        cells.extend(f"{getattr(report, c):.4f}" for c in columns)
        body.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(headers)]
    fmt = lambda cells: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(cells, widths)))
    lines = [fmt(headers), "  ".join("-" * w for w in widths)]
    lines.extend(fmt(r) for r in body)
    return "\n".join(lines)
