"""Image-quality metrics, class-separability statistics, and MAC accounting.

PSNR and SSIM follow their standard definitions (SSIM with the usual
Gaussian 11x11, sigma 1.5 window). Wilks' Lambda is the classical MANOVA
scatter-determinant ratio, used here to quantify how well task embeddings
separate degradation kinds; values near zero mean strong separation. SSIM
is stored in [0,1] and scaled by 100 only for display, to keep units
unambiguous.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .engine.flops import FlopCounter
from .errors import ConfigError, ShapeError

WILKS_RIDGE = 1e-9


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; identical inputs give +inf."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr inputs differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def _local_means(plane: np.ndarray, window: np.ndarray) -> np.ndarray:
    views = sliding_window_view(plane, window.shape)
    return np.einsum("hwij,ij->hw", views, window)


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, k1: float = 0.01,
         k2: float = 0.03, sigma: float = 1.5, peak: float = 1.0) -> float:
    """Mean local SSIM over a Gaussian window; symmetric in its arguments."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects [C,H,W] or [H,W], got {a.shape}")
    if a.shape[1] < window or a.shape[2] < window:
        raise ShapeError(
            f"image {a.shape[1]}x{a.shape[2]} smaller than the {window}x{window} window")

    g = _gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    values = []
    for ch in range(a.shape[0]):
        mu_a = _local_means(a[ch], g)
        mu_b = _local_means(b[ch], g)
        var_a = _local_means(a[ch] * a[ch], g) - mu_a * mu_a
        var_b = _local_means(b[ch] * b[ch], g) - mu_b * mu_b
        cov = _local_means(a[ch] * b[ch], g) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Wilks' Lambda
# ---------------------------------------------------------------------------

@dataclass
class WilksResult:
    value: float
    regularized: bool


def wilks_lambda(embeddings: np.ndarray, labels) -> WilksResult:
    """det(W) / det(W + B) from within- and between-class scatter.

    Near-singular scatter is stabilized with a documented ridge (1e-9 on the
    diagonal) and flagged in the result.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2:
        raise ShapeError(f"embeddings must be [N,d], got {x.shape}")
    n, d = x.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have length {n}, got {labels.shape}")
    groups = {}
    for lbl in labels:
        groups[lbl] = groups.get(lbl, 0) + 1
    if len(groups) < 2:
        raise ConfigError("need at least two distinct labels")
    if min(groups.values()) < 2:
        raise ConfigError("every label needs at least two vectors")
    if n <= d:
        raise ConfigError(
            f"need more vectors ({n}) than embedding dimensions ({d})")

    grand = x.mean(axis=0)
    w = np.zeros((d, d))
    b = np.zeros((d, d))
    for lbl, count in groups.items():
        xs = x[labels == lbl]
        mu = xs.mean(axis=0)
        centered = xs - mu
        w += centered.T @ centered
        offset = (mu - grand)[:, None]
        b += count * (offset @ offset.T)

    total = w + b
    regularized = False
    sign_w, logdet_w = np.linalg.slogdet(w)
    sign_t, logdet_t = np.linalg.slogdet(total)
    if sign_w <= 0 or sign_t <= 0 or not (np.isfinite(logdet_w) and np.isfinite(logdet_t)):
        regularized = True
        eye = WILKS_RIDGE * np.eye(d)
        sign_w, logdet_w = np.linalg.slogdet(w + eye)
        sign_t, logdet_t = np.linalg.slogdet(total + eye)
    value = float(np.exp(logdet_w - logdet_t))
    return WilksResult(value=min(value, 1.0), regularized=regularized)


def permuted_lambdas(embeddings: np.ndarray, labels, n_permutations: int = 100,
                     seed: int = 0) -> list[float]:
    """Wilks' Lambda under random label permutations (null distribution)."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    out = []
    for _ in range(n_permutations):
        out.append(wilks_lambda(embeddings, rng.permutation(labels)).value)
    return out


# ---------------------------------------------------------------------------
# model MAC accounting
# ---------------------------------------------------------------------------

def count_model_macs(model, height: int, width: int,
                     gamma: float | None = None) -> FlopCounter:
    """One conditional forward pass under a counter; returns the counter."""
    from .engine import Tensor, no_grad

    rng = np.random.default_rng(0)
    y = Tensor(rng.standard_normal((1, 3, height, width)).astype(model.dtype))
    x = Tensor(rng.random((1, 3, height, width)).astype(model.dtype))
    counter = FlopCounter()
    with counter, no_grad():
        model(y, x, 1, gamma=gamma)
    return counter


# ---------------------------------------------------------------------------
# evaluation reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    sample_count: int
    per_kind: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def ssim_pct(self) -> float:
        return 100.0 * self.ssim

    def render_text(self) -> str:
        lines = [f"samples={self.sample_count}",
                 f"psnr_db={_fmt(self.psnr_db)}",
                 f"ssim={_fmt(self.ssim)}",
                 f"ssim_pct={_fmt(self.ssim_pct)}"]
        for kind in sorted(self.per_kind):
            row = self.per_kind[kind]
            lines.append(f"kind.{kind}.count={int(row['count'])}")
            lines.append(f"kind.{kind}.psnr_db={_fmt(row['psnr_db'])}")
            lines.append(f"kind.{kind}.ssim={_fmt(row['ssim'])}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {"samples": self.sample_count,
                   "psnr_db": _json_num(self.psnr_db),
                   "ssim": _json_num(self.ssim),
                   "ssim_pct": _json_num(self.ssim_pct),
                   "per_kind": {k: {kk: _json_num(vv) for kk, vv in v.items()}
                                for k, v in self.per_kind.items()}}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def _json_num(v: float):
    return "inf" if isinstance(v, float) and math.isinf(v) else v


def evaluate_pairs(pairs: list[tuple[np.ndarray, np.ndarray]],
                   kinds: list[str] | None = None) -> MetricReport:
    """PSNR/SSIM over (prediction, reference) pairs, with optional kinds."""
    if not pairs:
        raise ConfigError("no image pairs to evaluate")
    if kinds is not None and len(kinds) != len(pairs):
        raise ConfigError(f"got {len(kinds)} kinds for {len(pairs)} pairs")
    rows = []
    for pred, ref in pairs:
        rows.append((psnr(pred, ref), ssim(pred, ref)))
    all_psnr = [r[0] for r in rows]
    all_ssim = [r[1] for r in rows]
    report = MetricReport(psnr_db=float(np.mean(all_psnr)),
                          ssim=float(np.mean(all_ssim)),
                          sample_count=len(pairs))
    if kinds is not None:
        for kind in sorted(set(kinds)):
            idx = [i for i, k in enumerate(kinds) if k == kind]
            report.per_kind[kind] = {
                "count": float(len(idx)),
                "psnr_db": float(np.mean([all_psnr[i] for i in idx])),
                "ssim": float(np.mean([all_ssim[i] for i in idx])),
            }
    return report
