"""Synthetic paired datasets: procedural scenes plus three degradations.

The clean generator layers smooth low-frequency color fields, dark
curvilinear structures, and small bright specular spots, so every image
carries energy in both the low and high frequency bands. Each degradation
operator is identity at its neutral parameters and has a distinct spectral
signature: low light suppresses the overall spectrum (DC included), smoke
shifts energy toward the low band through a smooth transmission veil, and
blood plants opaque smooth blobs that boost low-frequency dominance.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .pngio import save_png


class Kind(enum.Enum):
    LOW_LIGHT = "low_light"
    SMOKE = "smoke"
    BLOOD = "blood"


ALL_KINDS = (Kind.LOW_LIGHT, Kind.SMOKE, Kind.BLOOD)


@dataclass
class DegradationSample:
    clean: np.ndarray
    degraded: np.ndarray
    kind: Kind
    params: dict[str, float]

    def __post_init__(self):
        if self.clean.shape != self.degraded.shape:
            raise ShapeError(
                f"clean {self.clean.shape} and degraded {self.degraded.shape} differ")


def _require_power_of_two(value: int, name: str) -> None:
    if value < 8 or value & (value - 1):
        raise ConfigError(
            f"{name} must be a power of two >= 8, got {value}; "
            f"pad to {1 << max(3, value.bit_length())} first")


def _smooth_field(rng: np.random.Generator, h: int, w: int,
                  max_freq: int = 3) -> np.ndarray:
    """Random smooth map in [0,1] built from a few low-frequency sinusoids."""
    yy, xx = np.meshgrid(np.linspace(0, 1, h, endpoint=False),
                         np.linspace(0, 1, w, endpoint=False), indexing="ij")
    field = np.zeros((h, w))
    for _ in range(4):
        fy, fx = rng.integers(0, max_freq + 1, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.3, 1.0)
        field += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    lo, hi = field.min(), field.max()
    return ((field - lo) / (hi - lo + 1e-12)).astype(np.float32)


def _stamp(canvas: np.ndarray, cy: float, cx: float, sigma: float,
           value: float = 1.0) -> None:
    """Accumulate a Gaussian bump onto a 2-D canvas, local window only."""
    h, w = canvas.shape
    rad = max(1, int(3 * sigma))
    y0, y1 = max(0, int(cy) - rad), min(h, int(cy) + rad + 1)
    x0, x1 = max(0, int(cx) - rad), min(w, int(cx) + rad + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.meshgrid(np.arange(y0, y1), np.arange(x0, x1), indexing="ij")
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    canvas[y0:y1, x0:x1] += value * np.exp(-d2 / (2.0 * sigma ** 2))


def gen_clean(seed: int, h: int = 64, w: int = 64) -> np.ndarray:
    """Procedural tissue-like scene: color fields, vessels, specular spots."""
    _require_power_of_two(h, "height")
    _require_power_of_two(w, "width")
    rng = np.random.default_rng(seed)

    image = np.empty((3, h, w), dtype=np.float32)
    base = np.array([0.72, 0.42, 0.38]) + rng.uniform(-0.08, 0.08, size=3)
    for c in range(3):
        image[c] = base[c] + 0.22 * (_smooth_field(rng, h, w) - 0.5)

    vessels = np.zeros((h, w))
    for _ in range(rng.integers(3, 6)):
        p0 = rng.uniform(0, [h, w])
        p1 = rng.uniform(0, [h, w])
        ctrl = rng.uniform(0, [h, w])
        sigma = rng.uniform(0.6, 1.6) * (h / 64.0)
        for t in np.linspace(0.0, 1.0, 3 * max(h, w)):
            pt = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * ctrl + t ** 2 * p1
            _stamp(vessels, pt[0], pt[1], sigma, value=0.08)
    vessels = np.clip(vessels, 0.0, 1.0)
    vessel_color = np.array([0.30, 0.05, 0.06])
    image = image * (1 - vessels) + vessel_color[:, None, None] * vessels

    speculars = np.zeros((h, w))
    for _ in range(rng.integers(2, 5)):
        _stamp(speculars, rng.uniform(0, h), rng.uniform(0, w),
               rng.uniform(0.7, 1.5) * (h / 64.0), value=1.0)
    image = image + np.clip(speculars, 0.0, 1.0)[None] * 0.9

    return np.clip(image, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# degradation operators
# ---------------------------------------------------------------------------

def apply_low_light(clean: np.ndarray, gain: float = 0.35,
                    gamma_curve: float = 1.4, noise_sigma: float = 0.03,
                    seed: int = 0) -> DegradationSample:
    """Dim, gamma-compress, and add sensor noise; identity at (1, 1, 0)."""
    if not 0.0 < gain <= 1.0:
        raise ConfigError(f"gain must lie in (0, 1], got {gain}")
    if gamma_curve <= 0.0:
        raise ConfigError(f"gamma_curve must be positive, got {gamma_curve}")
    if noise_sigma < 0.0:
        raise ConfigError(f"noise_sigma must be non-negative, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    # Work in float64 so the final float32 rounding absorbs power()'s own
    # rounding error; at (gain=1, curve=1) the roundtrip is then bitwise.
    dimmed = np.power(gain * clean.astype(np.float64), gamma_curve)
    if noise_sigma > 0.0:
        dimmed = dimmed + rng.normal(0.0, noise_sigma, clean.shape)
    degraded = np.clip(dimmed, 0.0, 1.0).astype(np.float32)
    return DegradationSample(clean, degraded, Kind.LOW_LIGHT,
                             {"gain": gain, "gamma_curve": gamma_curve,
                              "noise_sigma": noise_sigma})


def apply_smoke(clean: np.ndarray, veil: float = 0.85,
                transmission: np.ndarray | None = None, seed: int = 0,
                strength: float = 0.6) -> DegradationSample:
    """Haze model: degraded = clean*t + veil*(1-t) with a smooth t map."""
    if not 0.0 <= veil <= 1.0:
        raise ConfigError(f"veil must lie in [0, 1], got {veil}")
    if transmission is None:
        if not 0.0 <= strength <= 1.0:
            raise ConfigError(f"strength must lie in [0, 1], got {strength}")
        rng = np.random.default_rng(seed)
        transmission = 1.0 - strength * (
            0.4 + 0.6 * _smooth_field(rng, clean.shape[1], clean.shape[2]))
    transmission = np.asarray(transmission, dtype=np.float32)
    if transmission.shape != clean.shape[1:]:
        raise ShapeError(
            f"transmission map {transmission.shape} must match image plane "
            f"{clean.shape[1:]}")
    if transmission.min() < 0.0 or transmission.max() > 1.0:
        raise ConfigError("transmission values must lie in [0, 1]")
    t = transmission[None]
    degraded = np.clip(clean * t + veil * (1.0 - t), 0.0, 1.0).astype(np.float32)
    return DegradationSample(clean, degraded, Kind.SMOKE,
                             {"veil": veil,
                              "transmission_mean": float(transmission.mean())})


def apply_blood(clean: np.ndarray, blob_count: int = 3, opacity: float = 0.75,
                seed: int = 0, mask: np.ndarray | None = None) -> DegradationSample:
    """Alpha-composite smooth dark-red blobs; identity at opacity 0."""
    if blob_count < 1:
        raise ConfigError(f"blob_count must be >= 1, got {blob_count}")
    if not 0.0 <= opacity <= 1.0:
        raise ConfigError(f"opacity must lie in [0, 1], got {opacity}")
    _, h, w = clean.shape
    rng = np.random.default_rng(seed)
    if mask is None:
        mask = np.zeros((h, w))
        for _ in range(blob_count):
            _stamp(mask, rng.uniform(0.15 * h, 0.85 * h),
                   rng.uniform(0.15 * w, 0.85 * w),
                   rng.uniform(h / 7.0, h / 4.0), value=1.0)
        mask = np.clip(mask, 0.0, 1.0)
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != (h, w):
        raise ShapeError(f"mask {mask.shape} must match image plane {(h, w)}")

    alpha = (opacity * mask)[None]
    color = np.array([0.34, 0.03, 0.04]) + rng.uniform(-0.02, 0.02, size=3)
    degraded = np.clip(clean * (1.0 - alpha) + color[:, None, None] * alpha,
                       0.0, 1.0).astype(np.float32)
    covered = float(np.mean(mask > 0.05))
    return DegradationSample(clean, degraded, Kind.BLOOD,
                             {"blob_count": float(blob_count),
                              "opacity": opacity, "covered_fraction": covered})


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"
MANIFEST_COLUMNS = "clean_path\tdegraded_path\tkind\tsplit\tparams"


@dataclass
class ManifestRow:
    clean_path: str
    degraded_path: str
    kind: Kind
    split: str
    params: dict[str, float]


def _degrade_one(clean: np.ndarray, kind: Kind, rng: np.random.Generator,
                 seed: int) -> DegradationSample:
    """Apply ``kind`` with per-sample jittered parameters."""
    if kind is Kind.LOW_LIGHT:
        return apply_low_light(clean, gain=float(rng.uniform(0.25, 0.45)),
                               gamma_curve=float(rng.uniform(1.2, 1.6)),
                               noise_sigma=float(rng.uniform(0.01, 0.04)),
                               seed=seed)
    if kind is Kind.SMOKE:
        return apply_smoke(clean, veil=float(rng.uniform(0.75, 0.95)),
                           seed=seed, strength=float(rng.uniform(0.45, 0.7)))
    return apply_blood(clean, blob_count=int(rng.integers(2, 5)),
                       opacity=float(rng.uniform(0.6, 0.9)), seed=seed)


def make_dataset(n_per_kind: int, split_ratio: tuple[int, int], seed: int,
                 out_dir: str, size: int = 64,
                 kinds: tuple[Kind, ...] = ALL_KINDS) -> str:
    """Write a balanced paired dataset and return the manifest path.

    Per kind, the first ``n_per_kind * r / (r + s)`` samples go to the train
    split and the rest to test, for split_ratio (r, s). All randomness
    derives from per-sample children of ``seed``, so reruns are bitwise
    stable.
    """
    if n_per_kind < 1:
        raise ConfigError(f"n_per_kind must be >= 1, got {n_per_kind}")
    r, s = split_ratio
    if r < 0 or s < 0 or r + s == 0:
        raise ConfigError(f"split_ratio must be non-negative, got {split_ratio}")
    n_train = (n_per_kind * r) // (r + s)

    os.makedirs(os.path.join(out_dir, "clean"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "degraded"), exist_ok=True)

    rows: list[ManifestRow] = []
    for k_idx, kind in enumerate(kinds):
        for i in range(n_per_kind):
            child = np.random.SeedSequence(entropy=(seed, k_idx, i))
            gen_seed, jitter_seed, op_seed = child.generate_state(3).tolist()
            clean = gen_clean(gen_seed, size, size)
            jitter = np.random.default_rng(jitter_seed)
            sample = _degrade_one(clean, kind, jitter, op_seed)

            name = f"{kind.value}_{i:04d}.png"
            clean_rel = os.path.join("clean", name)
            degraded_rel = os.path.join("degraded", name)
            save_png(os.path.join(out_dir, clean_rel), sample.clean)
            save_png(os.path.join(out_dir, degraded_rel), sample.degraded)
            rows.append(ManifestRow(clean_rel, degraded_rel, kind,
                                    "train" if i < n_train else "test",
                                    sample.params))

    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w") as fh:
        fh.write(f"# columns: {MANIFEST_COLUMNS}\n")
        for row in rows:
            params = ",".join(f"{k}={v:.6g}" for k, v in sorted(row.params.items()))
            fh.write(f"{row.clean_path}\t{row.degraded_path}\t{row.kind.value}\t"
                     f"{row.split}\t{params}\n")
    return manifest_path


def load_manifest(path: str) -> list[ManifestRow]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            clean_rel, degraded_rel, kind, split, params_raw = line.split("\t")
            params = {}
            if params_raw:
                for part in params_raw.split(","):
                    key, val = part.split("=")
                    params[key] = float(val)
            rows.append(ManifestRow(clean_rel, degraded_rel, Kind(kind),
                                    split, params))
    return rows
