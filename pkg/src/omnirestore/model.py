"""Full denoiser assembly, optimizer, training step, and checkpointing.

The denoiser is a two-stream U-shape. Both the noisy state and the degraded
conditioning image get their own stem; at every encoder scale the streams
interact through a dual-stream encoder stage and are fused by a rectified
fusion block whose output forms the skip feature. The decoder mirrors the
scales: upsample, fold in the skip, add a conditioning bias, then refine a
routed subset of channels. Conditioning combines a sinusoidal timestep code
with the task embedding derived from the degraded image's prompt.
"""

from __future__ import annotations

import contextlib
import io
import math
import struct
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import diffusion
from .blocks import (
    DualDomainPrompter,
    DualStreamEncoder,
    NoiseAwareRouter,
    RectifiedFusionBlock,
    RoutingDecision,
    TaskAdaptiveEmbedding,
)
from .engine import Tensor, backward, no_grad, ops, reset_tape
from .engine.flops import active_counter
from .errors import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ConfigError,
    ConfigMismatchError,
    NumericsError,
    ShapeError,
)
from .layers import ChannelNorm, Conv2d, Linear, Mlp, Module, sinusoidal_embedding

PROMPT_MODES = ("both", "spatial", "frequency", "none")


@dataclass
class ModelConfig:
    """Architecture, conditioning, and schedule hyperparameters."""

    base_channels: int = 16
    depth: int = 3
    stem_stride: int = 2
    atom_count: int = 8
    prompt_dim: int = 24
    embed_dim: int = 16
    expert_count: int = 4
    k_active: int = 2
    shared_branches: int = 1
    gamma: float = 0.5
    n_res: int = 2
    prompt_mode: str = "both"
    steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.05
    pyramid_levels: tuple = ((25, 1), (25, 2))
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels % 4 != 0:
            raise ConfigError(
                f"base_channels must be divisible by 4, got {self.base_channels}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigError(
                f"prompt_mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}")
        if self.stem_stride not in (1, 2):
            raise ConfigError(f"stem_stride must be 1 or 2, got {self.stem_stride}")
        levels = tuple((int(c), int(f)) for c, f in self.pyramid_levels)
        if sum(c for c, _ in levels) != self.steps:
            raise ConfigError(
                f"pyramid level counts sum to {sum(c for c, _ in levels)}, "
                f"schedule has {self.steps} steps")
        return self

    def width(self, scale: int) -> int:
        return self.base_channels * (2 ** scale)

    def min_resolution(self) -> int:
        """Smallest input side length the topology can digest."""
        return self.stem_stride * 2 ** (self.depth - 1)

    def schedule(self) -> diffusion.NoiseSchedule:
        return diffusion.make_schedule(self.steps, self.beta_start, self.beta_end,
                                       self.pyramid_levels)

    def to_flat(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "pyramid_levels":
                v = ",".join(f"{c}x{r}" for c, r in v)
            out[f.name] = str(v)
        return out

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in flat:
                raise ConfigError(f"config entry missing: {f.name}")
            raw = flat[f.name]
            if f.name == "pyramid_levels":
                levels = []
                for part in raw.split(","):
                    c, r = part.split("x")
                    levels.append((int(c), int(r)))
                kwargs[f.name] = tuple(levels)
            elif f.name == "prompt_mode":
                kwargs[f.name] = raw
            elif f.name in ("gamma", "beta_start", "beta_end"):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs).validate()


class Denoiser(Module):
    """f_theta: (noisy state, degraded image, step) -> clean-image estimate."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64(config.seed))
        c = config
        cond_dim = 2 * c.embed_dim

        self.prompter = DualDomainPrompter(
            c.atom_count, c.prompt_dim, rng,
            use_spatial=c.prompt_mode in ("both", "spatial"),
            use_frequency=c.prompt_mode in ("both", "frequency"),
            dtype=dtype)
        self.task_embed = TaskAdaptiveEmbedding(
            c.prompt_dim, c.embed_dim, rng, expert_count=c.expert_count,
            shared_count=c.shared_branches, k_active=c.k_active, dtype=dtype)
        self.time_mlp = Mlp(cond_dim, 2 * cond_dim, cond_dim, rng, dtype=dtype)
        self.task_proj = Linear(c.embed_dim, cond_dim, rng, dtype=dtype)
        self.cond_dim = cond_dim

        self.stem_y = Conv2d(3, c.width(0), 3, rng, stride=c.stem_stride,
                             padding=1, dtype=dtype)
        self.stem_x = Conv2d(3, c.width(0), 3, rng, stride=c.stem_stride,
                             padding=1, dtype=dtype)
        self.encoder_dse = [DualStreamEncoder(c.width(s), rng, dtype=dtype)
                            for s in range(c.depth)]
        self.encoder_rfb = [RectifiedFusionBlock(c.width(s), rng, dtype=dtype)
                            for s in range(c.depth)]
        self.down_x = [Conv2d(c.width(s), c.width(s + 1), 3, rng, stride=2,
                              padding=1, dtype=dtype) for s in range(c.depth - 1)]
        self.down_y = [Conv2d(c.width(s), c.width(s + 1), 3, rng, stride=2,
                              padding=1, dtype=dtype) for s in range(c.depth - 1)]

        self.reduce = [Conv2d(c.width(s + 1), c.width(s), 3, rng, padding=1,
                              dtype=dtype) for s in range(c.depth - 1)]
        self.merge = [Conv2d(2 * c.width(s), c.width(s), 1, rng, dtype=dtype)
                      for s in range(c.depth - 1)]
        self.stage_bias = [Linear(cond_dim, c.width(s), rng, dtype=dtype)
                           for s in range(c.depth - 1)]
        self.router = [NoiseAwareRouter(c.width(s), cond_dim, rng, gamma=c.gamma,
                                        n_res=c.n_res, dtype=dtype)
                       for s in range(c.depth - 1)]

        self.head_norm = ChannelNorm(c.width(0), dtype=dtype)
        self.head_conv1 = Conv2d(c.width(0), c.width(0), 3, rng, padding=1, dtype=dtype)
        self.head_conv2 = Conv2d(c.width(0), 3, 3, rng, padding=1, dtype=dtype)

        self.last_decisions: list[RoutingDecision] = []

    # -- conditioning -----------------------------------------------------

    def conditioning(self, x_degraded: Tensor, t) -> tuple[Tensor, Tensor]:
        """Prompt-derived task embedding and the combined conditioning vector."""
        prompt = self.prompter(x_degraded)
        e_task = self.task_embed(prompt)
        n = x_degraded.shape[0]
        t_arr = np.full(n, t) if np.isscalar(t) else np.asarray(t)
        t_code = Tensor(sinusoidal_embedding(t_arr, self.cond_dim, dtype=self.dtype))
        cond = self.time_mlp(t_code) + self.task_proj(e_task)
        return e_task, cond

    def task_embeddings(self, x_degraded: np.ndarray) -> np.ndarray:
        """Task embeddings for a batch of degraded images, no gradients."""
        with no_grad():
            e_task, _ = self.conditioning(Tensor(x_degraded.astype(self.dtype)), 1)
        return e_task.data.copy()

    # -- forward ----------------------------------------------------------

    def _check_inputs(self, y_t: Tensor, x_degraded: Tensor) -> None:
        if y_t.shape != x_degraded.shape:
            raise ShapeError(
                f"input: noisy state {y_t.shape} and degraded image "
                f"{x_degraded.shape} must match")
        if y_t.shape[1] != 3:
            raise ShapeError(f"input: expected 3 channels, got {y_t.shape[1]}")
        side = self.config.min_resolution()
        if y_t.shape[2] % side or y_t.shape[3] % side:
            raise ShapeError(
                f"stem: spatial dims {y_t.shape[2]}x{y_t.shape[3]} must be "
                f"divisible by {side}")

    def forward(self, y_t: Tensor, x_degraded: Tensor, t,
                gamma: Optional[float] = None,
                capture: Optional[dict] = None,
                trace: Optional[list] = None) -> Tensor:
        self._check_inputs(y_t, x_degraded)
        counter = active_counter()

        def scoped(name):
            return counter.scope(name) if counter else contextlib.nullcontext()

        def note(name, tensor):
            if capture is not None:
                capture[name] = tensor.data.copy()
            if trace is not None:
                trace.append((name, tuple(tensor.shape)))

        with scoped("cond"):
            _, cond = self.conditioning(x_degraded, t)

        with scoped("stem"):
            fy = self.stem_y(y_t)
            fx = self.stem_x(x_degraded)
        note("stem", fy)

        skips = []
        for s in range(self.config.depth):
            with scoped(f"enc{s}"):
                fx, fy = self.encoder_dse[s](fx, fy)
                fused = self.encoder_rfb[s](fx, fy)
                skips.append(fused)
                note(f"enc{s}.fused", fused)
                if s < self.config.depth - 1:
                    fx = self.down_x[s](fx)
                    fy = self.down_y[s](fy)

        self.last_decisions = []
        h = skips[-1]
        for s in range(self.config.depth - 2, -1, -1):
            with scoped(f"dec{s}"):
                h = self.reduce[s](ops.resize_bilinear(h, 2.0))
                h = self.merge[s](ops.concat([h, skips[s]], axis=1))
                bias = ops.reshape(self.stage_bias[s](cond), (h.shape[0], h.shape[1], 1, 1))
                h = h + bias
                note(f"dec{s}.pre_route", h)
                h, decision = self.router[s](h, cond, gamma=gamma)
                self.last_decisions.append(decision)
                note(f"dec{s}.routed", h)

        with scoped("head"):
            if self.config.stem_stride != 1:
                h = ops.resize_bilinear(h, float(self.config.stem_stride))
            h = ops.gelu(self.head_conv1(self.head_norm(h)))
            out = self.head_conv2(h)
        note("head", out)
        return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; moment arrays are checkpointable."""

    def __init__(self, named_params: list[tuple[str, Tensor]], lr: float = 2e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.named:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - update

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = np.asarray(arrays[f"adam.m.{name}"]).copy()
            self.v[name] = np.asarray(arrays[f"adam.v.{name}"]).copy()
        self.step_count = int(step_count)


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------

def stage_statistics(capture: dict[str, np.ndarray]) -> dict[str, dict]:
    stats = {}
    for name, arr in capture.items():
        finite = np.isfinite(arr)
        stats[name] = {
            "finite_fraction": float(finite.mean()),
            "min": float(arr[finite].min()) if finite.any() else float("nan"),
            "max": float(arr[finite].max()) if finite.any() else float("nan"),
            "mean_abs": float(np.abs(arr[finite]).mean()) if finite.any() else float("nan"),
        }
    return stats


def training_step(model: Denoiser, optimizer: Adam, clean: np.ndarray,
                  degraded: np.ndarray, schedule: diffusion.NoiseSchedule,
                  rng: np.random.Generator) -> tuple[float, int]:
    """One optimization step; returns (loss, sampled t).

    Draws one step index uniformly for the batch, corrupts the clean target
    with the closed-form kernel at that step's pyramid resolution, and
    regresses the denoiser output onto the downsampled clean image.
    """
    dtype = model.dtype
    t = int(rng.integers(1, schedule.steps + 1))
    r_t = schedule.scale_at(t)
    clean_t = Tensor(clean.astype(dtype))
    noise = Tensor(rng.standard_normal(
        (clean.shape[0], clean.shape[1], clean.shape[2] // r_t,
         clean.shape[3] // r_t)).astype(dtype))
    with no_grad():
        y_t = diffusion.q_sample(clean_t, t, schedule, noise)
        x_cond = ops.resize_area(Tensor(degraded.astype(dtype)), r_t)
        target = ops.resize_area(clean_t, r_t)

    pred = model(y_t, x_cond, t)
    loss = ops.mean(ops.square(pred - target))
    loss_value = float(loss.data)

    if not math.isfinite(loss_value):
        reset_tape()
        capture: dict[str, np.ndarray] = {}
        with no_grad():
            model(y_t, x_cond, t, capture=capture)
        raise NumericsError(
            f"non-finite loss {loss_value} at optimizer step {optimizer.step_count + 1}",
            stage_stats=stage_statistics(capture))

    backward(loss)
    optimizer.step()
    optimizer.zero_grad()
    return loss_value, t


def restore(model: Denoiser, degraded: np.ndarray,
            schedule: diffusion.NoiseSchedule, seed: int,
            gamma: Optional[float] = None,
            deterministic: bool = True) -> tuple[np.ndarray, list]:
    """Sample a restored batch from seeded noise, conditioned on ``degraded``."""
    degraded = np.asarray(degraded, dtype=model.dtype)
    if degraded.ndim != 4 or degraded.shape[1] != 3:
        raise ShapeError(f"restore expects [N,3,H,W] input, got {degraded.shape}")
    cond_cache: dict[int, Tensor] = {}

    def denoise(y: Tensor, t: int) -> Tensor:
        scale = degraded.shape[2] // y.shape[2]
        if scale not in cond_cache:
            cond_cache[scale] = ops.resize_area(Tensor(degraded), scale)
        return model(y, cond_cache[scale], t, gamma=gamma)

    with no_grad():
        out, trace = diffusion.sample(degraded.shape, denoise, schedule, seed,
                                      deterministic=deterministic, dtype=model.dtype)
    return out.data.copy(), trace


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

MAGIC = b"OMNR"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _write_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_exact(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointCorruptError(
            f"checkpoint truncated: wanted {n} bytes, got {len(raw)}")
    return raw


def _read_str(buf) -> str:
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    return _read_exact(buf, n).decode("utf-8")


def save_checkpoint(path: str, model: Denoiser, optimizer: Optional[Adam] = None,
                    extra_meta: Optional[dict[str, str]] = None) -> None:
    """Write model weights, config, and optimizer moments to ``path``."""
    meta = dict(model.config.to_flat())
    meta["step_count"] = str(optimizer.step_count if optimizer else 0)
    meta.update(extra_meta or {})

    tensors: dict[str, np.ndarray] = {k: v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(meta)))
    for key in sorted(meta):
        _write_str(buf, key)
        _write_str(buf, meta[key])
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, order="C")
        if arr.dtype not in _DTYPE_CODES:
            raise ConfigError(f"unsupported tensor dtype {arr.dtype} for {name}")
        _write_str(buf, name)
        buf.write(struct.pack("<B", _DTYPE_CODES[arr.dtype]))
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path: str) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    """Parse a checkpoint container into (metadata, named arrays)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointCorruptError(
                f"bad magic {magic!r}; not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {version} unsupported "
                f"(this build reads {FORMAT_VERSION})")
        (n_meta,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = {}
        for _ in range(n_meta):
            key = _read_str(fh)
            meta[key] = _read_str(fh)
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = {}
        for _ in range(n_tensors):
            name = _read_str(fh)
            (code,) = struct.unpack("<B", _read_exact(fh, 1))
            if code not in _CODE_DTYPES:
                raise CheckpointCorruptError(f"unknown dtype code {code} for {name}")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
            (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8))
            dtype = _CODE_DTYPES[code]
            expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if nbytes != expected:
                raise CheckpointCorruptError(
                    f"tensor {name}: payload length {nbytes} != {expected}")
            raw = _read_exact(fh, nbytes)
            arrays[name] = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(
                dtype).reshape(shape)
        return meta, arrays


def config_from_meta(meta: dict[str, str]) -> ModelConfig:
    return ModelConfig.from_flat(meta)


def check_config_compatible(loaded: ModelConfig, expected: ModelConfig) -> None:
    """Field-by-field comparison; names the first mismatch."""
    for f in fields(ModelConfig):
        a, b = getattr(loaded, f.name), getattr(expected, f.name)
        if a != b:
            raise ConfigMismatchError(
                f"checkpoint config field {f.name!r} is {a!r}, expected {b!r}")


def load_model(path: str, expected_config: Optional[ModelConfig] = None,
               with_optimizer: bool = False, lr: float = 2e-4, dtype=np.float32):
    """Rebuild a Denoiser (and optionally its Adam state) from a checkpoint."""
    meta, arrays = read_checkpoint(path)
    config = config_from_meta(meta)
    if expected_config is not None:
        check_config_compatible(config, expected_config)
    model = Denoiser(config, dtype=dtype)
    weights = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    model.load_state_dict(weights)
    if not with_optimizer:
        return model, meta
    optimizer = Adam(list(model.named_parameters()), lr=lr)
    if any(k.startswith("adam.") for k in arrays):
        optimizer.load_state_arrays(arrays, int(meta.get("step_count", "0")))
    return model, optimizer, meta
