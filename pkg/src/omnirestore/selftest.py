"""Built-in verification suites runnable from the command line.

Five suites cover the numerical core: finite-difference gradient checks
for every differentiable op and composite block, FFT correctness against
the numpy reference, routing fidelity, diffusion-schedule identities, and
the metric/accounting oracles. Each suite returns a list of failure
strings naming the offending check, so a broken op is reported by name.

``GRADIENT_CHECKS`` is a plain module-level list of (name, callable)
pairs; tests inject deliberately broken entries to prove failures surface.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import blocks, diffusion, metrics
from .engine import Tensor, fft, ops
from .engine.flops import FlopCounter
from .engine.gradcheck import check_directional, check_gradients
from .errors import ConfigError


def _t(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _pos(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.random(shape) + 0.5, requires_grad=True)


def _check(fn, tensors, rng, **kw) -> float:
    kw.setdefault("eps", 1e-5)
    kw.setdefault("max_coords", 6)
    return check_gradients(fn, tensors, rng=rng, **kw)


def _block_params(block) -> list[Tensor]:
    return [p for _, p in block.named_parameters()]


def _op_checks() -> list[tuple[str, Callable]]:
    checks = [
        ("op.add", lambda r: _check(ops.add, [_t(r, 3, 4), _t(r, 3, 4)], r)),
        ("op.sub", lambda r: _check(ops.sub, [_t(r, 3, 4), _t(r, 1, 4)], r)),
        ("op.mul", lambda r: _check(ops.mul, [_t(r, 3, 4), _t(r, 3, 4)], r)),
        ("op.mul_scalar", lambda r: _check(
            lambda a: ops.mul_scalar(a, 1.7), [_t(r, 3, 4)], r)),
        ("op.square", lambda r: _check(ops.square, [_t(r, 3, 4)], r)),
        ("op.absolute", lambda r: _check(
            ops.absolute, [Tensor(r.random((3, 4)) + 0.4, requires_grad=True)], r)),
        ("op.exp", lambda r: _check(ops.exp, [_t(r, 3, 4)], r)),
        ("op.log", lambda r: _check(ops.log, [_pos(r, 3, 4)], r)),
        ("op.tanh", lambda r: _check(ops.tanh, [_t(r, 3, 4)], r)),
        ("op.sigmoid", lambda r: _check(ops.sigmoid, [_t(r, 3, 4)], r)),
        ("op.relu", lambda r: _check(
            ops.relu, [Tensor(r.random((3, 4)) + 0.4, requires_grad=True)], r)),
        ("op.gelu", lambda r: _check(ops.gelu, [_t(r, 3, 4)], r)),
        ("op.sum", lambda r: _check(
            lambda a: ops.sum_(a, axis=1), [_t(r, 3, 4)], r)),
        ("op.mean", lambda r: _check(
            lambda a: ops.mean(a, axis=(1, 2)), [_t(r, 2, 3, 4)], r)),
        ("op.reshape", lambda r: _check(
            lambda a: ops.reshape(a, (4, 3)), [_t(r, 3, 4)], r)),
        ("op.transpose", lambda r: _check(
            lambda a: ops.transpose(a, (1, 0, 2)), [_t(r, 2, 3, 4)], r)),
        ("op.concat", lambda r: _check(
            lambda a, b: ops.concat([a, b], axis=1), [_t(r, 2, 3), _t(r, 2, 2)], r)),
        ("op.slice", lambda r: _check(
            lambda a: ops.slice_axis(a, 1, 3, axis=1), [_t(r, 2, 4)], r)),
        ("op.chunk", lambda r: _check(
            lambda a: ops.chunk(a, 2, axis=1)[1], [_t(r, 2, 4)], r)),
        ("op.matmul", lambda r: _check(
            ops.matmul, [_t(r, 2, 3, 4), _t(r, 4, 5)], r)),
        ("op.linear", lambda r: _check(
            ops.linear, [_t(r, 3, 4), _t(r, 4, 5), _t(r, 5)], r)),
        ("op.conv2d", lambda r: _check(
            lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1),
            [_t(r, 1, 2, 6, 6), _t(r, 3, 2, 3, 3), _t(r, 3)], r)),
        ("op.depthwise_conv2d", lambda r: _check(
            lambda x, w, b: ops.depthwise_conv2d(x, w, b, padding=1),
            [_t(r, 1, 3, 5, 5), _t(r, 3, 3, 3), _t(r, 3)], r)),
        ("op.layer_norm", lambda r: _check(
            lambda x, g, s: ops.layer_norm(x, g, s, axis=1),
            [_t(r, 2, 4, 3, 3), _t(r, 4), _t(r, 4)], r)),
        ("op.softmax", lambda r: _check(
            lambda a: ops.softmax(a, axis=-1), [_t(r, 3, 5)], r)),
        ("op.resize_bilinear", lambda r: _check(
            lambda a: ops.resize_bilinear(a, 2.0), [_t(r, 1, 2, 4, 4)], r)),
        ("op.resize_area", lambda r: _check(
            lambda a: ops.resize_area(a, 2), [_t(r, 1, 2, 4, 4)], r)),
        ("op.adaptive_avg_pool", lambda r: _check(
            ops.adaptive_avg_pool, [_t(r, 2, 3, 4, 4)], r)),
        ("op.gather_channels", lambda r: _check(
            lambda a: ops.gather_channels(a, np.array([[0, 2], [1, 3]])),
            [_t(r, 2, 4, 3, 3)], r)),
        ("op.scatter_channels", lambda r: _check(
            lambda a, b: ops.scatter_channels(a, b, np.array([[0, 2], [1, 3]])),
            [_t(r, 2, 4, 3, 3), _t(r, 2, 2, 3, 3)], r)),
        ("op.take_rows", lambda r: _check(
            lambda w: ops.take_rows(w, np.array([[0, 2], [1, 2]])),
            [_t(r, 4, 3, 3)], r)),
    ]
    return checks


def _block_checks() -> list[tuple[str, Callable]]:
    def prompter(r):
        # The frequency stem reads the spectrum as a constant feature map, so
        # input gradients are only defined for the spatial-stem path; the
        # parameter probe runs with both stems active.
        spatial = blocks.DualDomainPrompter(4, 6, r, use_frequency=False,
                                            dtype=np.float64)
        x = Tensor(r.random((2, 3, 8, 8)), requires_grad=True)
        worst = _check(lambda v: spatial(v), [x], r)
        both = blocks.DualDomainPrompter(4, 6, r, dtype=np.float64)
        x_fixed = Tensor(r.random((2, 3, 8, 8)))
        return max(worst, check_directional(
            lambda *_: both(x_fixed), _block_params(both), eps=1e-5, rng=r))

    def task_embedding(r):
        block = blocks.TaskAdaptiveEmbedding(6, 5, r, dtype=np.float64)
        p = _t(r, 2, 6)
        worst = _check(lambda v: block(v), [p], r)
        params = [t for n, t in block.named_parameters() if "gate" not in n]
        return max(worst, check_directional(
            lambda *_: block(p), params, eps=1e-5, rng=r))

    def encoder(r):
        block = blocks.DualStreamEncoder(4, r, dtype=np.float64)
        a, b = _t(r, 1, 4, 4, 4), _t(r, 1, 4, 4, 4)
        worst = _check(lambda u, v: block(u, v)[0] + block(u, v)[1], [a, b], r)
        return max(worst, check_directional(
            lambda *_: block(a, b)[0], _block_params(block), eps=1e-5, rng=r))

    def fusion(r):
        block = blocks.RectifiedFusionBlock(4, r, dtype=np.float64)
        block.w2.data = np.asarray(0.3)
        a, b = _t(r, 1, 4, 4, 4), _t(r, 1, 4, 4, 4)
        worst = _check(lambda u, v: block(u, v), [a, b], r)
        return max(worst, check_directional(
            lambda *_: block(a, b), _block_params(block), eps=1e-5, rng=r))

    def router(r):
        block = blocks.NoiseAwareRouter(4, 5, r, gamma=0.5, dtype=np.float64)
        for conv in block.res_out:
            conv.weight.data = 0.1 * r.standard_normal(conv.weight.shape)
        f_in, emb = _t(r, 2, 4, 3, 3), _t(r, 2, 5)
        worst = _check(lambda u, v: block(u, v)[0], [f_in, emb], r)
        params = [t for n, t in block.named_parameters()
                  if not any(g in n for g in ("noise_proj", "gate_fc"))]
        return max(worst, check_directional(
            lambda *_: block(f_in, emb)[0], params, eps=1e-5, rng=r))

    def denoiser(r):
        from .model import Denoiser, ModelConfig

        config = ModelConfig(base_channels=8, depth=2, steps=4,
                             pyramid_levels=((2, 1), (2, 2)), seed=11)
        model = Denoiser(config, dtype=np.float64)
        y = Tensor(r.standard_normal((1, 3, 16, 16)), requires_grad=True)
        x = Tensor(r.random((1, 3, 16, 16)))
        worst = _check(lambda v: model(v, x, 2), [y], r, max_coords=2)
        params = [t for n, t in model.named_parameters()
                  if not any(g in n for g in ("noise_proj", "gate_fc"))]
        return max(worst, check_directional(
            lambda *_: model(y, x, 2), params, eps=1e-5, rng=r))

    return [("block.prompter", prompter),
            ("block.task_embedding", task_embedding),
            ("block.dual_stream_encoder", encoder),
            ("block.fusion", fusion),
            ("block.router", router),
            ("model.denoiser_16x16", denoiser)]


GRADIENT_CHECKS: list[tuple[str, Callable]] = _op_checks() + _block_checks()


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

def _suite_gradients(rng: np.random.Generator) -> list[str]:
    failures = []
    for name, fn in GRADIENT_CHECKS:
        try:
            fn(np.random.default_rng(rng.integers(2 ** 31)))
        except AssertionError as exc:
            failures.append(f"{name}: {str(exc).splitlines()[0]}")
    return failures


def _suite_fft(rng: np.random.Generator) -> list[str]:
    failures = []
    x = rng.standard_normal((16, 16))
    ours = fft.fft2(x)
    ref = np.fft.fft2(x)
    if not (np.allclose(ours.real, ref.real, atol=1e-9)
            and np.allclose(ours.imag, ref.imag, atol=1e-9)):
        failures.append("fft2: disagrees with the numpy reference")
    back = fft.ifft2(ours)
    if not np.allclose(back.real, x, atol=1e-10):
        failures.append("ifft2: roundtrip error above 1e-10")
    ours_energy = float(np.sum(ours.real ** 2 + ours.imag ** 2)) / x.size
    if not math.isclose(ours_energy, float(np.sum(x ** 2)), rel_tol=1e-9):
        failures.append("fft2: Parseval identity violated")
    return failures


def _suite_routing(rng: np.random.Generator) -> list[str]:
    failures = []
    for c, gamma, want in ((8, 0.5, 4), (8, 1.0, 8), (5, 0.5, 2), (3, 0.1, 1)):
        got = blocks.selection_size(c, gamma)
        if got != want:
            failures.append(f"selection_size({c},{gamma}): {got} != {want}")

    router = blocks.NoiseAwareRouter(8, 4, np.random.default_rng(3), gamma=0.5)
    for conv in router.res_out:
        conv.weight.data = 0.1 * rng.standard_normal(conv.weight.shape) \
            .astype(np.float32)
    f_in = Tensor(rng.standard_normal((2, 8, 6, 6)).astype(np.float32))
    emb = Tensor(rng.standard_normal((2, 4)).astype(np.float32))
    out, decision = router(f_in, emb)
    for item in range(2):
        keep = [c for c in range(8) if c not in decision.selected[item]]
        if not np.array_equal(out.data[item, keep], f_in.data[item, keep]):
            failures.append("router: unselected channels were modified")
            break

    fresh = blocks.NoiseAwareRouter(8, 4, np.random.default_rng(4), gamma=0.5)
    identity, _ = fresh(f_in, emb)
    if not np.array_equal(identity.data, f_in.data):
        failures.append("router: zero-initialized refinement is not identity")

    counts = {}
    for gamma in (0.5, 1.0):
        with FlopCounter() as counter:
            router(f_in, emb, gamma=gamma)
        counts[gamma] = counter.scoped_total("route_refine")
    if counts[0.5] * 2 != counts[1.0]:
        failures.append("router: refinement MACs do not halve at gamma=0.5")
    return failures


def _suite_schedule(rng: np.random.Generator) -> list[str]:
    failures = []
    schedule = diffusion.make_schedule(10, 1e-4, 0.05, ((10, 1),))
    if not np.all(np.diff(schedule.alpha_bar) < 0):
        failures.append("schedule: alpha_bar is not strictly decreasing")

    x0 = rng.standard_normal((1, 2, 2, 2))
    y_t = Tensor(rng.standard_normal((1, 2, 2, 2)))

    def stub(_y, _t):
        return Tensor(x0.copy())

    ab_t = schedule.alpha_bar_at(2)
    ab_prev = schedule.alpha_bar_at(1)
    expect = math.sqrt(ab_prev) * x0 + ((1.0 - ab_prev) / (1.0 - ab_t)) * y_t.data
    got = diffusion.p_step(y_t, 2, stub, schedule)
    if not np.allclose(got.data, expect, atol=1e-12):
        failures.append("schedule: reverse-step mean deviates from closed form")

    stochastic = diffusion.p_step(y_t, 1, stub, schedule, deterministic=False,
                                  rng=np.random.default_rng(0))
    deterministic = diffusion.p_step(y_t, 1, stub, schedule)
    if not np.array_equal(stochastic.data, deterministic.data):
        failures.append("schedule: final reverse step variance is not exactly zero")
    return failures


def _suite_oracles(rng: np.random.Generator) -> list[str]:
    failures = []
    a = np.zeros((3, 4, 4))
    if not math.isclose(metrics.psnr(a, np.full_like(a, 0.1)), 20.0,
                        abs_tol=1e-9):
        failures.append("psnr: uniform 0.1 offset is not 20 dB")
    img = rng.random((3, 16, 16))
    if metrics.ssim(img, img.copy()) != 1.0:
        failures.append("ssim: self-similarity is not exactly 1")
    x = np.array([[-1.0], [1.0], [9.0], [11.0]])
    lam = metrics.wilks_lambda(x, np.array([0, 0, 1, 1])).value
    if not math.isclose(lam, 4.0 / 104.0, rel_tol=1e-12):
        failures.append("wilks: hand-computed 1-D case mismatch")
    with FlopCounter() as counter:
        ops.conv2d(Tensor(rng.standard_normal((1, 1, 8, 8))),
                   Tensor(rng.standard_normal((1, 1, 3, 3))), None, padding=1)
    if counter.total != 576:
        failures.append(f"flops: 3x3 conv fixture counted {counter.total} != 576")
    return failures


SUITES: dict[str, Callable[[np.random.Generator], list[str]]] = {
    "gradients": _suite_gradients,
    "fft": _suite_fft,
    "routing": _suite_routing,
    "schedule": _suite_schedule,
    "oracles": _suite_oracles,
}


@dataclass
class SuiteResult:
    name: str
    seconds: float
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def run_selftest(names: list[str] | None = None, seed: int = 0) -> list[SuiteResult]:
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ConfigError(
            f"unknown suites {unknown}; available: {sorted(SUITES)}")
    results = []
    for name in names:
        rng = np.random.default_rng([seed, len(name)] + [ord(c) for c in name])
        start = time.perf_counter()
        failures = SUITES[name](rng)
        results.append(SuiteResult(name, time.perf_counter() - start, failures))
    return results


def render_results(results: list[SuiteResult]) -> str:
    lines = []
    for res in results:
        status = "ok" if res.passed else "fail"
        lines.append(f"suite={res.name} status={status} seconds={res.seconds:.2f}")
        lines.extend(f"  fail: {msg}" for msg in res.failures)
    total = sum(r.seconds for r in results)
    good = sum(r.passed for r in results)
    lines.append(f"suites_passed={good}/{len(results)} total_seconds={total:.2f}")
    return "\n".join(lines) + "\n"


def all_passed(results: list[SuiteResult]) -> bool:
    return all(r.passed for r in results)
