"""The restoration-specific network blocks.

Five units, each a pure function of (inputs, parameters):

- :class:`DualDomainPrompter` reads a degraded image in both the spatial and
  the frequency domain and produces one prompt vector per batch item, a
  convex mixture of learned dictionary atoms.
- :class:`TaskAdaptiveEmbedding` turns the prompt into a task embedding
  through shared branches plus a sparsely activated expert mixture.
- :class:`DualStreamEncoder` embeds two feature streams with shared weights
  and lets them exchange information through one joint self-attention.
- :class:`RectifiedFusionBlock` fuses the two streams with an attention map
  that blends a softmax response and a rectified (gelu) response.
- :class:`NoiseAwareRouter` scores channels from a pooled descriptor plus
  the noise embedding, refines only the top fraction through depthwise
  residual blocks, and writes them back in place.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from .engine import Tensor, ops
from .engine.fft import log_magnitude
from .engine.flops import active_counter, active_timer
from .errors import ConfigError, ShapeError
from .layers import (
    ChannelNorm,
    Conv2d,
    ConvFfn,
    DepthwiseConv2d,
    Linear,
    Mlp,
    Module,
    flatten_positions,
    scaled_scores,
    unflatten_positions,
)


class DualDomainPrompter(Module):
    """Image -> prompt vector via per-site atom mixing in two domains.

    Each stem maps the 3-channel input to M per-site logits; the spatial stem
    reads the image directly, the frequency stem reads the log-magnitude
    spectrum. Logits from enabled stems are summed, softmaxed over the atom
    dimension at every site, used to mix the M dictionary atoms, and the
    per-site prompts are averaged over space. Either stem can be disabled to
    measure its contribution; with both off the prompt is the uniform atom
    mean.
    """

    def __init__(self, atom_count: int, prompt_dim: int, rng: np.random.Generator,
                 use_spatial: bool = True, use_frequency: bool = True,
                 dtype=np.float32):
        if atom_count < 2:
            raise ConfigError(f"prompt dictionary needs at least 2 atoms, got {atom_count}")
        self.atom_count = atom_count
        self.prompt_dim = prompt_dim
        self.use_spatial = use_spatial
        self.use_frequency = use_frequency
        self.spatial_stem = Conv2d(3, atom_count, 3, rng, padding=1, dtype=dtype)
        self.frequency_stem = Conv2d(3, atom_count, 3, rng, padding=1, dtype=dtype)
        self.atoms = Tensor((rng.standard_normal((atom_count, prompt_dim)) * 0.5).astype(dtype),
                            requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != 3:
            raise ShapeError(f"prompter expects 3-channel images, got {c}")
        logits = None
        if self.use_spatial:
            logits = self.spatial_stem(x)
        if self.use_frequency:
            spectrum = Tensor(log_magnitude(x.data).astype(x.data.dtype))
            freq = self.frequency_stem(spectrum)
            logits = freq if logits is None else logits + freq
        if logits is None:
            logits = Tensor(np.zeros((n, self.atom_count, h, w), dtype=x.data.dtype))
        weights = ops.softmax(logits, axis=1)
        tokens = ops.transpose(ops.reshape(weights, (n, self.atom_count, h * w)), (0, 2, 1))
        site_prompts = ops.matmul(tokens, self.atoms)
        return ops.mean(site_prompts, axis=1)


class TaskAdaptiveEmbedding(Module):
    """Prompt -> task embedding through shared branches and gated experts.

    The gate projects the prompt to one logit per expert and softmaxes; only
    the top ``k_active`` weights survive (the rest are zeroed, the survivors
    are kept as-is without renormalization). The embedding is the sum of all
    shared branches plus the weighted selected experts.
    """

    def __init__(self, prompt_dim: int, embed_dim: int, rng: np.random.Generator,
                 expert_count: int = 4, shared_count: int = 1, k_active: int = 2,
                 hidden: int | None = None, dtype=np.float32):
        if not 1 <= k_active <= expert_count:
            raise ConfigError(
                f"k_active must lie in [1, {expert_count}], got {k_active}")
        if shared_count < 1:
            raise ConfigError(f"need at least one shared branch, got {shared_count}")
        hidden = hidden or 2 * embed_dim
        self.k_active = k_active
        self.shared = [Mlp(prompt_dim, hidden, embed_dim, rng, dtype=dtype)
                       for _ in range(shared_count)]
        self.experts = [Mlp(prompt_dim, hidden, embed_dim, rng, dtype=dtype)
                        for _ in range(expert_count)]
        self.gate = Linear(prompt_dim, expert_count, rng, dtype=dtype)

    def gate_weights(self, prompt: Tensor) -> tuple[Tensor, np.ndarray]:
        """Masked expert weights [N,K] and the selected index rows [N,k]."""
        full = ops.softmax(self.gate(prompt), axis=-1)
        selected = ops.topk_indices(full.data, self.k_active)
        mask = np.zeros_like(full.data)
        np.put_along_axis(mask, selected, 1.0, axis=-1)
        return ops.mul(full, Tensor(mask)), selected

    def forward(self, prompt: Tensor) -> Tensor:
        weights, _ = self.gate_weights(prompt)
        out = self.shared[0](prompt)
        for branch in self.shared[1:]:
            out = out + branch(prompt)
        for k, expert in enumerate(self.experts):
            w_k = ops.slice_axis(weights, k, k + 1, axis=1)
            out = out + ops.mul(expert(prompt), w_k)
        return out


class DualStreamEncoder(Module):
    """Two feature streams, one shared embedding, one joint self-attention.

    Both streams pass through the same conv -> norm -> conv embedding. The
    embedded streams are concatenated on channels and attend over spatial
    positions with the concatenation serving as query, key and value at
    once; the result is split back and each half is finished by a shared
    residual pointwise feed-forward. Sharing the weights makes the block
    symmetric: identical inputs produce identical outputs.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.embed_in = Conv2d(channels, channels, 3, rng, padding=1, dtype=dtype)
        self.embed_norm = ChannelNorm(channels, dtype=dtype)
        self.embed_out = Conv2d(channels, channels, 3, rng, padding=1, dtype=dtype)
        self.ffn = ConvFfn(channels, rng, dtype=dtype)

    def _embed(self, x: Tensor) -> Tensor:
        return self.embed_out(self.embed_norm(self.embed_in(x)))

    def forward(self, x_feat: Tensor, y_feat: Tensor) -> tuple[Tensor, Tensor]:
        if x_feat.shape != y_feat.shape:
            raise ShapeError(
                f"stream shapes differ: {x_feat.shape} vs {y_feat.shape}")
        ex = self._embed(x_feat)
        ey = self._embed(y_feat)
        joint = ops.concat([ex, ey], axis=1)
        tokens, shape = flatten_positions(joint)
        attn = ops.matmul(ops.softmax(scaled_scores(tokens, tokens), axis=-1), tokens)
        mixed = unflatten_positions(attn, shape)
        ax, ay = ops.chunk(mixed, 2, axis=1)
        return ax + self.ffn(ax), ay + self.ffn(ay)


class RectifiedFusionBlock(Module):
    """Cross-attention fusion with a learned sharp/smooth response blend.

    Query and key come from one stream, value from the other. The scaled
    score matrix S feeds two branches, ``w1 * softmax(S) + w2 * gelu(S)``,
    whose blend weights are learned scalars starting at (1, 0), i.e. plain
    cross-attention. The attended value is projected, added to the
    query-side stream, and pushed through a pointwise feed-forward that
    directly forms the output.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dtype=np.float32):
        self.norm_qk = ChannelNorm(channels, dtype=dtype)
        self.qk_proj = Conv2d(channels, 2 * channels, 1, rng, dtype=dtype)
        self.norm_v = ChannelNorm(channels, dtype=dtype)
        self.v_proj = Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.w1 = Tensor(np.ones((), dtype=dtype), requires_grad=True)
        self.w2 = Tensor(np.zeros((), dtype=dtype), requires_grad=True)
        self.post = Conv2d(channels, channels, 3, rng, padding=1, dtype=dtype)
        self.ffn = ConvFfn(channels, rng, dtype=dtype)

    def forward(self, x_feat: Tensor, y_feat: Tensor) -> Tensor:
        if x_feat.shape != y_feat.shape:
            raise ShapeError(
                f"fusion inputs differ in shape: {x_feat.shape} vs {y_feat.shape}")
        qk = self.qk_proj(self.norm_qk(x_feat))
        q_map, k_map = ops.chunk(qk, 2, axis=1)
        v_map = self.v_proj(self.norm_v(y_feat))
        q, _ = flatten_positions(q_map)
        k, _ = flatten_positions(k_map)
        v, shape = flatten_positions(v_map)
        scores = scaled_scores(q, k)
        blend = ops.mul(ops.softmax(scores, axis=-1), self.w1) + ops.mul(ops.gelu(scores), self.w2)
        attended = unflatten_positions(ops.matmul(blend, v), shape)
        return self.ffn(self.post(attended) + x_feat)


@dataclass
class RoutingDecision:
    """Outcome of one channel-routing pass.

    ``relevance`` holds the post-softmax channel scores per item [N, C];
    ``selected`` the chosen channel indices per item [N, k], ascending;
    ``gamma`` the selection ratio that produced them.
    """

    relevance: np.ndarray
    selected: np.ndarray
    gamma: float

    @property
    def k(self) -> int:
        return self.selected.shape[-1]


def selection_size(channels: int, gamma: float) -> int:
    """|selected| = max(1, floor(gamma * C))."""
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"selection ratio must lie in (0, 1], got {gamma}")
    return max(1, math.floor(gamma * channels))


class NoiseAwareRouter(Module):
    """Refine only the most relevant channels, leaving the rest untouched.

    A pooled channel descriptor, shifted by a projection of the noise
    embedding, passes through two linear layers and a softmax to produce
    relevance scores. The top max(1, floor(gamma*C)) channels per item are
    gathered, refined by ``n_res`` depthwise residual blocks (final layers
    zero-initialized so refinement starts as identity), and scattered back.
    Unselected channels keep their exact bit patterns. Selection is a hard
    decision: the relevance scores never receive gradient through it.
    """

    def __init__(self, channels: int, embed_dim: int, rng: np.random.Generator,
                 gamma: float = 0.5, n_res: int = 2, dtype=np.float32):
        if n_res < 1:
            raise ConfigError(f"need at least one residual block, got {n_res}")
        selection_size(channels, gamma)
        self.channels = channels
        self.gamma = gamma
        self.noise_proj = Linear(embed_dim, channels, rng, dtype=dtype)
        self.gate_fc1 = Linear(channels, channels, rng, dtype=dtype)
        self.gate_fc2 = Linear(channels, channels, rng, dtype=dtype)
        self.res_in = [DepthwiseConv2d(channels, 3, rng, padding=1, dtype=dtype)
                       for _ in range(n_res)]
        self.res_out = [DepthwiseConv2d(channels, 3, rng, padding=1, zero_init=True,
                                        dtype=dtype) for _ in range(n_res)]

    def relevance(self, f_in: Tensor, noise_embedding: Tensor) -> Tensor:
        pooled = ops.reshape(ops.adaptive_avg_pool(f_in), f_in.shape[:2])
        desc = pooled + self.noise_proj(noise_embedding)
        return ops.softmax(self.gate_fc2(self.gate_fc1(desc)), axis=-1)

    def forward(self, f_in: Tensor, noise_embedding: Tensor,
                gamma: float | None = None) -> tuple[Tensor, RoutingDecision]:
        gamma = self.gamma if gamma is None else gamma
        k = selection_size(self.channels, gamma)
        scores = self.relevance(f_in, noise_embedding)
        selected = ops.topk_indices(scores.data, k)

        counter = active_counter()
        timer = active_timer()
        refine_scope = counter.scope("route_refine") if counter else contextlib.nullcontext()
        timed = timer.section("route_refine") if timer else contextlib.nullcontext()
        refined = ops.gather_channels(f_in, selected)
        with refine_scope, timed:
            for conv_in, conv_out in zip(self.res_in, self.res_out):
                h = ops.gelu(conv_in.forward_rows(refined, selected))
                refined = refined + conv_out.forward_rows(h, selected)
        f_out = ops.scatter_channels(f_in, refined, selected)
        decision = RoutingDecision(relevance=scores.data.copy(),
                                   selected=selected, gamma=gamma)
        return f_out, decision
