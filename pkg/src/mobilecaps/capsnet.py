"""Capsule layers with routing-by-agreement.

Votes are ``u_i @ W_ij``; routing starts from zero logits, turns them into
coupling coefficients with a softmax over output capsules, squashes the
coupled sum and raises each logit by the agreement ``v_j . u_hat_j|i``.
Gradients see the final coefficients as constants.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter, Tensor, ops
from .layers import Module

SQUASH_EPS = 1e-7


@dataclass(frozen=True)
class CapsuleLayerConfig:
    in_caps: int
    in_dim: int
    out_caps: int
    out_dim: int
    routing_iters: int = 3
    share_groups: int | None = None  # None: one weight matrix per input capsule

    def __post_init__(self):
        if min(self.in_caps, self.in_dim, self.out_caps, self.out_dim) < 1:
            raise ValueError(f"capsule dimensions must be >= 1: {self}")
        if self.routing_iters < 1:
            raise ValueError(f"routing_iters must be >= 1, got {self.routing_iters}")
        if self.in_caps % self.groups:
            raise ValueError(f"in_caps={self.in_caps} not divisible by share_groups={self.groups}")

    @property
    def groups(self) -> int:
        return self.in_caps if self.share_groups is None else self.share_groups


@dataclass
class RoutingState:
    logits: np.ndarray          # [batch, I, J], values used for the final iteration
    coefficients: np.ndarray    # [batch, I, J]
    votes: Tensor               # [batch, I, J, out_dim]
    preactivations: Tensor      # [batch, J, out_dim]
    outputs: Tensor             # [batch, J, out_dim]
    coefficient_history: list[np.ndarray] = field(default_factory=list, repr=False)
    output_history: list[np.ndarray] = field(default_factory=list, repr=False)


class _RoutingReplay:
    def __init__(self):
        self.coefficients: list[np.ndarray] = []
        self.cursor = 0

    def reset(self) -> None:
        self.cursor = 0

    def take(self, computed: np.ndarray) -> np.ndarray:
        if self.cursor < len(self.coefficients):
            c = self.coefficients[self.cursor]
        else:
            c = computed
            self.coefficients.append(c)
        self.cursor += 1
        return c


_replay: _RoutingReplay | None = None


@contextlib.contextmanager
def frozen_routing():
    """Pin coupling coefficients across repeated forward passes.

    The first forward pass records the final coefficients of every routing
    call; later passes (after ``reset()``) reuse them. This makes the forward
    function match what backward differentiates, which finite-difference
    checks need.
    """
    global _replay
    prev, _replay = _replay, _RoutingReplay()
    try:
        yield _replay
    finally:
        _replay = prev


def squash(s: Tensor) -> Tensor:
    return ops.squash(s, SQUASH_EPS)


def _squash_np(s: np.ndarray) -> np.ndarray:
    n = np.sqrt((s * s).sum(axis=-1, keepdims=True))
    n2 = n * n
    return n2 / ((1 + n2) * (n + SQUASH_EPS)) * s


def _softmax_np(b: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(b - b.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def predict_votes(u: Tensor, w: Tensor) -> Tensor:
    return ops.predict_votes(u, w)


def dynamic_routing(votes: Tensor, routing_iters: int) -> RoutingState:
    if routing_iters < 1:
        raise ValueError(f"routing_iters must be >= 1, got {routing_iters}")
    u = votes.data
    b = np.zeros(u.shape[:3], dtype=u.dtype)
    c_hist, v_hist = [], []
    for it in range(routing_iters):
        c = _softmax_np(b, axis=2)
        s = np.einsum("bij,bije->bje", c, u)
        v = _squash_np(s)
        c_hist.append(c)
        v_hist.append(v)
        if it < routing_iters - 1:
            b = b + np.einsum("bje,bije->bij", v, u)
    if _replay is not None:
        c = _replay.take(c)
    s_t = ops.route_sum(votes, c)
    v_t = squash(s_t)
    return RoutingState(b, c, votes, s_t, v_t, c_hist, v_hist)


def primary_capsules(feature_map: Tensor, capsule_dim: int) -> Tensor:
    """[batch, H, W, C] -> squashed [batch, H*W*(C/d), d].

    Row-major reshape gives position-major ordering: capsule index is
    ``position * (C // d) + type`` where type selects channels
    ``type*d : (type+1)*d`` of that pixel.
    """
    bsz, h, w, c = feature_map.shape
    if c % capsule_dim:
        raise ValueError(f"channel extent {c} not divisible by capsule dim {capsule_dim}")
    caps = ops.reshape(feature_map, (bsz, h * w * (c // capsule_dim), capsule_dim))
    return squash(caps)


def capsule_lengths(v: Tensor) -> Tensor:
    return ops.vector_length(v)


class CapsuleLayer(Module):
    def __init__(self, cfg: CapsuleLayerConfig, rng: np.random.Generator):
        self.cfg = cfg
        shape = (cfg.groups, cfg.out_caps, cfg.in_dim, cfg.out_dim)
        std = 1.0 / np.sqrt(cfg.in_dim)
        self.weight = Parameter((rng.standard_normal(shape) * std).astype(np.float32))
        self.last_state: RoutingState | None = None

    def route(self, u: Tensor) -> RoutingState:
        if u.shape[1:] != (self.cfg.in_caps, self.cfg.in_dim):
            raise ValueError(f"capsule layer expects [batch, {self.cfg.in_caps}, {self.cfg.in_dim}], got {u.shape}")
        state = dynamic_routing(predict_votes(u, self.weight), self.cfg.routing_iters)
        self.last_state = state
        return state

    def __call__(self, u: Tensor) -> Tensor:
        return self.route(u).outputs


HEAD_KINDS = ("classifier", "severity")


class CapsuleHead(Module):
    """Stack of routed capsule layers; outputs the final capsules' lengths."""

    def __init__(self, configs: list[CapsuleLayerConfig], rng: np.random.Generator):
        for a, b in zip(configs, configs[1:]):
            if (a.out_caps, a.out_dim) != (b.in_caps, b.in_dim):
                raise ValueError(f"capsule layer {a} does not feed {b}")
        self.layers = [CapsuleLayer(cfg, rng) for cfg in configs]

    @property
    def dims(self) -> list[tuple[int, int]]:
        cfgs = [layer.cfg for layer in self.layers]
        return [(cfgs[0].in_caps, cfgs[0].in_dim)] + [(c.out_caps, c.out_dim) for c in cfgs]

    def capsules(self, u: Tensor) -> Tensor:
        for layer in self.layers:
            u = layer(u)
        return u

    def __call__(self, u: Tensor) -> Tensor:
        return capsule_lengths(self.capsules(u))


def capsule_head_configs(kind: str = "classifier", primary_caps: int = 392, primary_dim: int = 128,
                         primary_groups: int | None = 8, hidden=((32, 16), (32, 16)),
                         num_classes: int = 3, final_dim: int = 16,
                         routing_iters: int = 3) -> list[CapsuleLayerConfig]:
    if kind not in HEAD_KINDS:
        raise ValueError(f"unknown head kind {kind!r}; choose from {HEAD_KINDS}")
    out_caps = num_classes if kind == "classifier" else 1
    dims = [(primary_caps, primary_dim)] + [tuple(h) for h in hidden] + [(out_caps, final_dim)]
    configs = []
    for i, ((ni, di), (no, do)) in enumerate(zip(dims, dims[1:])):
        groups = primary_groups if i == 0 else None
        configs.append(CapsuleLayerConfig(ni, di, no, do, routing_iters, groups))
    return configs


def build_capsule_head(kind: str = "classifier", rng: np.random.Generator | None = None,
                       **kwargs) -> CapsuleHead:
    """Classifier: 392x128 -> 32x16 -> 32x16 -> 3x16; severity swaps the last layer for 1x16."""
    return CapsuleHead(capsule_head_configs(kind, **kwargs),
                       rng if rng is not None else np.random.default_rng(0))
