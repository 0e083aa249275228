"""LoRA and localized mixture-of-experts (L-MoE) adapters.

A LoRA adapter adds a low-rank bypass ``(alpha/r) * B @ A @ x`` to a frozen
projection. The L-MoE adapter inserts gated convolutional experts between
``A`` and ``B``: the rank-r projection of each token is laid out on the patch
grid, every expert filters that grid at its own scale, and the gate mixes the
expert outputs per token.

Parameter names follow ``{prefix}.lora.{A|B}``, ``{prefix}.lmoe.gate`` and
``{prefix}.lmoe.expert{j}.{kernel|bias}``. The federation layer relies on
these names to decide what leaves a client.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError
from .nn import grid_to_tokens, resample, tokens_to_grid
from .numerics import Tensor

EXPERT_SCALES = (1, 1, 2, 2)


def _param(data, name):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class LoraAdapter:
    A: Tensor
    B: Tensor
    rank: int
    alpha: float
    target_name: str = ""

    def __post_init__(self):
        d, k = self.B.shape[0], self.A.shape[1]
        if self.A.shape != (self.rank, k) or self.B.shape != (d, self.rank):
            raise ShapeError(f"LoRA factors {self.A.shape}, {self.B.shape} do not match rank {self.rank}")
        if self.rank >= min(d, k):
            raise ConfigError(f"LoRA rank {self.rank} must be below min(d, k) = {min(d, k)}", "rank")

    @classmethod
    def create(cls, d, k, rank, alpha, rng, target_name=""):
        bound = 1.0 / math.sqrt(k)
        A = _param(rng.uniform(-bound, bound, size=(rank, k)), f"{target_name}.lora.A")
        B = _param(np.zeros((d, rank)), f"{target_name}.lora.B")
        return cls(A, B, rank, alpha, target_name)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> dict[str, Tensor]:
        return {self.A.name: self.A, self.B.name: self.B}

    def __call__(self, x, W0, b0=None, grid=None):
        return lora_forward(self, W0, x, b0), None


@dataclass
class ConvExpert:
    scale: int
    kernel: Tensor
    bias: Tensor

    def __post_init__(self):
        if self.scale not in (1, 2):
            raise ConfigError(f"expert scale must be 1 or 2, got {self.scale}", "scale")

    def __call__(self, grid_x):
        z = resample(grid_x, "avgpool_down", self.scale)
        z = nm.conv2d(z, self.kernel, self.bias, padding=1)
        return resample(z, "nearest_up", self.scale)


@dataclass
class LmoeAdapter:
    A: Tensor
    B: Tensor
    gate_weights: Tensor
    experts: list
    top_k: int
    rank: int
    alpha: float
    target_name: str = ""

    def __post_init__(self):
        m = len(self.experts)
        if m < 1:
            raise ConfigError("L-MoE needs at least one expert", "experts")
        if not 1 <= self.top_k <= m:
            raise ConfigError(f"top_k must lie in [1, {m}], got {self.top_k}", "top_k")
        if self.gate_weights.shape != (m, self.rank):
            raise ShapeError(f"gate weights must be ({m}, {self.rank}), got {self.gate_weights.shape}")
        d, k = self.B.shape[0], self.A.shape[1]
        if self.A.shape != (self.rank, k) or self.B.shape != (d, self.rank):
            raise ShapeError(f"LoRA factors {self.A.shape}, {self.B.shape} do not match rank {self.rank}")

    @classmethod
    def create(
        cls,
        d,
        k,
        rank,
        alpha,
        rng,
        target_name="",
        n_experts=4,
        top_k=2,
        scales=EXPERT_SCALES,
        expert_init="identity",
    ):
        """Fresh adapter whose bypass is exactly zero (``B = 0``).

        ``expert_init="identity"`` starts every expert as a near-identity
        filter so that ``B`` and the experts receive non-zero gradients;
        ``"zero"`` gives all-zero kernels.
        """
        if len(scales) != n_experts:
            scales = tuple(scales[i % len(scales)] for i in range(n_experts))
        bound = 1.0 / math.sqrt(k)
        A = _param(rng.uniform(-bound, bound, size=(rank, k)), f"{target_name}.lora.A")
        B = _param(np.zeros((d, rank)), f"{target_name}.lora.B")
        gate = _param(np.zeros((n_experts, rank)), f"{target_name}.lmoe.gate")
        experts = []
        for j, scale in enumerate(scales):
            kernel = np.zeros((rank, rank, 3, 3))
            if expert_init == "identity":
                kernel[:, :, 1, 1] = np.eye(rank)
                kernel += rng.uniform(-0.01, 0.01, size=kernel.shape)
            elif expert_init != "zero":
                raise ValueError(f"unknown expert init {expert_init!r}")
            experts.append(
                ConvExpert(
                    scale,
                    _param(kernel, f"{target_name}.lmoe.expert{j}.kernel"),
                    _param(np.zeros(rank), f"{target_name}.lmoe.expert{j}.bias"),
                )
            )
        return cls(A, B, gate, experts, top_k, rank, alpha, target_name)

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def parameters(self) -> dict[str, Tensor]:
        out = {self.A.name: self.A, self.B.name: self.B, self.gate_weights.name: self.gate_weights}
        for e in self.experts:
            out[e.kernel.name] = e.kernel
            out[e.bias.name] = e.bias
        return out

    def __call__(self, x, W0, b0=None, grid=None):
        return _lmoe(self, W0, x, grid, b0)


# ---------------------------------------------------------------- LoRA


def lora_forward(adapter: LoraAdapter, W0, x, b0=None) -> Tensor:
    """``W0 x + (alpha/r) B A x`` for x of shape (k,) or (..., k)."""
    W0 = nm.as_tensor(W0)
    x = nm.as_tensor(x)
    if W0.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise ShapeError(f"W0 {W0.shape} does not match adapter ({adapter.B.shape[0]}, {adapter.A.shape[1]})")
    if x.shape[-1] != W0.shape[1]:
        raise ShapeError(f"input feature dim {x.shape[-1]} != {W0.shape[1]}")
    base = nm.linear(x, W0, b0)
    bypass = nm.linear(nm.linear(x, adapter.A), adapter.B)
    return base + bypass * adapter.scaling


# ---------------------------------------------------------------- gating


@dataclass
class Routing:
    """Per-token expert choice.

    ``probs`` is the full softmax (differentiable), ``mask`` marks the top-k
    experts, and ``weights`` holds the renormalised gate weights, zero outside
    the selection.
    """

    probs: Tensor
    mask: np.ndarray
    weights: Tensor
    indices: np.ndarray = field(repr=False)

    @property
    def selected_weights(self) -> np.ndarray:
        return np.take_along_axis(self.weights.data, self.indices, axis=-1)


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -p: equal probabilities keep ascending expert order
    return np.argsort(-probs, axis=-1, kind="stable")[..., :k]


def gate(adapter: LmoeAdapter, ax_tokens) -> Routing:
    ax_tokens = nm.as_tensor(ax_tokens)
    if ax_tokens.shape[-1] != adapter.rank:
        raise ShapeError(f"gate input last dim {ax_tokens.shape[-1]} != rank {adapter.rank}")
    logits = nm.linear(ax_tokens, adapter.gate_weights)
    probs = nm.softmax(logits, axis=-1)
    idx = top_k_indices(probs.data, adapter.top_k)
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, idx, True, axis=-1)
    kept = probs * mask.astype(np.float64)
    weights = kept / kept.sum(axis=-1, keepdims=True)
    return Routing(probs, mask, weights, idx)


def load_balance_loss(gate_probs, selections) -> Tensor:
    """``m * sum_i f_i * P_i`` over all tokens.

    ``f_i`` is the fraction of routed token-slots that went to expert ``i``
    (non-differentiable), ``P_i`` the mean gate probability of expert ``i``.
    ``selections`` is a boolean (T, m) mask or a sequence of per-token index
    collections.
    """
    gate_probs = nm.as_tensor(gate_probs)
    m = gate_probs.shape[-1]
    probs = gate_probs.reshape(-1, m)
    if isinstance(selections, np.ndarray) and selections.dtype == bool:
        mask = selections
    else:
        mask = np.zeros(probs.shape, dtype=bool)
        for t, chosen in enumerate(selections):
            mask[t, list(chosen)] = True
    mask = mask.reshape(-1, m)
    if mask.shape[0] != probs.shape[0]:
        raise ShapeError("selections do not match the number of tokens")
    counts = mask.sum(axis=0).astype(np.float64)
    frac = counts / counts.sum()
    mean_prob = probs.mean(axis=0)
    return (mean_prob * frac).sum() * float(m)


# ---------------------------------------------------------------- L-MoE


def _lmoe(adapter: LmoeAdapter, W0, x, grid, b0=None):
    W0 = nm.as_tensor(W0)
    x = nm.as_tensor(x)
    if W0.shape != (adapter.B.shape[0], adapter.A.shape[1]):
        raise ShapeError(f"W0 {W0.shape} does not match adapter ({adapter.B.shape[0]}, {adapter.A.shape[1]})")
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    n, t, _ = x.shape
    if grid is None:
        raise ShapeError("L-MoE needs the patch grid shape")
    hp, wp = grid
    if t != hp * wp:
        raise ShapeError(f"{t} tokens do not form a {hp}x{wp} grid")

    ax = nm.linear(x, adapter.A)  # (N,T,r)
    routing = gate(adapter, ax)
    ax_grid = tokens_to_grid(ax, grid)
    outs = []
    for j, expert in enumerate(adapter.experts):
        if hp % expert.scale or wp % expert.scale:
            raise ShapeError(f"grid {grid} not divisible by expert {j} scale {expert.scale}")
        if not routing.mask[..., j].any():
            # unrouted expert contributes 0 * E_j exactly
            outs.append(Tensor(np.zeros((n, t, adapter.rank))))
            continue
        outs.append(grid_to_tokens(expert(ax_grid)))
    stacked = nm.stack(outs, axis=2)  # (N,T,m,r)
    w = routing.weights.reshape(n, t, 1, adapter.n_experts)
    mixed = nm.matmul(w, stacked).reshape(n, t, adapter.rank)
    bypass = nm.linear(mixed, adapter.B) * adapter.scaling
    out = nm.linear(x, W0, b0) + bypass
    aux = load_balance_loss(routing.probs, routing.mask)
    if single:
        out = out.reshape(t, out.shape[-1])
    return out, aux


def lmoe_forward(adapter: LmoeAdapter, W0, x_tokens, grid, b0=None) -> Tensor:
    """``W0 x + (alpha/r) B sum_i G_i(Ax) E_i(Ax)`` over a (T,k) or (N,T,k) token grid."""
    return _lmoe(adapter, W0, x_tokens, grid, b0)[0]


def lmoe_forward_with_aux(adapter: LmoeAdapter, W0, x_tokens, grid, b0=None):
    return _lmoe(adapter, W0, x_tokens, grid, b0)
