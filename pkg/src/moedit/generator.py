"""Turning one edit's hidden states into a low-rank expert.

A trainable seed matrix cross-attends over the concatenated hidden rows
of (visual block | prompt | answer) at the intercepted layer, producing
the two factors (U_e, V_e) of a rank-r adapter. Applying an expert adds
relu(h U_e^T) V_e as a residual; several experts fuse as a weighted sum
of those residuals. The value map producing V_e starts at zero, so an
untrained generator emits experts whose residual is exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(nm.default_dtype())


@dataclass
class CrossAttention:
    """Single-head cross attention: softmax(x Wq (y Wk)^T / sqrt(d_a)) y Wv."""

    wq: Tensor
    wk: Tensor
    wv: Tensor

    @classmethod
    def init(cls, rng, d_query: int, d_key: int, d_attn: int, d_out: int,
             prefix: str, zero_value: bool = False) -> "CrossAttention":
        wv = (np.zeros((d_key, d_out), dtype=nm.default_dtype()) if zero_value
              else _uniform(rng, (d_key, d_out), d_key))
        return cls(
            wq=Tensor(_uniform(rng, (d_query, d_attn), d_query), True, f"{prefix}.wq"),
            wk=Tensor(_uniform(rng, (d_key, d_attn), d_key), True, f"{prefix}.wk"),
            wv=Tensor(wv, True, f"{prefix}.wv"),
        )

    def __call__(self, x: Tensor, y: Tensor) -> Tensor:
        """x: (m, d_query) shared query rows; y: (batch, n, d_key) keys/values."""
        d_attn = self.wq.shape[1]
        scores = nm.matmul(nm.matmul(x, self.wq), nm.swap_last2(nm.matmul(y, self.wk)))
        att = nm.softmax(nm.scale(scores, 1.0 / math.sqrt(d_attn)), axis=-1)
        return nm.matmul(att, nm.matmul(y, self.wv))

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv]


@dataclass
class ExpertGenerator:
    """Seed factors plus the two cross-attention maps that condition them."""

    u_seed: Tensor  # (rank, module_dim)
    v_seed: Tensor
    ca_u: CrossAttention
    ca_v: CrossAttention
    p_dn: Tensor | None  # (d, module_dim), None when d == module_dim
    p_up: Tensor | None  # (module_dim, d)

    @classmethod
    def init(cls, rng, d: int, module_dim: int, rank: int, d_attn: int) -> "ExpertGenerator":
        if d == module_dim:
            p_dn = p_up = None
        else:
            # rectangular partial identity; trained along with the rest
            p_dn = Tensor(np.eye(d, module_dim, dtype=nm.default_dtype()), True, "gen.p_dn")
            p_up = Tensor(np.eye(module_dim, d, dtype=nm.default_dtype()), True, "gen.p_up")
        return cls(
            u_seed=Tensor(_uniform(rng, (rank, module_dim), module_dim), True, "gen.u_seed"),
            v_seed=Tensor(_uniform(rng, (rank, module_dim), module_dim), True, "gen.v_seed"),
            ca_u=CrossAttention.init(rng, module_dim, d, d_attn, module_dim, "gen.ca_u"),
            # zero value map -> untrained experts have V_e = 0 (no residual)
            ca_v=CrossAttention.init(rng, module_dim, d, d_attn, module_dim, "gen.ca_v",
                                     zero_value=True),
            p_dn=p_dn,
            p_up=p_up,
        )

    @property
    def rank(self) -> int:
        return self.u_seed.shape[0]

    @property
    def module_dim(self) -> int:
        return self.u_seed.shape[1]

    def tensors(self) -> list[tuple[str, Tensor]]:
        named = [("gen.u_seed", self.u_seed), ("gen.v_seed", self.v_seed)]
        for tag, ca in (("gen.ca_u", self.ca_u), ("gen.ca_v", self.ca_v)):
            named += [(f"{tag}.wq", ca.wq), (f"{tag}.wk", ca.wk), (f"{tag}.wv", ca.wv)]
        if self.p_dn is not None:
            named += [("gen.p_dn", self.p_dn), ("gen.p_up", self.p_up)]
        return named

    def generate(self, h_rows: Tensor) -> tuple[Tensor, Tensor]:
        """h_rows: (batch, n, d) hidden rows of one edit each -> (U, V) factors.

        Returns (batch, rank, module_dim) pairs.
        """
        return self.ca_u(self.u_seed, h_rows), self.ca_v(self.v_seed, h_rows)


def _repeat_matrix(n_experts: int, rank: int, dtype) -> np.ndarray:
    """Constant 0/1 map expanding per-expert weights to per-row weights."""
    rep = np.zeros((n_experts, n_experts * rank), dtype=dtype)
    for e in range(n_experts):
        rep[e, e * rank : (e + 1) * rank] = 1.0
    return rep


def fuse_experts(
    gen: ExpertGenerator,
    h: Tensor,
    u_stack: Tensor,
    v_stack: Tensor,
    weights: Tensor,
) -> Tensor:
    """h + sum_e w_e relu(h U_e^T) V_e, stacked as one matmul chain.

    h: (batch, n, d); u_stack/v_stack: (n_experts, rank, module_dim);
    weights: (batch, n_experts). The expert sum is expressed through a
    block layout: weights repeat r times per expert, so the single
    product over (n_experts * rank) columns equals the per-expert sum.
    """
    n_experts, rank, module_dim = u_stack.shape
    u_all = nm.reshape(u_stack, (n_experts * rank, module_dim))
    v_all = nm.reshape(v_stack, (n_experts * rank, module_dim))
    low = h if gen.p_dn is None else nm.matmul(h, gen.p_dn)
    act = nm.relu(nm.matmul(low, nm.swap_last2(u_all)))  # (batch, n, E*r)
    rep = nm.tensor(_repeat_matrix(n_experts, rank, nm.default_dtype()))
    w_rows = nm.matmul(weights, rep)  # (batch, E*r)
    b = weights.shape[0]
    weighted = nm.mul(act, nm.reshape(w_rows, (b, 1, n_experts * rank)))
    res = nm.matmul(weighted, v_all)  # (batch, n, module_dim)
    if gen.p_up is not None:
        res = nm.matmul(res, gen.p_up)
    return nm.add(h, res)


def apply_expert(gen: ExpertGenerator, h: Tensor, u: Tensor, v: Tensor) -> Tensor:
    """Apply a single expert at weight 1; h: (batch, n, d), u/v: (rank, module_dim)."""
    rank, module_dim = u.shape
    ones = nm.tensor(np.ones((h.shape[0], 1), dtype=nm.default_dtype()))
    return fuse_experts(gen, h, nm.reshape(u, (1, rank, module_dim)),
                        nm.reshape(v, (1, rank, module_dim)), ones)
