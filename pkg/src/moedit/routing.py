"""Compact routing descriptors for stored edits and incoming queries.

Each side of the match is summarized by two vectors of width
k * module_dim: a visual one (what the edit/query looks at) and a
textual one (what it asks). The visual vector is produced in two
stages, prompt rows first, then visual rows, so the same image yields
different descriptors under different prompts. Two structurally
identical extractors exist: one fingerprints stored edits, the other
fingerprints incoming inputs; the input-end extractor also scores a
trainable sentinel block that acts as the accept/reject threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .generator import CrossAttention, _uniform
from .numerics import Tensor

PROMPT_CONDITIONED = "prompt_conditioned"
DIRECT_VISUAL = "direct_visual"  # ablation: stage one skipped, prompt ignored


@dataclass
class FeatureExtractor:
    """Seeds plus three cross-attention maps; feature width = k * module_dim."""

    phi: Tensor  # (1, k * module_dim) visual seed
    psi: Tensor  # (1, k * module_dim) textual seed
    ca_stage1: CrossAttention  # phi over prompt rows
    ca_stage2: CrossAttention  # stage-1 output over visual rows
    ca_text: CrossAttention  # psi over prompt rows
    visual_mode: str = PROMPT_CONDITIONED

    @classmethod
    def init(cls, rng, d: int, module_dim: int, k: int, d_attn: int, prefix: str,
             visual_mode: str = PROMPT_CONDITIONED) -> "FeatureExtractor":
        if visual_mode not in (PROMPT_CONDITIONED, DIRECT_VISUAL):
            raise ValueError(f"unknown visual_mode {visual_mode!r}")
        width = k * module_dim
        return cls(
            phi=Tensor(_uniform(rng, (1, width), width), True, f"{prefix}.phi"),
            psi=Tensor(_uniform(rng, (1, width), width), True, f"{prefix}.psi"),
            ca_stage1=CrossAttention.init(rng, width, d, d_attn, width, f"{prefix}.s1"),
            ca_stage2=CrossAttention.init(rng, width, d, d_attn, width, f"{prefix}.s2"),
            ca_text=CrossAttention.init(rng, width, d, d_attn, width, f"{prefix}.tx"),
            visual_mode=visual_mode,
        )

    @property
    def width(self) -> int:
        return self.phi.shape[1]

    def tensors(self, prefix: str) -> list[tuple[str, Tensor]]:
        named = [(f"{prefix}.phi", self.phi), (f"{prefix}.psi", self.psi)]
        for tag, ca in ((f"{prefix}.s1", self.ca_stage1),
                        (f"{prefix}.s2", self.ca_stage2),
                        (f"{prefix}.tx", self.ca_text)):
            named += [(f"{tag}.wq", ca.wq), (f"{tag}.wk", ca.wk), (f"{tag}.wv", ca.wv)]
        return named

    def extract(self, h_visual: Tensor, h_prompt: Tensor) -> tuple[Tensor, Tensor]:
        """h_visual: (batch, n_v, d), h_prompt: (batch, n_p, d) -> two (batch, width)."""
        if self.visual_mode == DIRECT_VISUAL:
            vis = self.ca_stage2(self.phi, h_visual)
        else:
            staged = self.ca_stage1(self.phi, h_prompt)  # (batch, 1, width)
            vis = self.ca_stage2(staged, h_visual)
        txt = self.ca_text(self.psi, h_prompt)
        b = h_prompt.shape[0]
        return (nm.reshape(vis, (b, self.width)), nm.reshape(txt, (b, self.width)))

    def sentinel_feature(self, theta: Tensor, h_prompt: Tensor) -> Tensor:
        """Visual feature with the sentinel block standing in for the image."""
        b = h_prompt.shape[0]
        n_rows, d = theta.shape
        theta_b = nm.reshape(theta, (1, n_rows, d))
        if self.visual_mode == DIRECT_VISUAL:
            vis = self.ca_stage2(self.phi, theta_b)
            # a rank-2 broadcast collapses; tile explicitly over the batch
            vis = nm.matmul(nm.tensor(np.ones((b, 1, 1), dtype=nm.default_dtype())),
                            vis)
        else:
            staged = self.ca_stage1(self.phi, h_prompt)
            vis = self.ca_stage2(staged, theta_b)
        return nm.reshape(vis, (b, self.width))


def init_sentinel(rng, n_visual: int, d: int) -> Tensor:
    return Tensor(_uniform(rng, (n_visual, d), d), True, "sentinel")


def similarity(a: Tensor, b: Tensor, divisor: float) -> Tensor:
    """Rowwise rescaled inner product; shapes broadcast elementwise."""
    return nm.scale(nm.sum_(nm.mul(a, b), axis=-1), 1.0 / divisor)


def similarity_matrix(a: Tensor, b: Tensor, divisor: float) -> Tensor:
    """(n, width) x (m, width) -> (n, m) rescaled inner products."""
    return nm.scale(nm.matmul(a, nm.swap_last2(b)), 1.0 / divisor)


def soft_weights(scores: Tensor, axis: int = -1) -> Tensor:
    """sigmoid(s) * softmax(s): entries in (0,1), summing below 1."""
    return nm.mul(nm.sigmoid(scores), nm.softmax(scores, axis=axis))


def default_divisor(module_dim: int) -> float:
    return math.sqrt(module_dim)
