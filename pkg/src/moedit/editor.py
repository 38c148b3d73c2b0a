"""The editing head: everything trainable that sits beside the frozen model.

Bundles the expert generator, the two feature extractors, and the
sentinel block. Applying an edit runs the frozen model to the
intercepted layer, compiles the hidden rows into an expert, and stores
it with its descriptors. The inference hook fingerprints each incoming
sample, hard-filters the repository against the sample's sentinel
score, and fuses the survivors into the hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .generator import ExpertGenerator, fuse_experts
from .numerics import Tensor
from .repository import ExpertRepository, RoutedSet, check_fingerprint, make_fingerprint
from .routing import (
    PROMPT_CONDITIONED,
    FeatureExtractor,
    default_divisor,
    init_sentinel,
    similarity_matrix,
    soft_weights,
)
from .surrogate import HiddenStates, Spans, Surrogate


SOFT_FUSION = "soft"
UNIFORM_FUSION = "uniform"


@dataclass(frozen=True)
class EditorConfig:
    rank: int = 4
    module_dim: int = 64
    k: int = 4
    attn_dim: int | None = None  # defaults to module_dim
    visual_mode: str = PROMPT_CONDITIONED
    divisor: float | None = None  # defaults to sqrt(module_dim)
    fusion: str = SOFT_FUSION  # uniform = plain average of routed experts

    def __post_init__(self):
        if self.fusion not in (SOFT_FUSION, UNIFORM_FUSION):
            raise ValueError(f"fusion must be soft or uniform, got {self.fusion!r}")

    @property
    def d_attn(self) -> int:
        return self.attn_dim if self.attn_dim is not None else self.module_dim

    @property
    def sim_divisor(self) -> float:
        return self.divisor if self.divisor is not None else default_divisor(self.module_dim)

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "module_dim": self.module_dim,
            "k": self.k,
            "attn_dim": self.attn_dim,
            "visual_mode": self.visual_mode,
            "divisor": self.divisor,
            "fusion": self.fusion,
        }


class Editor:
    def __init__(self, cfg: EditorConfig, generator: ExpertGenerator,
                 edit_end: FeatureExtractor, input_end: FeatureExtractor,
                 sentinel: Tensor, n_visual: int, d: int):
        self.cfg = cfg
        self.generator = generator
        self.edit_end = edit_end
        self.input_end = input_end
        self.sentinel = sentinel
        self.n_visual = n_visual
        self.d = d

    @classmethod
    def init(cls, cfg: EditorConfig, surrogate_cfg, rng: np.random.Generator) -> "Editor":
        d = surrogate_cfg.width
        return cls(
            cfg=cfg,
            generator=ExpertGenerator.init(rng, d, cfg.module_dim, cfg.rank, cfg.d_attn),
            edit_end=FeatureExtractor.init(rng, d, cfg.module_dim, cfg.k, cfg.d_attn,
                                           "edit_end", cfg.visual_mode),
            input_end=FeatureExtractor.init(rng, d, cfg.module_dim, cfg.k, cfg.d_attn,
                                            "input_end", cfg.visual_mode),
            sentinel=init_sentinel(rng, surrogate_cfg.n_visual, d),
            n_visual=surrogate_cfg.n_visual,
            d=d,
        )

    def named_params(self) -> list[tuple[str, Tensor]]:
        named = self.generator.tensors()
        named += self.edit_end.tensors("edit_end")
        named += self.input_end.tensors("input_end")
        named.append(("sentinel", self.sentinel))
        return named

    def trainable(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.trainable())

    def fingerprint(self) -> dict:
        return make_fingerprint(self.cfg.rank, self.cfg.module_dim, self.cfg.k,
                                self.n_visual, self.d)

    def new_repository(self) -> ExpertRepository:
        return ExpertRepository(self.fingerprint())

    # -- applying an edit ------------------------------------------------

    def compile_edit(self, model: Surrogate, visual: np.ndarray,
                     prompt: np.ndarray, output: np.ndarray):
        """Hidden rows of one edit -> (U, V, visual feature, textual feature)."""
        hs = model.embed(visual[None], prompt[None], output[None])
        mid = model.forward_to_layer(hs, model.cfg.edit_layer)
        u, v = self.generator.generate(mid.h)
        fv, ft = self.edit_end.extract(mid.h[:, mid.spans.visual, :],
                                       mid.h[:, mid.spans.prompt, :])
        return u.data[0], v.data[0], fv.data[0], ft.data[0]

    def apply_edit(self, model: Surrogate, repo: ExpertRepository, visual: np.ndarray,
                   prompt: np.ndarray, output: np.ndarray, timestep: int) -> int:
        check_fingerprint(self.fingerprint(), repo.fingerprint, "apply_edit")
        u, v, fv, ft = self.compile_edit(model, visual, prompt, output)
        return repo.insert(u, v, fv, ft, timestep=timestep)

    # -- the inference hook ------------------------------------------------

    def route_states(self, repo: ExpertRepository, hs: HiddenStates
                     ) -> tuple[list[RoutedSet], list[np.ndarray]]:
        """Per-sample hard routing plus fusion weights for a hidden batch."""
        h_v = hs.h[:, hs.spans.visual, :]
        h_p = hs.h[:, hs.spans.prompt, :]
        fv, ft = self.input_end.extract(h_v, h_p)
        sent = self.input_end.sentinel_feature(self.sentinel, h_p)
        div = self.cfg.sim_divisor
        routed, weights = [], []
        for b in range(hs.h.shape[0]):
            rs = repo.hard_route(fv.data[b], sent.data[b], div)
            routed.append(rs)
            if self.cfg.fusion == SOFT_FUSION:
                weights.append(repo.soft_route_weights(rs, ft.data[b], div))
            elif len(rs):
                weights.append(np.full(len(rs), 1.0 / len(rs), dtype=np.float32))
            else:
                weights.append(np.zeros(0, dtype=np.float32))
        return routed, weights

    def make_hook(self, repo: ExpertRepository):
        """Hook for Surrogate.forward_edited; exact no-op on empty routing."""
        check_fingerprint(self.fingerprint(), repo.fingerprint, "make_hook")

        def hook(hs: HiddenStates) -> HiddenStates:
            if len(repo) == 0:
                return hs
            routed, weights = self.route_states(repo, hs)
            if all(len(rs) == 0 for rs in routed):
                return hs
            rows = []
            for b, (rs, w) in enumerate(zip(routed, weights)):
                h_b = hs.h[b : b + 1]
                if len(rs) == 0:
                    rows.append(h_b)
                    continue
                sel = repo.selected(rs)
                u = nm.tensor(np.stack([e.expert.u for e in sel]))
                v = nm.tensor(np.stack([e.expert.v for e in sel]))
                rows.append(fuse_experts(self.generator, h_b, u, v,
                                         nm.tensor(w[None, :])))
            return HiddenStates(nm.concat(rows, axis=0), hs.spans)

        return hook

    # -- training-time fusion ---------------------------------------------

    def fuse_all(self, h: Tensor, u_stack: Tensor, v_stack: Tensor,
                 query_textual: Tensor, expert_textual: Tensor) -> Tensor:
        """Soft-route a batch over a shared expert stack (no hard filter).

        query_textual: (batch, width) of the forwarded samples;
        expert_textual: (n_experts, width) of the stacked experts.
        """
        scores = similarity_matrix(query_textual, expert_textual, self.cfg.sim_divisor)
        return fuse_experts(self.generator, h, u_stack, v_stack, soft_weights(scores))

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "kind": "editor",
            "config": self.cfg.to_dict(),
            "fingerprint": self.fingerprint(),
        }
        nm.save_bundle(path, meta, {k: t.data for k, t in self.named_params()})

    @classmethod
    def load(cls, path, surrogate_cfg) -> "Editor":
        meta, tensors = nm.load_bundle(path)
        if meta.get("kind") != "editor":
            raise nm.SerializationError(f"bundle at {path} is not an editor")
        cfg = EditorConfig(**meta["config"])
        editor = cls.init(cfg, surrogate_cfg, np.random.default_rng(0))
        check_fingerprint(editor.fingerprint(), meta["fingerprint"], str(path))
        for name, t in editor.named_params():
            if name not in tensors:
                raise nm.SerializationError(f"editor bundle missing tensor {name}")
            if tensors[name].shape != t.data.shape:
                raise nm.SerializationError(
                    f"editor tensor {name}: shape {tensors[name].shape} != {t.data.shape}"
                )
            t.data = tensors[name].astype(nm.default_dtype())
        return editor
