"""A small frozen vision-language transformer that can be edited in place.

Decoder-only, pre-norm, causal over the whole sequence. An input is a
fixed-width block of visual feature rows (projected into the model
width), a token prompt, and a token answer span. `forward_edited` runs
the same computation but hands the hidden states at one chosen layer to
a hook, which may return adjusted states; everything downstream of that
layer then sees the adjustment. The model itself is pretrained once on
a base mapping and frozen before any editing happens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor

NEG_INF = -1e9  # finite mask value; exact zero after softmax underflow


class FrozenModelError(RuntimeError):
    """Raised when something tries to update a frozen model."""


@dataclass(frozen=True)
class SurrogateConfig:
    width: int = 64
    layers: int = 6
    heads: int = 4
    vocab: int = 128
    n_visual: int = 8
    visual_dim: int = 16
    max_seq: int = 32
    edit_layer: int = 4
    end_token: int = 0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if not 0 < self.edit_layer <= self.layers:
            raise ValueError(
                f"edit_layer must be in [1, {self.layers}], got {self.edit_layer}"
            )

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "layers": self.layers,
            "heads": self.heads,
            "vocab": self.vocab,
            "n_visual": self.n_visual,
            "visual_dim": self.visual_dim,
            "max_seq": self.max_seq,
            "edit_layer": self.edit_layer,
            "end_token": self.end_token,
        }


@dataclass(frozen=True)
class VisualInput:
    """A fixed block of feature rows; empty inputs are all-zero rows."""

    feats: np.ndarray  # (n_visual, visual_dim) float32
    is_empty: bool = False

    @classmethod
    def empty(cls, cfg: SurrogateConfig) -> "VisualInput":
        return cls(
            feats=np.zeros((cfg.n_visual, cfg.visual_dim), dtype=np.float32),
            is_empty=True,
        )

    def __post_init__(self):
        if self.is_empty and np.any(self.feats):
            raise ValueError("empty visual input must carry all-zero features")


@dataclass(frozen=True)
class Spans:
    """Index ranges of the three segments inside a packed sequence."""

    n_visual: int
    n_prompt: int
    n_output: int

    @property
    def total(self) -> int:
        return self.n_visual + self.n_prompt + self.n_output

    @property
    def visual(self) -> slice:
        return slice(0, self.n_visual)

    @property
    def prompt(self) -> slice:
        return slice(self.n_visual, self.n_visual + self.n_prompt)

    @property
    def output(self) -> slice:
        return slice(self.n_visual + self.n_prompt, self.total)


@dataclass
class HiddenStates:
    h: Tensor  # (batch, seq, width)
    spans: Spans


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(nm.default_dtype())


def init_params(cfg: SurrogateConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    d = cfg.width
    p: dict[str, Tensor] = {}

    def add(name, arr):
        p[name] = Tensor(arr, requires_grad=True, name=name)

    add("wte", _uniform(rng, (cfg.vocab, d), d))
    add("wpe", _uniform(rng, (cfg.max_seq, d), d))
    add("vis_proj", _uniform(rng, (cfg.visual_dim, d), cfg.visual_dim))
    add("vis_bias", np.zeros(d, dtype=nm.default_dtype()))
    for i in range(cfg.layers):
        add(f"blk{i}.ln1.g", np.ones(d, dtype=nm.default_dtype()))
        add(f"blk{i}.ln1.b", np.zeros(d, dtype=nm.default_dtype()))
        add(f"blk{i}.attn.wq", _uniform(rng, (d, d), d))
        add(f"blk{i}.attn.wk", _uniform(rng, (d, d), d))
        add(f"blk{i}.attn.wv", _uniform(rng, (d, d), d))
        add(f"blk{i}.attn.wo", _uniform(rng, (d, d), d))
        add(f"blk{i}.ln2.g", np.ones(d, dtype=nm.default_dtype()))
        add(f"blk{i}.ln2.b", np.zeros(d, dtype=nm.default_dtype()))
        add(f"blk{i}.mlp.w1", _uniform(rng, (d, 4 * d), d))
        add(f"blk{i}.mlp.b1", np.zeros(4 * d, dtype=nm.default_dtype()))
        add(f"blk{i}.mlp.w2", _uniform(rng, (4 * d, d), 4 * d))
        add(f"blk{i}.mlp.b2", np.zeros(d, dtype=nm.default_dtype()))
    add("ln_f.g", np.ones(d, dtype=nm.default_dtype()))
    add("ln_f.b", np.zeros(d, dtype=nm.default_dtype()))
    add("head", _uniform(rng, (d, cfg.vocab), d))
    return p


class Surrogate:
    """The editable model: parameters plus the forward plumbing."""

    def __init__(self, cfg: SurrogateConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.frozen = False
        self._masks: dict[int, np.ndarray] = {}

    @classmethod
    def init(cls, cfg: SurrogateConfig, rng: np.random.Generator) -> "Surrogate":
        return cls(cfg, init_params(cfg, rng))

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False

    def trainable(self) -> list[Tensor]:
        if self.frozen:
            raise FrozenModelError("model is frozen; its weights cannot be updated")
        return [self.params[k] for k in sorted(self.params)]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _mask(self, n: int) -> np.ndarray:
        cached = self._masks.get(n)
        if cached is None or cached.dtype != nm.default_dtype():
            m = np.triu(np.full((n, n), NEG_INF, dtype=nm.default_dtype()), k=1)
            self._masks[n] = cached = m
        return cached

    # -- embedding -----------------------------------------------------

    def embed(
        self,
        visual: np.ndarray,
        prompts: np.ndarray,
        outputs: np.ndarray,
    ) -> HiddenStates:
        """Pack (visual rows | prompt tokens | output tokens) and embed.

        visual: (batch, n_visual, visual_dim); prompts/outputs: int
        (batch, n) with uniform lengths across the batch.
        """
        cfg = self.cfg
        if visual.ndim != 3 or visual.shape[1] != cfg.n_visual:
            raise nm.ShapeError(
                f"visual must be (batch, {cfg.n_visual}, {cfg.visual_dim}), "
                f"got {visual.shape}"
            )
        spans = Spans(cfg.n_visual, prompts.shape[1], outputs.shape[1])
        if spans.total > cfg.max_seq:
            raise nm.ShapeError(f"sequence {spans.total} exceeds max_seq {cfg.max_seq}")
        p = self.params
        vis = nm.tensor(visual.astype(nm.default_dtype()))
        v_rows = nm.add(nm.matmul(vis, p["vis_proj"]), p["vis_bias"])
        tok = nm.gather_rows(p["wte"], np.concatenate([prompts, outputs], axis=1))
        x = nm.concat([v_rows, tok], axis=1)
        pos = nm.gather_rows(p["wpe"], np.arange(spans.total))
        return HiddenStates(nm.add(x, pos), spans)

    # -- transformer stack ----------------------------------------------

    def _block(self, x: Tensor, i: int) -> Tensor:
        p = self.params
        cfg = self.cfg
        b, n, d = x.shape
        hd = d // cfg.heads
        h = nm.layer_norm(x, p[f"blk{i}.ln1.g"], p[f"blk{i}.ln1.b"])

        def heads(t):
            return nm.transpose(nm.reshape(t, (b, n, cfg.heads, hd)), (0, 2, 1, 3))

        q = heads(nm.matmul(h, p[f"blk{i}.attn.wq"]))
        k = heads(nm.matmul(h, p[f"blk{i}.attn.wk"]))
        v = heads(nm.matmul(h, p[f"blk{i}.attn.wv"]))
        scores = nm.scale(nm.matmul(q, nm.swap_last2(k)), 1.0 / math.sqrt(hd))
        att = nm.softmax(nm.add(scores, nm.tensor(self._mask(n))), axis=-1)
        mix = nm.reshape(nm.transpose(nm.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
        x = nm.add(x, nm.matmul(mix, p[f"blk{i}.attn.wo"]))

        h2 = nm.layer_norm(x, p[f"blk{i}.ln2.g"], p[f"blk{i}.ln2.b"])
        inner = nm.relu(nm.add(nm.matmul(h2, p[f"blk{i}.mlp.w1"]), p[f"blk{i}.mlp.b1"]))
        return nm.add(x, nm.add(nm.matmul(inner, p[f"blk{i}.mlp.w2"]), p[f"blk{i}.mlp.b2"]))

    def forward_to_layer(self, hs: HiddenStates, layer: int) -> HiddenStates:
        x = hs.h
        for i in range(layer):
            x = self._block(x, i)
        return HiddenStates(x, hs.spans)

    def forward_from_layer(self, hs: HiddenStates, layer: int) -> Tensor:
        x = hs.h
        for i in range(layer, self.cfg.layers):
            x = self._block(x, i)
        x = nm.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        return nm.matmul(x, self.params["head"])

    def forward(self, visual, prompts, outputs) -> tuple[Tensor, Spans]:
        hs = self.embed(visual, prompts, outputs)
        logits = self.forward_from_layer(hs, 0)
        return logits, hs.spans

    def forward_edited(self, visual, prompts, outputs, hook) -> tuple[Tensor, Spans]:
        """Run with hidden states at `edit_layer` passed through `hook`."""
        hs = self.embed(visual, prompts, outputs)
        mid = self.forward_to_layer(hs, self.cfg.edit_layer)
        adjusted = hook(mid)
        if adjusted.h.shape != mid.h.shape:
            raise nm.ShapeError(
                f"hook changed hidden shape {mid.h.shape} -> {adjusted.h.shape}"
            )
        logits = self.forward_from_layer(adjusted, self.cfg.edit_layer)
        return logits, hs.spans

    # -- read-outs -------------------------------------------------------

    def output_logits(self, logits: Tensor, spans: Spans) -> Tensor:
        """Rows that predict the output tokens (shifted one left)."""
        start = spans.n_visual + spans.n_prompt
        return logits[:, start - 1 : spans.total - 1, :]

    def sequence_log_prob(self, logits: Tensor, spans: Spans, outputs: np.ndarray) -> Tensor:
        """Sum of teacher-forced log-probs of the output span, per sample."""
        rows = nm.log_softmax(self.output_logits(logits, spans), axis=-1)
        return nm.sum_(nm.select_last(rows, outputs), axis=-1)

    def greedy_decode(self, visual: np.ndarray, prompt: np.ndarray, max_new: int,
                      hook=None) -> list[int]:
        """Argmax decoding for one sample until end_token or max_new."""
        out: list[int] = []
        for _ in range(max_new):
            o = np.array([out], dtype=np.int64)
            if hook is None:
                logits, _ = self.forward(visual[None], prompt[None], o)
            else:
                logits, _ = self.forward_edited(visual[None], prompt[None], o, hook)
            nxt = int(np.argmax(logits.data[0, -1]))
            out.append(nxt)
            if nxt == self.cfg.end_token:
                break
        return out

    # -- persistence -----------------------------------------------------

    def save(self, path) -> None:
        meta = {"kind": "surrogate", "config": self.cfg.to_dict(), "frozen": self.frozen}
        nm.save_bundle(path, meta, {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "Surrogate":
        meta, tensors = nm.load_bundle(path)
        if meta.get("kind") != "surrogate":
            raise nm.SerializationError(f"bundle at {path} is not a surrogate")
        cfg = SurrogateConfig(**meta["config"])
        params = {k: Tensor(v, name=k) for k, v in tensors.items()}
        model = cls(cfg, params)
        if meta.get("frozen"):
            model.freeze()
        else:
            for p in params.values():
                p.requires_grad = True
        return model


@dataclass
class PretrainResult:
    steps: int
    token_accuracy: float
    losses: list[float] = field(default_factory=list)


def _batch_arrays(rows, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    vis = np.stack([rows[i][0].feats for i in idx])
    prompts = np.stack([np.asarray(rows[i][1], dtype=np.int64) for i in idx])
    outputs = np.stack([np.asarray(rows[i][2], dtype=np.int64) for i in idx])
    return vis, prompts, outputs


def token_accuracy(model: Surrogate, rows, batch: int = 256) -> float:
    """Teacher-forced argmax accuracy over output spans."""
    hits = total = 0
    for lo in range(0, len(rows), batch):
        idx = range(lo, min(lo + batch, len(rows)))
        vis, prompts, outputs = _batch_arrays(rows, idx)
        logits, spans = model.forward(vis, prompts, outputs)
        pred = np.argmax(model.output_logits(logits, spans).data, axis=-1)
        hits += int((pred == outputs).sum())
        total += outputs.size
    return hits / max(total, 1)


def pretrain(
    model: Surrogate,
    rows: list,
    rng: np.random.Generator,
    lr: float = 3e-3,
    batch_size: int = 64,
    max_steps: int = 6000,
    target_accuracy: float = 0.995,
    check_every: int = 200,
) -> PretrainResult:
    """Fit the base mapping, then freeze. rows: (VisualInput, prompt, output)."""
    if model.frozen:
        raise FrozenModelError("cannot pretrain a frozen model")
    params = model.trainable()
    state = nm.AdamState.for_params(params)
    cfg = nm.AdamConfig(lr=lr)
    losses: list[float] = []
    acc = 0.0
    step = 0
    while step < max_steps:
        step += 1
        idx = rng.integers(0, len(rows), size=batch_size)
        vis, prompts, outputs = _batch_arrays(rows, idx)
        logits, spans = model.forward(vis, prompts, outputs)
        loss = nm.cross_entropy(model.output_logits(logits, spans), outputs)
        grads = nm.backward(loss)
        nm.adam_step(params, [grads[p] for p in params], state, cfg)
        losses.append(loss.item())
        if step % check_every == 0:
            acc = token_accuracy(model, rows)
            if acc >= target_accuracy:
                break
    if step % check_every:
        acc = token_accuracy(model, rows)
    model.freeze()
    return PretrainResult(steps=step, token_accuracy=acc, losses=losses)
