"""Editor training: the loss stack and the optimization loop.

Each step draws a batch of B edit records; every record contributes an
edit sample, one generality companion, and one locality companion. The
batch's B generated experts are fused into every forward pass through
soft weights alone (no hard filter during training), so the routing
losses see gradients from the same experts the task losses use.

Task losses (batch means):
  rel  teacher-forced NLL of the edit answer under the edited model
  gen  the same on the generality companion
  loc  KL(frozen || edited) on the locality companion's answer span

Routing losses (batch sums):
  hr   two InfoNCE terms that pull a query toward its own edit and push
       unrelated queries toward a trainable sentinel
  sr1  binary logistic pair on scalar similarities
  sr2  InfoNCE over the textual features of the whole batch

The identity-swap trick: per sample a fair coin decides whether the
"generality" features on each end come from the edit sample itself or
from its companion, so the contrastive targets cannot latch onto pixel
identity. Coins and negative picks are drawn outside the loss function,
which keeps it a deterministic map from parameters to a scalar.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import moedit.numerics as nm

from .benchmark import Benchmark, EditRecord, Sample, TokenSpace, VisualInput
from .editor import Editor
from .generator import fuse_experts
from .numerics import AdamConfig, AdamState, RngHub, Tensor, adam_step
from .numerics.serialize import load_bundle, save_bundle
from .repository import FingerprintError
from .routing import similarity, similarity_matrix, soft_weights
from .surrogate import FrozenModelError, HiddenStates, Surrogate


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.0
    max_steps: int = 2000
    checkpoint_every: int = 500
    drop_sr1: bool = False
    drop_sr2: bool = False
    uniform_fusion: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "batch_size", "lr", "weight_decay", "max_steps",
            "checkpoint_every", "drop_sr1", "drop_sr2", "uniform_fusion",
        )}


@dataclass(frozen=True)
class TrainBatch:
    """Stacked arrays for the edit, generality and locality columns."""

    vis_e: np.ndarray
    prompt_e: np.ndarray
    out_e: np.ndarray
    vis_g: np.ndarray
    prompt_g: np.ndarray
    out_g: np.ndarray
    vis_l: np.ndarray
    prompt_l: np.ndarray
    out_l: np.ndarray

    @property
    def size(self) -> int:
        return self.vis_e.shape[0]


@dataclass(frozen=True)
class Mixing:
    """Frozen randomness for one step: coins and negative indices."""

    pi1: np.ndarray  # (B,) 0/1, edit-end swap
    pi2: np.ndarray  # (B,) 0/1, input-end swap
    neg_idx: np.ndarray  # (B,) into the 2B-row textual pool, never own row


@dataclass(frozen=True)
class LossTensors:
    rel: Tensor
    gen: Tensor
    loc: Tensor
    hr: Tensor
    sr1: Tensor
    sr2: Tensor
    total: Tensor

    def report(self) -> "LossReport":
        return LossReport(
            rel=self.rel.item(), gen=self.gen.item(), loc=self.loc.item(),
            hr=self.hr.item(), sr1=self.sr1.item(), sr2=self.sr2.item(),
            total=self.total.item(),
        )


@dataclass(frozen=True)
class LossReport:
    rel: float
    gen: float
    loc: float
    hr: float
    sr1: float
    sr2: float
    total: float


@dataclass(frozen=True)
class EditAugmenter:
    """Redraws each edit's target, phrasing, and image at sampling time.

    A small fixed train split is memorizable on every axis: the generator
    can learn to map the (concept, attribute) cell straight to the
    split's answer instead of reading the target out of the edit sample,
    and the feature extractors can latch onto the one stored phrasing
    and pixel draw instead of the cell's identity. Giving every draw a
    fresh answer, template, and image noise makes those shortcuts
    useless, which is what carries experts and routing over to cells the
    editor never trained on.
    """

    space: TokenSpace
    pool: tuple[int, ...]
    base_answer: np.ndarray  # (concepts, attributes) token ids
    concept_visual: np.ndarray  # (concepts, n_visual, visual_dim)
    noise: float
    templates: int

    @classmethod
    def for_benchmark(cls, bench: Benchmark) -> "EditAugmenter":
        space = bench.token_space()
        return cls(space=space,
                   pool=tuple(int(t) for t in space.answer_tokens),
                   base_answer=bench.base_answer,
                   concept_visual=bench.concept_visual,
                   noise=bench.config.noise,
                   templates=bench.config.templates)

    def _answer(self, record: EditRecord, rng: np.random.Generator) -> int:
        # never the pretrained answer: an edit must change behavior
        base_pos = self.pool.index(int(self.base_answer[record.concept,
                                                        record.attribute]))
        i = int(rng.integers(len(self.pool) - 1))
        return self.pool[i + 1 if i >= base_pos else i]

    def _image(self, record: EditRecord, rng: np.random.Generator) -> VisualInput:
        base = self.concept_visual[record.concept]
        feats = base + self.noise * rng.normal(size=base.shape)
        return VisualInput(feats.astype(np.float32))

    def draw(self, record: EditRecord, rng: np.random.Generator
             ) -> tuple[Sample, Sample]:
        """One fresh (edit, generality companion) pair for this cell."""
        target = (self._answer(record, rng),)
        t_e = int(rng.integers(self.templates))
        image = self._image(record, rng)
        edit = Sample(image, self.space.prompt(t_e, record.attribute), target)
        if self.templates > 1 and rng.integers(2):
            # text companion: same image, different phrasing
            t_g = int(rng.integers(self.templates - 1))
            t_g = t_g + 1 if t_g >= t_e else t_g
            gen = Sample(image, self.space.prompt(t_g, record.attribute), target)
        else:
            # modal companion: fresh render, same phrasing
            gen = Sample(self._image(record, rng),
                         self.space.prompt(t_e, record.attribute), target)
        return edit, gen


def sample_batch(records: list[EditRecord], rng: np.random.Generator,
                 batch_size: int,
                 augmenter: EditAugmenter | None = None) -> TrainBatch:
    """Draw B records with replacement plus one companion of each kind."""
    idx = rng.integers(len(records), size=batch_size)
    e, g, l = [], [], []
    for i in idx:
        rec = records[int(i)]
        loc_pool = rec.loc_modal + rec.loc_text
        if augmenter is not None:
            edit, gen = augmenter.draw(rec, rng)
        else:
            gen_pool = rec.gen_text + rec.gen_modal
            edit = rec.edit
            gen = gen_pool[int(rng.integers(len(gen_pool)))]
        e.append(edit)
        g.append(gen)
        l.append(loc_pool[int(rng.integers(len(loc_pool)))])

    def stack(samples):
        vis = np.stack([s.visual.feats for s in samples])
        prompts = np.stack([np.asarray(s.prompt, dtype=np.int64) for s in samples])
        outputs = np.stack([np.asarray(s.output, dtype=np.int64) for s in samples])
        return vis, prompts, outputs

    return TrainBatch(*stack(e), *stack(g), *stack(l))


def draw_mixing(rng: np.random.Generator, batch_size: int) -> Mixing:
    pi1 = rng.integers(0, 2, size=batch_size).astype(np.float64)
    pi2 = rng.integers(0, 2, size=batch_size).astype(np.float64)
    # uniform over the 2B-row pool minus the own edit-end row
    raw = rng.integers(0, 2 * batch_size - 1, size=batch_size)
    own = np.arange(batch_size)
    neg_idx = np.where(raw >= own, raw + 1, raw)
    return Mixing(pi1=pi1, pi2=pi2, neg_idx=neg_idx)


def infonce(anchor: Tensor, positive: int, candidates: Tensor,
            divisor: float) -> Tensor:
    """-log softmax_positive of scaled dot scores; reference form."""
    width = anchor.shape[-1]
    scores = similarity_matrix(anchor.reshape((1, width)), candidates, divisor)
    logp = nm.log_softmax(scores, axis=-1)
    return -nm.select_last(logp, np.array([positive])).sum()


def _mix(mask: np.ndarray, on: Tensor, off: Tensor) -> Tensor:
    """Rowwise select: mask 1 keeps `on`, mask 0 keeps `off`."""
    shape = (mask.shape[0],) + (1,) * (len(on.shape) - 1)
    m = nm.tensor(mask.reshape(shape))
    inv = nm.tensor(1.0 - mask.reshape(shape))
    return m * on + inv * off


def compute_losses(model: Surrogate, editor: Editor, batch: TrainBatch,
                   mix: Mixing, *, drop_sr1: bool = False,
                   drop_sr2: bool = False,
                   uniform_fusion: bool = False) -> LossTensors:
    """All losses for one batch as one connected graph.

    The surrogate must be frozen: its half of the forward pass then
    records no graph and the losses are functions of editor parameters
    only, given the batch and the mixing draws.
    """
    if not model.frozen:
        raise FrozenModelError("losses are defined against a frozen model")
    b = batch.size
    layer = model.cfg.edit_layer
    div = editor.cfg.sim_divisor

    hs_e = model.embed(batch.vis_e, batch.prompt_e, batch.out_e)
    hs_g = model.embed(batch.vis_g, batch.prompt_g, batch.out_g)
    hs_l = model.embed(batch.vis_l, batch.prompt_l, batch.out_l)
    if not (hs_e.spans == hs_g.spans == hs_l.spans):
        raise ValueError("edit/generality/locality spans must agree")
    spans = hs_e.spans
    mid_e = model.forward_to_layer(hs_e, layer)
    mid_g = model.forward_to_layer(hs_g, layer)
    mid_l = model.forward_to_layer(hs_l, layer)

    u_stack, v_stack = editor.generator.generate(mid_e.h)

    vis, prm = spans.visual, spans.prompt
    ee, ie = editor.edit_end, editor.input_end
    phi_hat_e, psi_hat_e = ee.extract(mid_e.h[:, vis], mid_e.h[:, prm])
    phi_hat_g0, psi_hat_g0 = ee.extract(mid_g.h[:, vis], mid_g.h[:, prm])
    phi_hat_l, psi_hat_l = ee.extract(mid_l.h[:, vis], mid_l.h[:, prm])
    phi_bar_e, psi_bar_e = ie.extract(mid_e.h[:, vis], mid_e.h[:, prm])
    phi_bar_g0, psi_bar_g0 = ie.extract(mid_g.h[:, vis], mid_g.h[:, prm])
    phi_bar_l, psi_bar_l = ie.extract(mid_l.h[:, vis], mid_l.h[:, prm])

    # identity swap on both ends
    phi_hat_g = _mix(mix.pi1, phi_hat_e, phi_hat_g0)
    psi_hat_g = _mix(mix.pi1, psi_hat_e, psi_hat_g0)
    phi_bar_g = _mix(mix.pi2, phi_bar_e, phi_bar_g0)
    psi_bar_g = _mix(mix.pi2, psi_bar_e, psi_bar_g0)

    # sentinel features against the swapped prompts and the locality prompts
    prompt_mix = _mix(mix.pi2, mid_e.h[:, prm], mid_g.h[:, prm])
    phi_sent_g = ie.sentinel_feature(editor.sentinel, prompt_mix)
    phi_sent_l = ie.sentinel_feature(editor.sentinel, mid_l.h[:, prm])

    # edited forwards fuse all B experts by soft weight alone
    def fused_logits(mid, query_psi):
        if uniform_fusion:
            w = nm.tensor(np.full((b, b), 1.0 / b))
        else:
            w = soft_weights(similarity_matrix(query_psi, psi_hat_e, div))
        fused = fuse_experts(editor.generator, mid.h, u_stack, v_stack, w)
        return model.forward_from_layer(HiddenStates(fused, spans), layer)

    logits_e = fused_logits(mid_e, psi_bar_e)
    logits_g = fused_logits(mid_g, psi_bar_g0)
    logits_l = fused_logits(mid_l, psi_bar_l)
    rel = -model.sequence_log_prob(logits_e, spans, batch.out_e).mean()
    gen = -model.sequence_log_prob(logits_g, spans, batch.out_g).mean()

    base_l = model.forward_from_layer(mid_l, layer)
    loc = nm.kl_divergence(model.output_logits(base_l, spans),
                           model.output_logits(logits_l, spans),
                           axis=-1).mean()

    # hard-routing InfoNCE: own edit beats the batch and the sentinel,
    # the sentinel beats the batch on locality queries
    own = np.arange(b)
    scores_g = nm.concat([
        similarity_matrix(phi_bar_g, phi_hat_g, div),
        similarity(phi_bar_g, phi_sent_g, div).reshape((b, 1)),
    ], axis=1)
    scores_l = nm.concat([
        similarity_matrix(phi_bar_l, phi_hat_g, div),
        similarity(phi_bar_l, phi_sent_l, div).reshape((b, 1)),
    ], axis=1)
    pick_own = nm.select_last(nm.log_softmax(scores_g, axis=-1), own)
    pick_sent = nm.select_last(nm.log_softmax(scores_l, axis=-1),
                               np.full(b, b, dtype=np.int64))
    hr = -(pick_own.sum() + pick_sent.sum())

    pool = nm.concat([psi_hat_g, psi_hat_l], axis=0)
    if drop_sr1:
        sr1 = nm.tensor(0.0)
    else:
        s_pos = similarity(psi_bar_g, psi_hat_g, div)
        s_neg = similarity(psi_bar_g, nm.gather_rows(pool, mix.neg_idx), div)
        sr1 = (nm.softplus(-s_pos) + nm.softplus(s_neg)).sum()
    if drop_sr2:
        sr2 = nm.tensor(0.0)
    else:
        scores_pool = similarity_matrix(psi_bar_g, pool, div)
        sr2 = -nm.select_last(nm.log_softmax(scores_pool, axis=-1),
                              own).sum()

    edit_loss = rel + gen + loc
    route_loss = hr + sr1 + sr2
    total = edit_loss + route_loss
    return LossTensors(rel=rel, gen=gen, loc=loc, hr=hr, sr1=sr1, sr2=sr2,
                       total=total)


# -- the loop -----------------------------------------------------------------

CSV_HEADER = ["step", "rel", "gen", "loc", "hr", "sr1", "sr2", "total"]


@dataclass
class TrainResult:
    steps_run: int
    final: LossReport


def _csv_row(step: int, rep: LossReport) -> list[str]:
    return [str(step)] + [f"{v:.10g}" for v in (
        rep.rel, rep.gen, rep.loc, rep.hr, rep.sr1, rep.sr2, rep.total)]


def save_checkpoint(path: Path | str, editor: Editor, state: AdamState,
                    step: int, hub: RngHub, cfg: TrainConfig) -> None:
    named = dict(editor.named_params())
    tensors = {f"editor.{k}": v.data for k, v in named.items()}
    names = sorted(named)
    for name, m, v in zip(names, state.m, state.v):
        tensors[f"adam.m.{name}"] = m
        tensors[f"adam.v.{name}"] = v
    meta = {
        "kind": "checkpoint",
        "step": step,
        "adam_step": state.step,
        "rng": hub.state(),
        "train_config": cfg.to_dict(),
        "editor_config": editor.cfg.to_dict(),
        "fingerprint": editor.fingerprint(),
    }
    save_bundle(path, meta, tensors)


def load_checkpoint(path: Path | str, editor: Editor
                    ) -> tuple[AdamState, int, RngHub, TrainConfig]:
    """Restore parameters in place; returns the rest of the loop state."""
    meta, tensors = load_bundle(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"not a checkpoint bundle: {path}")
    if meta["fingerprint"] != editor.fingerprint():
        raise FingerprintError(
            "checkpoint was written for a different editor shape")
    named = dict(editor.named_params())
    names = sorted(named)
    for name in names:
        got = tensors[f"editor.{name}"]
        if got.shape != named[name].data.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {got.shape}")
        named[name].data = got.astype(named[name].data.dtype)
    state = AdamState(
        m=[tensors[f"adam.m.{n}"].astype(named[n].data.dtype) for n in names],
        v=[tensors[f"adam.v.{n}"].astype(named[n].data.dtype) for n in names],
        step=int(meta["adam_step"]),
    )
    hub = RngHub(int(meta["rng"]["seed"]))
    hub.restore(meta["rng"])
    cfg = TrainConfig(**meta["train_config"])
    return state, int(meta["step"]), hub, cfg


def train_editor(model: Surrogate, editor: Editor, records: list[EditRecord],
                 cfg: TrainConfig, hub: RngHub,
                 csv_path: Path | str | None = None,
                 checkpoint_path: Path | str | None = None,
                 start_step: int = 0,
                 adam_state: AdamState | None = None,
                 augmenter: EditAugmenter | None = None) -> TrainResult:
    """Run the loop from `start_step` to `cfg.max_steps`.

    Loss rows go to `csv_path` (header written only when starting from
    step zero, so a resumed run appends seamlessly). Checkpoints land at
    `checkpoint_path` every `cfg.checkpoint_every` steps; together with
    the rng hub snapshot they make a resume replay the original run
    exactly.
    """
    if not records:
        raise ValueError("no edit records to train on")
    named = dict(editor.named_params())
    names = sorted(named)
    params = [named[n] for n in names]
    state = adam_state if adam_state is not None else AdamState.for_params(params)
    adam_cfg = AdamConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)

    writer = None
    fh = None
    if csv_path is not None:
        fh = open(csv_path, "a", newline="")
        writer = csv.writer(fh)
        if start_step == 0:
            writer.writerow(CSV_HEADER)

    report = None
    try:
        for step in range(start_step, cfg.max_steps):
            batch = sample_batch(records, hub.stream("batches"), cfg.batch_size,
                                 augmenter)
            mixing = draw_mixing(hub.stream("shuffle"), cfg.batch_size)
            losses = compute_losses(
                model, editor, batch, mixing,
                drop_sr1=cfg.drop_sr1, drop_sr2=cfg.drop_sr2,
                uniform_fusion=cfg.uniform_fusion,
            )
            report = losses.report()
            if not np.isfinite(report.total):
                raise nm.NumericalError(
                    f"training diverged at step {step}: total={report.total}")
            grads = nm.backward(losses.total)
            grad_list = [grads.get(p, np.zeros_like(p.data)) for p in params]
            adam_step(params, grad_list, state, adam_cfg)
            if writer is not None:
                writer.writerow(_csv_row(step, report))
                fh.flush()
            done = step + 1
            if checkpoint_path is not None and (
                    done % cfg.checkpoint_every == 0 or done == cfg.max_steps):
                save_checkpoint(checkpoint_path, editor, state, done, hub, cfg)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(steps_run=cfg.max_steps - start_step, final=report)
