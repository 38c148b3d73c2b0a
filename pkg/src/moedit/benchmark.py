"""Synthetic lifelong-editing benchmark and its metrics.

The world is a grid of visual concepts x queried attributes. A concept
is a fixed feature block; an image of it is that block plus noise. A
prompt is two template tokens plus an attribute token, and the base
mapping (concept, attribute) -> answer token is what the model is
pretrained on. Text-only questions (empty image, off-domain prompt)
are part of the base mapping too.

An edit flips one (concept, attribute) cell to a new answer. Each edit
record carries companion samples to score it later:

  gen_text: the other phrasings of the same question (same image)
  gen_modal: fresh noise draws of the same concept (same phrasing)
  loc_modal: an untouched cell that must keep its base behavior
  loc_text: a text-only question that must keep its base behavior

Reliability/generality are teacher-forced token accuracy against the
edit target over all edits applied so far; the locality scores are
token agreement between the edited and the frozen model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import moedit.numerics as nm

from .editor import Editor
from .generator import fuse_experts
from .repository import ExpertRepository
from .surrogate import HiddenStates, Surrogate, SurrogateConfig, VisualInput


@dataclass(frozen=True)
class BenchmarkConfig:
    concepts: int = 20
    attributes: int = 12
    templates: int = 3
    off_templates: int = 2
    topics: int = 16
    answer_pool: int = 40
    noise: float = 0.08
    draws_per_template: int = 3
    n_eval_edits: int = 100
    n_train_edits: int = 80
    n_companions: int = 2

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "concepts", "attributes", "templates", "off_templates", "topics",
            "answer_pool", "noise", "draws_per_template", "n_eval_edits",
            "n_train_edits", "n_companions",
        )}


class TokenSpace:
    """Deterministic vocabulary layout for a benchmark/surrogate pair."""

    def __init__(self, bcfg: BenchmarkConfig, vocab: int):
        self.end = 0
        cursor = 1
        self.template_tokens = [(cursor + 2 * t, cursor + 2 * t + 1)
                                for t in range(bcfg.templates)]
        cursor += 2 * bcfg.templates
        self.off_template_tokens = [(cursor + 2 * t, cursor + 2 * t + 1)
                                    for t in range(bcfg.off_templates)]
        cursor += 2 * bcfg.off_templates
        self.attribute_tokens = list(range(cursor, cursor + bcfg.attributes))
        cursor += bcfg.attributes
        self.topic_tokens = list(range(cursor, cursor + bcfg.topics))
        cursor += bcfg.topics
        self.answer_tokens = list(range(cursor, cursor + bcfg.answer_pool))
        cursor += bcfg.answer_pool
        if cursor > vocab:
            raise ValueError(f"token space needs {cursor} ids, vocab is {vocab}")

    def prompt(self, template: int, attribute: int) -> tuple[int, int, int]:
        t0, t1 = self.template_tokens[template]
        return (t0, t1, self.attribute_tokens[attribute])

    def off_prompt(self, template: int, topic: int) -> tuple[int, int, int]:
        t0, t1 = self.off_template_tokens[template]
        return (t0, t1, self.topic_tokens[topic])


@dataclass(frozen=True)
class Sample:
    visual: VisualInput
    prompt: tuple[int, ...]
    output: tuple[int, ...]


@dataclass(frozen=True)
class EditRecord:
    timestep: int
    concept: int
    attribute: int
    edit: Sample
    gen_text: tuple[Sample, ...]
    gen_modal: tuple[Sample, ...]
    loc_modal: tuple[Sample, ...]
    loc_text: tuple[Sample, ...]


@dataclass
class Benchmark:
    config: BenchmarkConfig
    surrogate_config: SurrogateConfig
    pretrain_rows: list[tuple[VisualInput, tuple[int, ...], tuple[int, ...]]]
    train_records: list[EditRecord]
    eval_records: list[EditRecord]
    base_answer: np.ndarray  # (concepts, attributes) token ids
    topic_answer: np.ndarray  # (topics,) token ids
    concept_visual: np.ndarray  # (concepts, n_visual, visual_dim) noiseless bases

    def token_space(self) -> TokenSpace:
        """Rebuild the deterministic vocabulary layout for this world."""
        return TokenSpace(self.config, self.surrogate_config.vocab)


def _draw_image(base: np.ndarray, noise: float, rng) -> VisualInput:
    feats = base + noise * rng.normal(size=base.shape)
    return VisualInput(feats.astype(np.float32))


def generate_benchmark(bcfg: BenchmarkConfig, scfg: SurrogateConfig,
                       rng: np.random.Generator) -> Benchmark:
    space = TokenSpace(bcfg, scfg.vocab)
    n_pairs = bcfg.concepts * bcfg.attributes
    need = bcfg.n_eval_edits + bcfg.n_train_edits
    if n_pairs < need + bcfg.n_companions:
        raise ValueError(
            f"grid of {n_pairs} cells cannot host {need} edits plus locality pool"
        )

    concept_base = rng.normal(size=(bcfg.concepts, scfg.n_visual, scfg.visual_dim))
    base_answer = rng.choice(space.answer_tokens,
                             size=(bcfg.concepts, bcfg.attributes))
    topic_answer = rng.choice(space.answer_tokens, size=bcfg.topics)

    # base mapping rows: every cell under every phrasing, plus text-only rows
    pretrain_rows = []
    for c in range(bcfg.concepts):
        for a in range(bcfg.attributes):
            target = (int(base_answer[c, a]), space.end)
            for t in range(bcfg.templates):
                for _ in range(bcfg.draws_per_template):
                    pretrain_rows.append((
                        _draw_image(concept_base[c], bcfg.noise, rng),
                        space.prompt(t, a), target,
                    ))
    for topic in range(bcfg.topics):
        target = (int(topic_answer[topic]), space.end)
        for t in range(bcfg.off_templates):
            for _ in range(bcfg.draws_per_template):
                pretrain_rows.append((
                    VisualInput.empty(scfg), space.off_prompt(t, topic), target,
                ))

    # partition the grid: eval stream, train set, untouched locality pool
    order = rng.permutation(n_pairs)
    eval_pairs = order[: bcfg.n_eval_edits]
    train_pairs = order[bcfg.n_eval_edits : need]
    loc_pool = order[need:]

    def build_record(timestep: int, pair: int) -> EditRecord:
        c, a = divmod(int(pair), bcfg.attributes)
        template = int(rng.integers(bcfg.templates))
        base = int(base_answer[c, a])
        new_answer = base
        while new_answer == base:
            new_answer = int(rng.choice(space.answer_tokens))
        target = (new_answer,)
        edit_image = _draw_image(concept_base[c], bcfg.noise, rng)
        edit = Sample(edit_image, space.prompt(template, a), target)

        others = [t for t in range(bcfg.templates) if t != template]
        gen_text = tuple(
            Sample(edit_image, space.prompt(others[i % len(others)], a), target)
            for i in range(bcfg.n_companions)
        )
        gen_modal = tuple(
            Sample(_draw_image(concept_base[c], bcfg.noise, rng),
                   space.prompt(template, a), target)
            for _ in range(bcfg.n_companions)
        )
        loc_modal = []
        for _ in range(bcfg.n_companions):
            pick = int(loc_pool[rng.integers(len(loc_pool))])
            lc, la = divmod(pick, bcfg.attributes)
            loc_modal.append(Sample(
                _draw_image(concept_base[lc], bcfg.noise, rng),
                space.prompt(int(rng.integers(bcfg.templates)), la),
                (int(base_answer[lc, la]),),
            ))
        loc_text = []
        for _ in range(bcfg.n_companions):
            topic = int(rng.integers(bcfg.topics))
            loc_text.append(Sample(
                VisualInput.empty(scfg),
                space.off_prompt(int(rng.integers(bcfg.off_templates)), topic),
                (int(topic_answer[topic]),),
            ))
        return EditRecord(timestep, c, a, edit, gen_text, gen_modal,
                          tuple(loc_modal), tuple(loc_text))

    eval_records = [build_record(t, p) for t, p in enumerate(eval_pairs)]
    train_records = [build_record(t, p) for t, p in enumerate(train_pairs)]
    return Benchmark(bcfg, scfg, pretrain_rows, train_records, eval_records,
                     base_answer, topic_answer, concept_base)


# -- metrics -----------------------------------------------------------------


@dataclass
class Metrics:
    n_edits: int
    reliability: float | None
    gen_text: float | None
    gen_modal: float | None
    loc_text: float
    loc_modal: float

    def average(self) -> float | None:
        vals = [self.reliability, self.gen_text, self.gen_modal,
                self.loc_text, self.loc_modal]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    def to_dict(self) -> dict:
        return {
            "n_edits": self.n_edits,
            "reliability": self.reliability,
            "gen_text": self.gen_text,
            "gen_modal": self.gen_modal,
            "loc_text": self.loc_text,
            "loc_modal": self.loc_modal,
            "average": self.average(),
        }


def _batch(samples: list[Sample]):
    vis = np.stack([s.visual.feats for s in samples])
    prompts = np.stack([np.asarray(s.prompt, dtype=np.int64) for s in samples])
    outputs = np.stack([np.asarray(s.output, dtype=np.int64) for s in samples])
    return vis, prompts, outputs


def _edited_predictions(model: Surrogate, editor: Editor, repo: ExpertRepository,
                        samples: list[Sample], batch: int = 64
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced argmax of the edited and the frozen model.

    Samples whose hard routing comes up empty reuse the frozen logits
    outright; the rest are fused per sample.
    """
    edited = np.zeros((len(samples), len(samples[0].output)), dtype=np.int64)
    frozen = np.zeros_like(edited)
    for lo in range(0, len(samples), batch):
        chunk = samples[lo : lo + batch]
        vis, prompts, outputs = _batch(chunk)
        hs = model.embed(vis, prompts, outputs)
        mid = model.forward_to_layer(hs, model.cfg.edit_layer)
        logits = model.forward_from_layer(mid, model.cfg.edit_layer)
        base_pred = np.argmax(model.output_logits(logits, hs.spans).data, axis=-1)
        frozen[lo : lo + len(chunk)] = base_pred
        edited[lo : lo + len(chunk)] = base_pred
        if len(repo) == 0:
            continue
        routed, weights = editor.route_states(repo, mid)
        for b, (rs, w) in enumerate(zip(routed, weights)):
            if len(rs) == 0:
                continue
            sel = repo.selected(rs)
            u = nm.tensor(np.stack([e.expert.u for e in sel]))
            v = nm.tensor(np.stack([e.expert.v for e in sel]))
            fused = fuse_experts(editor.generator, mid.h[b : b + 1], u, v,
                                 nm.tensor(w[None, :]))
            sub = model.forward_from_layer(HiddenStates(fused, hs.spans),
                                           model.cfg.edit_layer)
            rows = model.output_logits(sub, hs.spans).data
            edited[lo + b] = np.argmax(rows, axis=-1)[0]
    return edited, frozen


def _accuracy(pred: np.ndarray, samples: list[Sample]) -> float:
    want = np.stack([np.asarray(s.output, dtype=np.int64) for s in samples])
    return float((pred == want).mean())


def _agreement(a: np.ndarray, b: np.ndarray) -> float:
    return float((a == b).mean())


def evaluate(model: Surrogate, editor: Editor, repo: ExpertRepository,
             records: list[EditRecord], batch: int = 64) -> Metrics:
    if not records:
        return Metrics(0, None, None, None, 1.0, 1.0)
    cats = {
        "edit": [r.edit for r in records],
        "gen_text": [s for r in records for s in r.gen_text],
        "gen_modal": [s for r in records for s in r.gen_modal],
        "loc_modal": [s for r in records for s in r.loc_modal],
        "loc_text": [s for r in records for s in r.loc_text],
    }
    out = {}
    for name, samples in cats.items():
        edited, frozen = _edited_predictions(model, editor, repo, samples, batch)
        if name.startswith("loc"):
            out[name] = _agreement(edited, frozen)
        else:
            out[name] = _accuracy(edited, samples)
    return Metrics(
        n_edits=len(records),
        reliability=out["edit"],
        gen_text=out["gen_text"],
        gen_modal=out["gen_modal"],
        loc_text=out["loc_text"],
        loc_modal=out["loc_modal"],
    )


def baseline_scores(model: Surrogate, records: list[EditRecord]) -> dict:
    """Frozen-model sanity check run before any editing.

    The frozen model should almost never emit the new targets and should
    still answer the untouched cells correctly.
    """
    edits = [r.edit for r in records]
    base = [s for r in records for s in r.loc_modal + r.loc_text]
    pred_edit, _ = _edited_predictions(model, None, _EMPTY, edits)
    pred_base, _ = _edited_predictions(model, None, _EMPTY, base)
    return {
        "edit_target_accuracy": _accuracy(pred_edit, edits),
        "base_accuracy": _accuracy(pred_base, base),
    }


class _EmptyRepo:
    def __len__(self):
        return 0


_EMPTY = _EmptyRepo()


@dataclass
class TrajectoryPoint:
    metrics: Metrics
    repository_size: int


def lifelong_run(model: Surrogate, editor: Editor, records: list[EditRecord],
                 eval_points: list[int], repo: ExpertRepository | None = None,
                 batch: int = 64) -> tuple[list[TrajectoryPoint], ExpertRepository]:
    """Apply the stream one edit at a time, scoring at the chosen points."""
    if repo is None:
        repo = editor.new_repository()
    points = []
    eval_at = set(eval_points)
    for t, record in enumerate(records, start=1):
        editor.apply_edit(model, repo,
                          record.edit.visual.feats,
                          np.asarray(record.edit.prompt, dtype=np.int64),
                          np.asarray(record.edit.output, dtype=np.int64),
                          timestep=record.timestep)
        if t in eval_at:
            m = evaluate(model, editor, repo, records[:t], batch)
            points.append(TrajectoryPoint(metrics=m, repository_size=len(repo)))
    return points, repo


# -- record files -------------------------------------------------------------


def _sample_to_dict(s: Sample) -> dict:
    return {
        "visual": None if s.visual.is_empty else s.visual.feats.tolist(),
        "prompt": list(s.prompt),
        "output": list(s.output),
    }


def _sample_from_dict(d: dict, scfg: SurrogateConfig) -> Sample:
    if d["visual"] is None:
        vis = VisualInput.empty(scfg)
    else:
        vis = VisualInput(np.asarray(d["visual"], dtype=np.float32))
    return Sample(vis, tuple(d["prompt"]), tuple(d["output"]))


def save_records(path: Path | str, records: list[EditRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({
                "timestep": r.timestep,
                "concept": r.concept,
                "attribute": r.attribute,
                "edit": _sample_to_dict(r.edit),
                "gen_text": [_sample_to_dict(s) for s in r.gen_text],
                "gen_modal": [_sample_to_dict(s) for s in r.gen_modal],
                "loc_modal": [_sample_to_dict(s) for s in r.loc_modal],
                "loc_text": [_sample_to_dict(s) for s in r.loc_text],
            }, sort_keys=True))
            fh.write("\n")


def load_records(path: Path | str, scfg: SurrogateConfig) -> list[EditRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            records.append(EditRecord(
                timestep=d["timestep"],
                concept=d["concept"],
                attribute=d["attribute"],
                edit=_sample_from_dict(d["edit"], scfg),
                gen_text=tuple(_sample_from_dict(s, scfg) for s in d["gen_text"]),
                gen_modal=tuple(_sample_from_dict(s, scfg) for s in d["gen_modal"]),
                loc_modal=tuple(_sample_from_dict(s, scfg) for s in d["loc_modal"]),
                loc_text=tuple(_sample_from_dict(s, scfg) for s in d["loc_text"]),
            ))
    return records
