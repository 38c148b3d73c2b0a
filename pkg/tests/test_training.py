"""Loss stack, mixing, and the optimization loop."""

import numpy as np
import pytest

import moedit.numerics as nm
from moedit.benchmark import BenchmarkConfig, generate_benchmark
from moedit.editor import Editor, EditorConfig
from moedit.numerics import NumericalError, RngHub, grad_check
from moedit.surrogate import FrozenModelError, Surrogate, SurrogateConfig
from moedit.training import (
    CSV_HEADER,
    AnswerResampler,
    Mixing,
    TrainConfig,
    compute_losses,
    draw_mixing,
    infonce,
    load_checkpoint,
    sample_batch,
    train_editor,
)

SCFG = SurrogateConfig(width=24, layers=2, heads=2, vocab=64, n_visual=4,
                       visual_dim=6, max_seq=12, edit_layer=1)
BCFG = BenchmarkConfig(concepts=4, attributes=3, templates=2, off_templates=2,
                       topics=3, answer_pool=10, draws_per_template=1,
                       n_eval_edits=5, n_train_edits=4, n_companions=2)
ECFG = EditorConfig(rank=2, module_dim=24, k=2)


def build_world(seed=11):
    hub = RngHub(seed)
    bench = generate_benchmark(BCFG, SCFG, hub.stream("benchmark"))
    model = Surrogate.init(SCFG, hub.stream("model"))
    model.freeze()
    editor = Editor.init(ECFG, SCFG, hub.stream("editor"))
    return hub, bench, model, editor


@pytest.fixture(scope="module")
def world():
    return build_world()


def test_sample_batch_shapes_and_determinism(world):
    _, bench, _, _ = world
    a = sample_batch(bench.train_records, RngHub(3).stream("batches"), 4)
    b = sample_batch(bench.train_records, RngHub(3).stream("batches"), 4)
    assert a.size == 4
    assert a.vis_e.shape == (4, SCFG.n_visual, SCFG.visual_dim)
    assert a.prompt_e.shape == (4, 3) and a.out_e.shape == (4, 1)
    for f in ("vis_e", "prompt_g", "out_l"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def make_resampler(bench):
    return AnswerResampler(pool=tuple(bench.token_space().answer_tokens),
                           base_answer=bench.base_answer)


def test_resampler_draws_pool_minus_base(world):
    _, bench, _, _ = world
    rs = make_resampler(bench)
    rng = RngHub(5).stream("batches")
    pool = set(rs.pool)
    for rec in bench.train_records:
        base = int(bench.base_answer[rec.concept, rec.attribute])
        seen = {rs.draw(rec, rng) for _ in range(200)}
        assert seen <= pool - {base}
        # 200 draws over a 9-answer pool: every candidate should appear
        assert seen == pool - {base}


def test_resampled_batch_shares_target_and_keeps_loc(world):
    _, bench, _, _ = world
    rs = make_resampler(bench)
    rec = bench.train_records[0]
    base = int(bench.base_answer[rec.concept, rec.attribute])
    loc_targets = {s.output[0] for s in rec.loc_modal + rec.loc_text}
    batch = sample_batch([rec], RngHub(7).stream("batches"), 6, resampler=rs)
    assert np.array_equal(batch.out_e, batch.out_g)
    drawn = set(batch.out_e.ravel().tolist())
    assert drawn <= set(rs.pool) and base not in drawn
    assert set(batch.out_l.ravel().tolist()) <= loc_targets
    a = sample_batch([rec], RngHub(7).stream("batches"), 6, resampler=rs)
    for f in ("vis_e", "out_e", "out_g", "out_l"):
        assert np.array_equal(getattr(batch, f), getattr(a, f))


def test_draw_mixing_never_picks_own_row():
    for seed in range(20):
        mix = draw_mixing(RngHub(seed).stream("shuffle"), 6)
        assert set(np.unique(mix.pi1)) <= {0.0, 1.0}
        assert set(np.unique(mix.pi2)) <= {0.0, 1.0}
        assert np.all(mix.neg_idx != np.arange(6))
        assert np.all((0 <= mix.neg_idx) & (mix.neg_idx < 12))


def test_infonce_equal_scores_is_log_n():
    with nm.use_dtype(np.float64):
        anchor = nm.tensor(np.array([1.0, 0.0]))
        cands = nm.tensor(np.tile([[1.0, 0.0]], (4, 1)))
        loss = infonce(anchor, 2, cands, divisor=1.0)
    assert loss.item() == pytest.approx(np.log(4.0), rel=1e-12)


def test_losses_at_init_match_frozen_model(world):
    """Zero-init value map: the edited forward IS the frozen forward."""
    _, bench, model, editor = world
    batch = sample_batch(bench.train_records, RngHub(5).stream("batches"), 4)
    mix = draw_mixing(RngHub(5).stream("shuffle"), 4)
    rep = compute_losses(model, editor, batch, mix).report()

    logits, spans = model.forward(batch.vis_e, batch.prompt_e, batch.out_e)
    frozen_rel = -model.sequence_log_prob(logits, spans, batch.out_e).mean().item()
    assert rep.rel == frozen_rel
    assert rep.loc == 0.0
    assert np.isfinite(rep.total)


def test_routing_losses_match_numpy_oracle(world):
    _, bench, model, editor = world
    b = 4
    batch = sample_batch(bench.train_records, RngHub(9).stream("batches"), b)
    mix = draw_mixing(RngHub(9).stream("shuffle"), b)
    rep = compute_losses(model, editor, batch, mix).report()

    layer = SCFG.edit_layer
    div = editor.cfg.sim_divisor

    def ends(vis, prm, out):
        hs = model.embed(vis, prm, out)
        mid = model.forward_to_layer(hs, layer)
        hv, hp = mid.h[:, hs.spans.visual], mid.h[:, hs.spans.prompt]
        return hv, hp

    hv_e, hp_e = ends(batch.vis_e, batch.prompt_e, batch.out_e)
    hv_g, hp_g = ends(batch.vis_g, batch.prompt_g, batch.out_g)
    hv_l, hp_l = ends(batch.vis_l, batch.prompt_l, batch.out_l)

    def feats(extractor, hv, hp):
        fv, ft = extractor.extract(hv, hp)
        return fv.data.astype(np.float64), ft.data.astype(np.float64)

    phi_hat_e, psi_hat_e = feats(editor.edit_end, hv_e, hp_e)
    phi_hat_g0, psi_hat_g0 = feats(editor.edit_end, hv_g, hp_g)
    phi_hat_l, psi_hat_l = feats(editor.edit_end, hv_l, hp_l)
    phi_bar_e, psi_bar_e = feats(editor.input_end, hv_e, hp_e)
    phi_bar_g0, psi_bar_g0 = feats(editor.input_end, hv_g, hp_g)
    phi_bar_l, psi_bar_l = feats(editor.input_end, hv_l, hp_l)

    m1 = mix.pi1[:, None]
    m2 = mix.pi2[:, None]
    phi_hat_g = m1 * phi_hat_e + (1 - m1) * phi_hat_g0
    psi_hat_g = m1 * psi_hat_e + (1 - m1) * psi_hat_g0
    phi_bar_g = m2 * phi_bar_e + (1 - m2) * phi_bar_g0
    psi_bar_g = m2 * psi_bar_e + (1 - m2) * psi_bar_g0

    mix_rows = mix.pi2[:, None, None]
    hp_mix = mix_rows * hp_e.data.astype(np.float64) + (1 - mix_rows) * hp_g.data.astype(np.float64)
    sent_g = editor.input_end.sentinel_feature(
        editor.sentinel, nm.tensor(hp_mix.astype(np.float32))).data.astype(np.float64)
    sent_l = editor.input_end.sentinel_feature(
        editor.sentinel, hp_l).data.astype(np.float64)

    def log_softmax(v):
        s = v - v.max()
        return s - np.log(np.exp(s).sum())

    hr_ref = 0.0
    for i in range(b):
        row_g = np.append(phi_bar_g[i] @ phi_hat_g.T / div,
                          phi_bar_g[i] @ sent_g[i] / div)
        row_l = np.append(phi_bar_l[i] @ phi_hat_g.T / div,
                          phi_bar_l[i] @ sent_l[i] / div)
        hr_ref -= log_softmax(row_g)[i] + log_softmax(row_l)[b]

    pool = np.concatenate([psi_hat_g, psi_hat_l], axis=0)
    sr1_ref, sr2_ref = 0.0, 0.0
    for i in range(b):
        s_pos = psi_bar_g[i] @ psi_hat_g[i] / div
        s_neg = psi_bar_g[i] @ pool[mix.neg_idx[i]] / div
        sr1_ref += np.logaddexp(0.0, -s_pos) + np.logaddexp(0.0, s_neg)
        sr2_ref -= log_softmax(psi_bar_g[i] @ pool.T / div)[i]

    assert rep.hr == pytest.approx(hr_ref, rel=2e-4)
    assert rep.sr1 == pytest.approx(sr1_ref, rel=2e-4)
    assert rep.sr2 == pytest.approx(sr2_ref, rel=2e-4)


def test_drop_flags_zero_out_terms(world):
    _, bench, model, editor = world
    batch = sample_batch(bench.train_records, RngHub(5).stream("batches"), 4)
    mix = draw_mixing(RngHub(5).stream("shuffle"), 4)
    rep = compute_losses(model, editor, batch, mix,
                         drop_sr1=True, drop_sr2=True).report()
    assert rep.sr1 == 0.0 and rep.sr2 == 0.0
    assert rep.total == pytest.approx(rep.rel + rep.gen + rep.loc + rep.hr)


def test_uniform_fusion_runs(world):
    _, bench, model, editor = world
    batch = sample_batch(bench.train_records, RngHub(5).stream("batches"), 4)
    mix = draw_mixing(RngHub(5).stream("shuffle"), 4)
    rep = compute_losses(model, editor, batch, mix, uniform_fusion=True).report()
    assert np.isfinite(rep.total)


def test_losses_require_frozen_model(world):
    _, bench, _, editor = world
    hub = RngHub(13)
    live = Surrogate.init(SCFG, hub.stream("model"))
    batch = sample_batch(bench.train_records, hub.stream("batches"), 2)
    mix = draw_mixing(hub.stream("shuffle"), 2)
    with pytest.raises(FrozenModelError):
        compute_losses(live, editor, batch, mix)


def test_total_loss_gradcheck_fp64():
    hub = RngHub(5)
    scfg = SurrogateConfig(width=16, layers=2, heads=2, vocab=32, n_visual=4,
                           visual_dim=4, max_seq=12, edit_layer=1)
    bcfg = BenchmarkConfig(concepts=4, attributes=3, templates=2,
                           off_templates=2, topics=3, answer_pool=8,
                           draws_per_template=1, n_eval_edits=4,
                           n_train_edits=4, n_companions=2)
    with nm.use_dtype(np.float64):
        bench = generate_benchmark(bcfg, scfg, hub.stream("benchmark"))
        model = Surrogate.init(scfg, hub.stream("model"))
        model.freeze()
        editor = Editor.init(EditorConfig(rank=2, module_dim=16, k=2),
                             scfg, hub.stream("editor"))
        kick = np.random.default_rng(99)
        for _, t in editor.named_params():
            t.data = t.data + 0.05 * kick.standard_normal(t.data.shape)
        batch = sample_batch(bench.train_records, hub.stream("batches"), 2)
        mix = draw_mixing(hub.stream("shuffle"), 2)

        def loss_fn():
            return compute_losses(model, editor, batch, mix).total

        res = grad_check(loss_fn, editor.named_params(),
                         max_coords_per_param=2, rng=np.random.default_rng(0))
    assert res.max_rel_err < 1e-4, res


def test_train_editor_writes_csv_and_learns(tmp_path, world):
    hub, bench, model, _ = world
    editor = Editor.init(ECFG, SCFG, RngHub(21).stream("editor"))
    before = {k: v.data.copy() for k, v in editor.named_params()}
    cfg = TrainConfig(batch_size=4, lr=1e-3, max_steps=5, checkpoint_every=100)
    result = train_editor(model, editor, bench.train_records, cfg,
                          RngHub(21), csv_path=tmp_path / "loss.csv")
    rows = (tmp_path / "loss.csv").read_text().splitlines()
    assert rows[0] == ",".join(CSV_HEADER)
    assert len(rows) == 6
    assert result.steps_run == 5
    assert np.isfinite(result.final.total)
    after = dict(editor.named_params())
    assert any(not np.array_equal(before[k], after[k].data) for k in before)


def test_identical_runs_write_identical_csvs(tmp_path, world):
    _, bench, model, _ = world

    def run(path):
        editor = Editor.init(ECFG, SCFG, RngHub(33).stream("editor"))
        cfg = TrainConfig(batch_size=4, lr=1e-3, max_steps=4, checkpoint_every=100)
        train_editor(model, editor, bench.train_records, cfg, RngHub(33),
                     csv_path=path)
        return path.read_bytes()

    assert run(tmp_path / "a.csv") == run(tmp_path / "b.csv")


def test_checkpoint_resume_replays_exactly(tmp_path, world):
    _, bench, model, _ = world

    def fresh_editor():
        return Editor.init(ECFG, SCFG, RngHub(27).stream("editor"))

    # straight run to 8 steps
    full = fresh_editor()
    cfg8 = TrainConfig(batch_size=4, lr=1e-3, max_steps=8, checkpoint_every=100)
    train_editor(model, full, bench.train_records, cfg8, RngHub(27),
                 csv_path=tmp_path / "full.csv")

    # 4 steps, checkpoint, resume in a fresh process-like state
    first = fresh_editor()
    cfg4 = TrainConfig(batch_size=4, lr=1e-3, max_steps=4, checkpoint_every=4)
    train_editor(model, first, bench.train_records, cfg4, RngHub(27),
                 csv_path=tmp_path / "resumed.csv",
                 checkpoint_path=tmp_path / "ck")
    second = fresh_editor()
    state, step, hub, _ = load_checkpoint(tmp_path / "ck", second)
    assert step == 4
    train_editor(model, second, bench.train_records, cfg8, hub,
                 csv_path=tmp_path / "resumed.csv",
                 start_step=step, adam_state=state)

    assert (tmp_path / "full.csv").read_bytes() == (tmp_path / "resumed.csv").read_bytes()
    full_params = dict(full.named_params())
    for k, t in second.named_params():
        assert np.array_equal(t.data, full_params[k].data), k


def test_checkpoint_rejects_other_editor_shape(tmp_path, world):
    _, bench, model, editor = world
    cfg = TrainConfig(batch_size=4, lr=1e-3, max_steps=2, checkpoint_every=2)
    e1 = Editor.init(ECFG, SCFG, RngHub(1).stream("editor"))
    train_editor(model, e1, bench.train_records, cfg, RngHub(1),
                 checkpoint_path=tmp_path / "ck")
    other = Editor.init(EditorConfig(rank=3, module_dim=24, k=2), SCFG,
                        RngHub(1).stream("editor"))
    with pytest.raises(ValueError, match="editor shape"):
        load_checkpoint(tmp_path / "ck", other)


def test_nan_aborts_training(world):
    _, bench, model, _ = world
    editor = Editor.init(ECFG, SCFG, RngHub(2).stream("editor"))
    editor.sentinel.data[0, 0] = np.nan
    cfg = TrainConfig(batch_size=4, lr=1e-3, max_steps=3, checkpoint_every=100)
    with pytest.raises(NumericalError, match="diverged"):
        train_editor(model, editor, bench.train_records, cfg, RngHub(2))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(max_steps=0)
