"""Training phases, the adversarial schedule, checkpoints, resume, MRT and sweeps."""

from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brcsgan.corpus import EOS, SyntheticTaskSpec, generate_corpus
from brcsgan.discriminator import Discriminator, DiscriminatorConfig
from brcsgan.generator import Generator, GeneratorConfig
from brcsgan.numerics import backward, load_checkpoint
from brcsgan.numerics.tensor import current_tape
from brcsgan.trainer import (GateNotReached, MetricsWriter, TrainConfig, TrainingDiverged, TrainState,
                             adversarial_loop, disc_pools, generate_negatives, mrt_baseline, mrt_loss,
                             pretrain_discriminator, pretrain_generator, read_metrics, run_sweeps)

SPEC = SyntheticTaskSpec(kind="copy", vocab_size=8, min_len=2, max_len=4, n_train=40, n_dev=8, n_test=4, t_max=6)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SPEC)


def make_gen(seed=0):
    return Generator(GeneratorConfig(vocab_size=8, emb_dim=4, hidden=4, att_dim=4, t_max=6, seed=seed))


def make_disc(seed=1, epsilon=0.5):
    return Discriminator(DiscriminatorConfig(vocab_size=8, emb_dim=3, windows=(1, 2), kernels=3, T=6,
                                             epsilon=epsilon, seed=seed))


def small_cfg(**kw):
    base = dict(eta=6, epsilon=0.5, n_rollouts=2, eval_interval=2, max_steps=6, patience=5,
                pretrain_eval_interval=5, pretrain_max_steps=20, mle_batch=8, pg_batch=3, disc_batch=4,
                disc_step_cap=10, disc_eval_every=2, disc_pool=20, mrt_sample_size=3, pretrain_lr=0.01)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    for bad in (dict(xi=0.5), dict(xi=1.0), dict(eta=0), dict(epsilon=0.0), dict(patience=0),
                dict(eval_decoder="sample"), dict(normalize="x"), dict(mrt_sample_size=1), dict(lam=2.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_recorded_best_is_running_max(values):
    s = TrainState()
    bests = []
    for i, v in enumerate(values):
        s.record(i, v)
        bests.append(s.best_bleu)
    assert bests == list(np.maximum.accumulate(values))
    assert TrainState.from_json(s.to_json()) == s


def test_patience_one_with_frozen_generator(corpus, tmp_path):
    res = pretrain_generator(make_gen(), corpus, small_cfg(patience=1, pretrain_max_steps=1000), tmp_path, frozen=True)
    # the first evaluation sets the best; the next one fails to improve and stops the phase
    assert len(res.state.history) == 2 and res.state.g_steps == 0
    assert (tmp_path / "gen_pretrained.ckpt").exists()


def test_pretraining_is_deterministic_and_keeps_best(corpus, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    ra = pretrain_generator(make_gen(), corpus, small_cfg(), tmp_path / "a")
    pretrain_generator(make_gen(), corpus, small_cfg(), tmp_path / "b")
    ca, cb = load_checkpoint(tmp_path / "a" / "gen_pretrained.ckpt"), load_checkpoint(tmp_path / "b" / "gen_pretrained.ckpt")
    assert all(np.array_equal(ca[k], cb[k]) for k in ca)
    assert ra.state.best_bleu == max(v for _, v in ra.state.history)


def test_negatives_cycle_and_are_greedy(corpus):
    gen = make_gen()
    pairs = corpus.train[:5]
    neg = generate_negatives(gen, pairs, 12, np.random.default_rng(0))
    assert len(neg) == 12
    first = [n.source for n in neg[:5]]
    assert sorted(first) == sorted(p.source for p in pairs)  # without replacement within a cycle
    greedy = gen.sample(np.array([list(neg[0].source)]), "greedy")[0]
    assert neg[0].target == tuple(int(t) for t in greedy if t != 0)
    with pytest.raises(ValueError):
        generate_negatives(gen, [], 3, np.random.default_rng(0))


def test_gate_at_chance_is_reached_immediately(corpus):
    gen, disc = make_gen(), make_disc()
    disc.params["out.V"].data[:] = 0.0
    real, fake = disc_pools(gen, corpus, small_cfg())
    res = pretrain_discriminator(disc, real, fake, 0.5, small_cfg())
    assert res.accuracy == 0.5 and res.state.d_steps == 0


def test_gate_miss_raises_or_reports(corpus, tmp_path):
    gen = make_gen()
    real, fake = disc_pools(gen, corpus, small_cfg())
    with pytest.raises(GateNotReached) as info:
        pretrain_discriminator(make_disc(), real, fake, 0.999, small_cfg(disc_step_cap=4))
    assert info.value.steps == 4
    res = pretrain_discriminator(make_disc(), real, fake, 0.999, small_cfg(disc_step_cap=4), tmp_path,
                                 raise_on_cap=False)
    assert res.state.d_steps == 4
    assert json.loads((tmp_path / "disc_pretrained.json").read_text())["steps"] == 4


def _adversarial(corpus, run_dir, **kw):
    gen, disc = make_gen(), make_disc()
    seen = []

    def check(state, g, d):
        seen.append((state.g_steps, state.tf_steps, state.d_steps, d.params.max_abs()))

    res = adversarial_loop(gen, disc, corpus, small_cfg(**kw), run_dir, on_iteration=check)
    return res, seen, gen, disc


def test_schedule_and_clip_invariants(corpus, tmp_path):
    res, seen, _, _ = _adversarial(corpus, tmp_path, max_steps=5)
    assert len(seen) == 5
    for i, (g, tf, d, mx) in enumerate(seen, start=1):
        assert g == tf == d == i and mx <= 0.5


def test_best_checkpoint_matches_metrics(corpus, tmp_path):
    res, _, _, _ = _adversarial(corpus, tmp_path)
    rows = [r for r in read_metrics(tmp_path / "metrics.csv") if r["dev_bleu"]]
    best = max(float(r["dev_bleu"]) for r in rows)
    assert json.loads((tmp_path / "gen_best.json").read_text())["dev_bleu"] == best == res.state.best_bleu
    g = make_gen(seed=9)
    g.load_state_dict(load_checkpoint(tmp_path / "gen_best.ckpt"))


def test_resume_reproduces_the_uninterrupted_run(corpus, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    full.mkdir()
    part.mkdir()
    _adversarial(corpus, full, max_steps=6)
    _adversarial(corpus, part, max_steps=4)
    gen, disc = make_gen(seed=5), make_disc(seed=6)  # weights come from the state checkpoint
    adversarial_loop(gen, disc, corpus, small_cfg(max_steps=6), part, resume=True)
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()


def test_resume_without_state_fails(corpus, tmp_path):
    with pytest.raises(FileNotFoundError):
        adversarial_loop(make_gen(), make_disc(), corpus, small_cfg(), tmp_path, resume=True)


def test_divergence_aborts_with_state_dump(corpus, tmp_path):
    with pytest.raises(TrainingDiverged):
        _adversarial(corpus, tmp_path, divergence_bound=1e-12)
    assert (tmp_path / "abort.ckpt").exists()


def test_metrics_rows_are_bit_identical_across_runs(corpus, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    _adversarial(corpus, tmp_path / "a", max_steps=4)
    _adversarial(corpus, tmp_path / "b", max_steps=4)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_metrics_writer_truncation(tmp_path):
    w = MetricsWriter(tmp_path)
    for i in range(1, 5):
        w.row(i, "adversarial", 0.1 * i, wall_seconds=1.0)
    w.row(1, "mrt", 0.5)
    w.truncate_after(2, "adversarial")
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [(r["step"], r["phase"]) for r in rows] == [("1", "adversarial"), ("2", "adversarial"), ("1", "mrt")]


def test_mrt_degenerate_subset_has_zero_gradient():
    gen = make_gen()
    gen.params["out.b2"].data[:] = -80.0
    gen.params["out.b2"].data[EOS] = 80.0
    loss, risk = mrt_loss(gen, [[4, 5]], [(4, 5, EOS)], 4, 0.005, np.random.default_rng(0))
    backward(loss, gen.params)
    assert np.max(np.abs(gen.params.flat_grads())) == 0.0
    assert risk == 1.0  # the single candidate is empty
    gen.params.zero_grad()
    with pytest.raises(ValueError):
        mrt_loss(gen, [[4]], [(4, EOS)], 1, 0.005, np.random.default_rng(0))


def test_mrt_loss_matches_subset_expectation():
    from brcsgan.bleu import sentence_bleu
    from brcsgan.corpus import pad_batch

    gen = make_gen(seed=3)
    ref = (4, 5, EOS)
    loss, _ = mrt_loss(gen, [[4, 5]], [ref], 6, 0.5, np.random.default_rng(1))
    toks = gen.sample(pad_batch([[4, 5]] * 6), "multinomial", 6, np.random.default_rng(1))
    subset = list(dict.fromkeys(tuple(int(t) for t in row if t != 0) for row in toks))
    lp = gen.sequence_log_prob(pad_batch([[4, 5]] * len(subset)), pad_batch([list(s) for s in subset]),
                               require_eos=False).data
    q = np.exp(0.5 * lp - np.max(0.5 * lp))
    q /= q.sum()
    risk = np.array([1 - sentence_bleu(s, ref).value for s in subset])
    assert abs(loss.item() - float(q @ risk)) < 1e-12
    current_tape().clear()


def test_mrt_baseline_runs(corpus, tmp_path):
    res = mrt_baseline(make_gen(), corpus, small_cfg(max_steps=4), tmp_path)
    assert res.state.g_steps == 4 and len(res.state.history) == 2
    assert (tmp_path / "gen_best.ckpt").exists()


def test_sweeps_write_one_directory_per_point(corpus, tmp_path):
    entries = make_gen().state_dict()
    rows = run_sweeps("n", entries, make_gen, make_disc, corpus, small_cfg(max_steps=2, xi=0.6), tmp_path / "n",
                      grid=(0, 2))
    assert [r["value"] for r in rows] == [0, 2]
    assert rows[0]["best_dev_bleu"] == rows[0]["baseline_dev_bleu"]
    assert (tmp_path / "n" / "summary.csv").exists() and (tmp_path / "n" / "n-2" / "metrics.csv").exists()
    rows = run_sweeps("xi", entries, make_gen, make_disc, corpus, small_cfg(max_steps=2), tmp_path / "xi",
                      grid=(0.6, 0.99))
    assert rows[1]["disc_accuracy"] < 0.99  # gate miss recorded rather than raised
    with pytest.raises(ValueError):
        run_sweeps("n", entries, make_gen, make_disc, corpus, small_cfg(), tmp_path / "e", grid=())
    with pytest.raises(ValueError):
        run_sweeps("lr", entries, make_gen, make_disc, corpus, small_cfg(), tmp_path / "k")


def test_copy_task_pretraining_reaches_high_bleu(tmp_path):
    """Desk-scale baseline smoke run: the default generator learns the copy task."""
    c = generate_corpus(SyntheticTaskSpec(kind="copy", vocab_size=20, min_len=3, max_len=10, n_train=5000,
                                          n_dev=100, n_test=100))
    gen = Generator(GeneratorConfig(vocab_size=20))
    cfg = TrainConfig(pretrain_eval_interval=250, pretrain_max_steps=2000, patience=3)
    res = pretrain_generator(gen, c, cfg)
    assert res.state.best_bleu > 0.9
