"""Acceptance checks, one test per criterion; each prints a PASS/FAIL line in the summary.

Criteria 8 and 9 read the trend study written by ``python -m brcsgan.experiments``
(default ``runs/trends``, override with ``BRCSGAN_TRENDS``); criterion 10 reruns
the seed-0 pipeline of that study from scratch and compares the CSV bytes.
"""

from __future__ import annotations

import os
import time
from pathlib import Path

import numpy as np
import pytest

from brcsgan.bleu import sentence_bleu
from brcsgan.corpus import SyntheticTaskSpec, generate_corpus
from brcsgan.discriminator import Discriminator, DiscriminatorConfig
from brcsgan.experiments import (StudyConfig, adversarial_run, medians, pretrained_discriminator,
                                 pretrained_generator, read_results, task_corpus)
from brcsgan.generator import Generator, GeneratorConfig
from brcsgan.reward import RewardConfig, mix_reward
from brcsgan.trainer import TrainConfig, adversarial_loop, read_metrics

from conftest import VERDICTS
from helpers import (GRADIENT_COMPONENTS, enumerable_instance, gradient_check_errors, lambda_zero_gradient_gap,
                     oracle_bleu, prefix_reward_moments, rollout_estimates, sampled_gradient_z_scores)

TRENDS = Path(os.environ.get("BRCSGAN_TRENDS", Path(__file__).resolve().parents[1] / "runs" / "trends"))


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


def trend_rows() -> list[dict[str, str]]:
    rows = read_results(TRENDS / "results.csv")
    if not rows:
        pytest.fail(f"no trend results in {TRENDS}; run python -m brcsgan.experiments --out {TRENDS}")
    return rows


def test_c01_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst = {c: max(gradient_check_errors(c, 20)) for c in GRADIENT_COMPONENTS}
    secs = time.perf_counter() - t0
    detail = ", ".join(f"{c} {e:.1e}" for c, e in worst.items()) + f"; {secs:.0f}s"
    verdict(1, max(worst.values()) < 1e-4 and secs < 120, detail)


def test_c02_sampled_policy_gradient_is_unbiased():
    t0 = time.perf_counter()
    z, dead, exact = sampled_gradient_z_scores(100_000)
    secs = time.perf_counter() - t0
    ok = np.all(dead == 0.0) and np.all(z <= 3.0) and secs < 300
    verdict(2, ok, f"max |z| {z.max():.2f} over {z.size} live coordinates, "
                   f"{dead.size} constant ones exact; {secs:.0f}s")


def test_c03_reward_mixture_identity():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for d, q, lam, b in rng.random((1000, 4)):
        r = mix_reward(d, q, RewardConfig(lam=lam, baseline=b))
        r1 = mix_reward(d, q, RewardConfig(lam=1.0, baseline=b))
        r0 = mix_reward(d, q, RewardConfig(lam=0.0, baseline=b))
        worst = max(worst, abs(r - (lam * r1 + (1 - lam) * r0)))
    verdict(3, worst <= 1e-12, f"max gap {worst:.1e} over 1000 triples")


def test_c04_lambda_zero_is_bleu_weighted_likelihood():
    gaps = [lambda_zero_gradient_gap(seed) for seed in range(5)]
    verdict(4, max(gaps) <= 1e-12, f"max gradient gap {max(gaps):.1e} over 5 batches")


def test_c05_sentence_bleu_matches_counting_oracle():
    rng = np.random.default_rng(7)
    pairs = [([4, 5, 6, 7], [4, 5, 6, 8])]
    while len(pairs) < 50:
        cand = list(rng.integers(4, 9, size=rng.integers(1, 12)))
        ref = list(rng.integers(4, 9, size=rng.integers(1, 12)))
        pairs.append((cand, ref))
    worst = max(abs(sentence_bleu(c, r).value - oracle_bleu(c, r)) for c, r in pairs)
    hand = sentence_bleu(*pairs[0]).value
    verdict(5, worst <= 1e-12 and round(hand, 4) == 0.6580,
            f"max gap {worst:.1e} over 50 pairs; hand example {hand:.4f}")


def test_c06_clipping_and_schedule_invariants(tmp_path):
    spec = SyntheticTaskSpec(kind="cipher-reorder", vocab_size=20, min_len=3, max_len=6, n_train=300, n_dev=30,
                             n_test=10, t_max=8)
    corpus = generate_corpus(spec)
    gen = Generator(GeneratorConfig(vocab_size=20, emb_dim=8, hidden=8, att_dim=8, t_max=8, seed=0))
    eps = 0.05
    disc = Discriminator(DiscriminatorConfig(vocab_size=20, emb_dim=6, kernels=4, T=8, epsilon=eps, seed=1))
    cfg = TrainConfig(max_steps=200, eval_interval=50, patience=10, eta=32, epsilon=eps, n_rollouts=3,
                      pg_batch=4, disc_batch=16, disc_lr=0.05)
    violations, at_bound = [], 0

    def check(state, g, d):
        nonlocal at_bound
        top = d.params.max_abs()
        if top > eps or not state.g_steps == state.tf_steps == state.d_steps == state.step:
            violations.append((state.step, top, state.g_steps, state.tf_steps, state.d_steps))
        at_bound += top == eps

    t0 = time.perf_counter()
    res = adversarial_loop(gen, disc, corpus, cfg, tmp_path, on_iteration=check)
    secs = time.perf_counter() - t0
    ok = res.state.step == 200 and not violations and at_bound > 0 and secs < 600
    verdict(6, ok, f"{res.state.step} iterations, {len(violations)} violations, clip active on {at_bound}; "
                   f"{secs:.0f}s")


def test_c07_monte_carlo_consistency():
    t0 = time.perf_counter()
    v5, v20 = rollout_estimates(5, 200).var(), rollout_estimates(20, 200).var()
    gen, disc, src, ref, cfg = enumerable_instance()
    mean, var = prefix_reward_moments(gen, disc, src, ref, cfg, (4,))
    est = rollout_estimates(200, 1)[0]
    z = abs(est - mean) / np.sqrt(var / 200)
    secs = time.perf_counter() - t0
    verdict(7, v20 < v5 and z <= 3.0 and secs < 300,
            f"var N=5 {v5:.2e} > N=20 {v20:.2e}; N=200 estimate {est:.4f} vs exact {mean:.4f} (z {z:.2f}); "
            f"{secs:.0f}s")


def _full_run_seconds(seed: int, rows) -> float:
    base = TRENDS / f"seed{seed}"
    total = 0.0
    for phase in ("gen-pretrain", f"disc-xi{StudyConfig().xi}"):
        timings = read_metrics(base / phase / "timings.csv")
        total += float(timings[-1]["wall_seconds"]) if timings else 0.0
    return total + next(float(r["seconds"]) for r in rows
                        if r["study"] == "lam" and r["setting"] == "0.7" and r["seed"] == str(seed))


def test_c08_reward_mixing_trend():
    rows = trend_rows()
    lam, base = medians(rows, "lam"), medians(rows, "pretrained")
    seeds = {r["seed"] for r in rows if r["study"] == "lam" and r["setting"] == "0.7"}
    slowest = max(_full_run_seconds(int(s), rows) for s in seeds)
    mixed = lam.get("0.7", -1.0)
    ok = (len(seeds) == 5 and mixed > base["mle"] and mixed >= lam.get("1.0", 2.0)
          and mixed >= lam.get("0.0", 2.0) and slowest < 1800)
    verdict(8, ok, f"median dev BLEU: pretrained {base['mle']:.4f}, lam=0.7 {mixed:.4f}, "
                   f"lam=1.0 {lam.get('1.0', float('nan')):.4f}, lam=0.0 {lam.get('0.0', float('nan')):.4f} "
                   f"over {len(seeds)} seeds; slowest run {slowest / 60:.1f} min")


def test_c09_sweep_trends():
    rows = trend_rows()
    sweep_seeds = {r["seed"] for r in rows if r["study"] == "xi"}
    base = float(np.median([float(r["best_dev_bleu"]) for r in rows
                            if r["study"] == "pretrained" and r["seed"] in sweep_seeds]))
    xi, n = medians(rows, "xi"), medians(rows, "n")
    # reused runs count with the time of the run they reuse
    secs = sum(float(r["seconds"]) for r in rows if r["study"] in ("xi", "n"))
    xi_ok = len(xi) == 3 and all(xi["0.8"] >= v for v in xi.values())
    n_ok = n.get("5", 2.0) <= base < n.get("20", -1.0)
    detail = (f"(a) median best dev BLEU by xi {', '.join(f'{k}: {v:.4f}' for k, v in xi.items())}; "
              f"(b) pretrained {base:.4f}, N=5 {n.get('5', float('nan')):.4f}, "
              f"N=20 {n.get('20', float('nan')):.4f}; sweep time {secs / 3600:.2f} h")
    verdict(9, xi_ok and n_ok and len(sweep_seeds) == 3, detail)


def test_c10_rerun_reproduces_metrics_bytes(tmp_path):
    rows = trend_rows()
    assert any(r["study"] == "lam" and r["seed"] == "0" and r["setting"] == "0.7" for r in rows)
    study = StudyConfig()
    corpus = task_corpus()
    gen_entries, _ = pretrained_generator(0, corpus, study, tmp_path)
    disc_entries, _ = pretrained_discriminator(0, gen_entries, corpus, study.xi, study, tmp_path)
    adversarial_run(tmp_path / "seed0" / "lam-0.7", 0, gen_entries, disc_entries, corpus,
                    study.train_config(0, lam=0.7), {})
    same = {}
    for phase in ("gen-pretrain", f"disc-xi{study.xi}", "lam-0.7"):
        a = (TRENDS / "seed0" / phase / "metrics.csv").read_bytes()
        b = (tmp_path / "seed0" / phase / "metrics.csv").read_bytes()
        same[phase] = a == b
    verdict(10, all(same.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
