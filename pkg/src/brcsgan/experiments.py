"""Trend studies on the cipher-reorder task.

Runs the reward-mixing comparison over several seeds, the gate and rollout
sweeps, and a teacher-forcing-only control, appending one row per run to
``results.csv`` under the output directory. Every phase is cached on disk:
rerunning the script skips finished runs, and adversarial runs whose
discriminator parameters and config match an earlier run reuse its result.

    python -m brcsgan.experiments --out runs/trends
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, SyntheticTaskSpec, generate_corpus
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import Generator, GeneratorConfig
from .numerics import Optimizer, load_checkpoint
from .reward import teacher_forcing_step
from .trainer import (MetricsWriter, TrainConfig, adversarial_loop, dev_pairs, disc_pools, evaluate_bleu,
                      pretrain_discriminator, pretrain_generator, step_rng, _sample_pairs)

log = logging.getLogger(__name__)

TASK = SyntheticTaskSpec(kind="cipher-reorder", vocab_size=50, min_len=5, max_len=15,
                         n_train=10000, n_dev=500, n_test=500, seed=0, t_max=20)
RESULT_FIELDS = ["study", "seed", "setting", "best_dev_bleu", "best_step", "baseline_dev_bleu",
                 "disc_accuracy", "disc_steps", "seconds", "cached_from"]


@dataclass(frozen=True)
class StudyConfig:
    """Budget shared by every run of the study."""
    pretrain_steps: int = 800  # short on purpose: leaves headroom above the baseline
    pretrain_eval_interval: int = 200
    adv_steps: int = 200
    eval_interval: int = 25
    disc_lr: float = 3e-3
    disc_cap: int = 1500
    xi: float = 0.82
    lam: float = 0.7
    n_rollouts: int = 20

    def train_config(self, seed: int, **kw) -> TrainConfig:
        base = TrainConfig(seed=seed, pretrain_max_steps=self.pretrain_steps,
                           pretrain_eval_interval=self.pretrain_eval_interval, max_steps=self.adv_steps,
                           eval_interval=self.eval_interval, patience=10 ** 6, disc_pretrain_lr=self.disc_lr,
                           disc_step_cap=self.disc_cap, xi=self.xi, lam=self.lam, n_rollouts=self.n_rollouts)
        return replace(base, **kw)


def task_corpus() -> Corpus:
    return generate_corpus(TASK)


def make_generator(seed: int) -> Generator:
    return Generator(GeneratorConfig(vocab_size=TASK.vocab_size, t_max=TASK.t_max, seed=seed))


def make_discriminator(seed: int) -> Discriminator:
    return Discriminator(DiscriminatorConfig(vocab_size=TASK.vocab_size, T=TASK.t_max, seed=seed + 7919))


def _digest(entries: dict, cfg: TrainConfig) -> str:
    h = hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode())
    for k in sorted(entries):
        h.update(k.encode())
        h.update(np.ascontiguousarray(entries[k], dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- phases


def pretrained_generator(seed: int, corpus: Corpus, study: StudyConfig, root: Path) -> tuple[dict, float]:
    """Generator checkpoint and its dev BLEU, trained once per seed."""
    out = root / f"seed{seed}" / "gen-pretrain"
    ckpt = out / "gen_pretrained.ckpt"
    if not ckpt.exists():
        if out.exists():
            shutil.rmtree(out)  # interrupted earlier
        out.mkdir(parents=True)
        pretrain_generator(make_generator(seed), corpus, study.train_config(seed), out)
    entries = load_checkpoint(ckpt)
    state = json.loads((out / "gen_pretrained.json").read_text())
    return entries, float(state["best_bleu"])


def pretrained_discriminator(seed: int, gen_entries: dict, corpus: Corpus, xi: float, study: StudyConfig,
                             root: Path) -> tuple[dict, dict]:
    """Discriminator gated at ``xi`` (cap misses are recorded, not raised)."""
    out = root / f"seed{seed}" / f"disc-xi{xi}"
    ckpt = out / "disc_pretrained.ckpt"
    if not ckpt.exists():
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        cfg = study.train_config(seed)
        gen = make_generator(seed)
        gen.load_state_dict(gen_entries)
        real, fake = disc_pools(gen, corpus, cfg)
        pretrain_discriminator(make_discriminator(seed), real, fake, xi, cfg, out, raise_on_cap=False)
    return load_checkpoint(ckpt), json.loads((out / "disc_pretrained.json").read_text())


def adversarial_run(out: Path, seed: int, gen_entries: dict, disc_entries: dict, corpus: Corpus,
                    cfg: TrainConfig, cache: dict[str, Path]) -> tuple[float, int, str]:
    """Best dev BLEU and step of one adversarial run; reuses identical runs."""
    key = _digest({**{"g." + k: v for k, v in gen_entries.items()},
                   **{"d." + k: v for k, v in disc_entries.items()}}, cfg)
    done = out / "result.json"
    if not done.exists() and key in cache and cache[key] != out:
        src = cache[key]
        res = json.loads((src / "result.json").read_text())
        return res["best_dev_bleu"], res["best_step"], str(src)
    if not done.exists():
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        gen, disc = make_generator(seed), make_discriminator(seed)
        gen.load_state_dict(gen_entries)
        disc.load_state_dict(disc_entries)
        res = adversarial_loop(gen, disc, corpus, cfg, out)
        done.write_text(json.dumps({"best_dev_bleu": res.state.best_bleu, "best_step": res.state.best_step,
                                    "key": key}))
    cache[key] = out
    res = json.loads(done.read_text())
    return res["best_dev_bleu"], res["best_step"], ""


def teacher_forcing_control(out: Path, seed: int, gen_entries: dict, corpus: Corpus,
                            cfg: TrainConfig) -> tuple[float, int]:
    """Only the teacher-forcing half of each adversarial iteration, same batches."""
    done = out / "result.json"
    if not done.exists():
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        gen = make_generator(seed)
        gen.load_state_dict(gen_entries)
        opt = Optimizer(gen.params, cfg.optimizer_config(cfg.adv_lr))
        dev = dev_pairs(corpus, cfg)
        writer = MetricsWriter(out)
        best, best_step = -1.0, -1
        for i in range(1, cfg.max_steps + 1):
            pairs = _sample_pairs(corpus.train, cfg.pg_batch, step_rng(cfg.seed, "adversarial", i, 2))
            teacher_forcing_step(gen, [p.source for p in pairs], [p.target for p in pairs], opt)
            if i % cfg.eval_interval == 0:
                bleu = evaluate_bleu(gen, dev, cfg.eval_decoder, cfg.beam_size)
                writer.row(i, "tf-control", dev_bleu=bleu)
                if bleu > best:
                    best, best_step = bleu, i
        done.write_text(json.dumps({"best_dev_bleu": best, "best_step": best_step}))
    res = json.loads(done.read_text())
    return res["best_dev_bleu"], res["best_step"]


# ----------------------------------------------------------------- driver


def read_results(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _append(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        if new:
            w.writeheader()
        w.writerow({k: row.get(k, "") for k in RESULT_FIELDS})


def run_study(root: Path, seeds: Sequence[int] = range(5), sweep_seeds: Sequence[int] = range(3),
              study: StudyConfig = StudyConfig(), lams: Sequence[float] = (0.7, 1.0, 0.0),
              xis: Sequence[float] = (0.6, 0.8, 0.95), ns: Sequence[int] = (5, 20)) -> list[dict[str, str]]:
    root.mkdir(parents=True, exist_ok=True)
    results = root / "results.csv"
    seen = {(r["study"], r["seed"], r["setting"]) for r in read_results(results)}
    corpus = task_corpus()
    cache: dict[str, Path] = {}
    for r in read_results(results):
        if not r["cached_from"]:
            d = root / f"seed{r['seed']}" / f"{r['study']}-{r['setting']}"
            key = json.loads((d / "result.json").read_text()).get("key") if (d / "result.json").exists() else None
            if key:
                cache[key] = d

    def record(study_name: str, seed: int, setting, fn) -> None:
        if (study_name, str(seed), str(setting)) in seen:
            return
        t0 = time.perf_counter()
        row = fn()
        row.update(study=study_name, seed=seed, setting=setting, seconds=round(time.perf_counter() - t0, 1))
        _append(results, row)
        log.info("%s seed %d %s: %s", study_name, seed, setting, row)

    for seed in seeds:
        gen_entries, base_bleu = pretrained_generator(seed, corpus, study, root)
        record("pretrained", seed, "mle", lambda: {"best_dev_bleu": base_bleu, "baseline_dev_bleu": base_bleu})
        gated: dict[float, tuple[dict, dict]] = {}

        def disc_at(xi: float) -> tuple[dict, dict]:
            if xi not in gated:
                gated[xi] = pretrained_discriminator(seed, gen_entries, corpus, xi, study, root)
            return gated[xi]

        def adv(study_name: str, setting, xi: float, **kw):
            def go():
                d_entries, d_info = disc_at(xi)
                cfg = study.train_config(seed, **kw)
                out = root / f"seed{seed}" / f"{study_name}-{setting}"
                best, step, src = adversarial_run(out, seed, gen_entries, d_entries, corpus, cfg, cache)
                return {"best_dev_bleu": best, "best_step": step, "baseline_dev_bleu": base_bleu,
                        "disc_accuracy": d_info["accuracy"], "disc_steps": d_info["steps"], "cached_from": src}
            record(study_name, seed, setting, go)

        for lam in lams:
            adv("lam", lam, study.xi, lam=lam)
        record("tf-control", seed, "tf", lambda: dict(zip(
            ("best_dev_bleu", "best_step"),
            teacher_forcing_control(root / f"seed{seed}" / "tf-control-tf", seed, gen_entries, corpus,
                                    study.train_config(seed))), baseline_dev_bleu=base_bleu))
        if seed in sweep_seeds:
            for xi in xis:
                adv("xi", xi, xi)
            for n in ns:
                adv("n", n, study.xi, n_rollouts=n)
    return read_results(results)


def medians(rows: Sequence[dict[str, str]], study: str) -> dict[str, float]:
    """Median best dev BLEU per setting of one study."""
    by: dict[str, list[float]] = {}
    for r in rows:
        if r["study"] == study:
            by.setdefault(r["setting"], []).append(float(r["best_dev_bleu"]))
    return {k: float(np.median(v)) for k, v in by.items()}


def main(argv: Sequence[str] | None = None) -> int:
    p = argparse.ArgumentParser(prog="python -m brcsgan.experiments", description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/trends")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--sweep-seeds", type=int, default=3)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = run_study(Path(args.out), range(args.seeds), range(args.sweep_seeds))
    for study in ("pretrained", "lam", "tf-control", "xi", "n"):
        print(study, {k: round(v, 4) for k, v in medians(rows, study).items()})
    return 0


if __name__ == "__main__":
    sys.exit(main())
