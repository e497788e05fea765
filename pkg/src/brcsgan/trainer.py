"""Training pipeline: MLE pretraining, negative generation, gated discriminator
pretraining, the alternating adversarial loop, the MRT baseline and sweeps.

Every source of randomness inside a phase is derived from
``(seed, phase code, step, stream)`` so a run can be stopped at an evaluation
checkpoint and resumed with an identical continuation.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bleu import corpus_bleu, sentence_bleu
from .corpus import PAD, Corpus, SentencePair, make_batches, pad_batch, strip_special
from .discriminator import Discriminator, accuracy, disc_step
from .generator import Generator, mle_step
from .numerics import (NonFiniteError, Optimizer, OptimizerConfig, Tensor, backward, load_checkpoint,
                       no_grad, save_checkpoint)
from .numerics import ops
from .reward import RewardConfig, policy_gradient_step, teacher_forcing_step

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "phase", "mean_reward", "reward_variance", "disc_accuracy", "dev_bleu")
TIMING_COLUMNS = ("step", "phase", "wall_seconds")
PHASES = ("gen-pretrain", "disc-pretrain", "adversarial", "mrt")
_PHASE_CODE = {"gen-pretrain": 1, "disc-pretrain": 2, "adversarial": 3, "mrt": 4, "negatives": 5}


class GateNotReached(RuntimeError):
    def __init__(self, accuracy: float, steps: int, xi: float):
        super().__init__(f"discriminator reached accuracy {accuracy:.4f} < xi={xi} after {steps} steps")
        self.accuracy, self.steps, self.xi = accuracy, steps, xi


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    xi: float = 0.82
    eta: int = 500  # full-size systems regenerate 5000
    epsilon: float = 1.0
    lam: float = 0.7
    n_rollouts: int = 20
    baseline: float = 0.5
    patience: int = 10
    eval_interval: int = 50
    max_steps: int = 1000
    pretrain_eval_interval: int = 100
    pretrain_max_steps: int = 20000
    disc_step_cap: int = 5000
    disc_eval_every: int = 5
    disc_pool: int = 2000
    mle_batch: int = 64
    pg_batch: int = 16
    disc_batch: int = 64
    dev_eval_size: int = 0  # 0 means the whole dev set
    eval_decoder: str = "greedy"
    beam_size: int = 10
    optimizer: str = "adam"
    pretrain_lr: float = 1e-3
    adv_lr: float = 1e-4
    disc_lr: float = 1e-4
    disc_pretrain_lr: float = 1e-3
    normalize: str = "sentence"
    mrt_sample_size: int = 20
    mrt_alpha: float = 0.005
    divergence_bound: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        if not 0.5 < self.xi < 1.0:
            raise ValueError(f"xi must lie in (0.5, 1), got {self.xi}")
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if min(self.eval_interval, self.pretrain_eval_interval, self.disc_eval_every) < 1:
            raise ValueError("evaluation intervals must be >= 1")
        if min(self.mle_batch, self.pg_batch, self.disc_batch, self.disc_pool) < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.eval_decoder not in ("greedy", "beam"):
            raise ValueError(f"unknown eval decoder {self.eval_decoder!r}")
        if self.normalize not in ("sentence", "none"):
            raise ValueError(f"unknown normalisation {self.normalize!r}")
        if self.mrt_sample_size < 2:
            raise ValueError("mrt_sample_size must be >= 2")
        self.reward_config(20)

    def reward_config(self, t_max: int) -> RewardConfig:
        return RewardConfig(lam=self.lam, baseline=self.baseline, n_rollouts=self.n_rollouts, t_max=t_max)

    def optimizer_config(self, lr: float) -> OptimizerConfig:
        return OptimizerConfig(rule=self.optimizer, lr=lr)


@dataclass
class TrainState:
    phase: str = "gen-pretrain"
    step: int = 0
    g_steps: int = 0
    tf_steps: int = 0
    d_steps: int = 0
    best_bleu: float = -1.0
    best_step: int = -1
    since_improvement: int = 0
    history: list = field(default_factory=list)  # (step, dev_bleu) per evaluation

    def record(self, step: int, bleu: float) -> bool:
        """Register an evaluation; returns True when it is a new best."""
        self.history.append([step, bleu])
        if bleu > self.best_bleu:
            self.best_bleu, self.best_step, self.since_improvement = bleu, step, 0
            return True
        self.since_improvement += 1
        return False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainState":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class MachinePair:
    """A (source, decoded target) pair; the target need not end in EOS."""
    source: tuple[int, ...]
    target: tuple[int, ...]


@dataclass
class PhaseResult:
    state: TrainState
    run_dir: Path | None = None
    accuracy: float | None = None


def step_rng(seed: int, phase: str, step: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, _PHASE_CODE[phase], step, stream])


# ----------------------------------------------------------------- logging


class MetricsWriter:
    """Appends rows to metrics.csv and timings.csv; floats are written with repr."""

    def __init__(self, run_dir: Path | None):
        self.run_dir = run_dir
        if run_dir is None:
            return
        for name, cols in (("metrics.csv", METRIC_COLUMNS), ("timings.csv", TIMING_COLUMNS)):
            path = run_dir / name
            if not path.exists():
                path.write_text(",".join(cols) + "\n")

    @staticmethod
    def _fmt(v) -> str:
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    def row(self, step: int, phase: str, mean_reward=None, reward_variance=None,
            disc_accuracy=None, dev_bleu=None, wall_seconds: float | None = None) -> None:
        if self.run_dir is None:
            return
        vals = (step, phase, mean_reward, reward_variance, disc_accuracy, dev_bleu)
        with open(self.run_dir / "metrics.csv", "a") as fh:
            fh.write(",".join(self._fmt(v) for v in vals) + "\n")
        if wall_seconds is not None:
            with open(self.run_dir / "timings.csv", "a") as fh:
                fh.write(f"{step},{phase},{wall_seconds:.6f}\n")

    def truncate_after(self, step: int, phase: str) -> None:
        """Drop rows of ``phase`` beyond ``step`` (used when resuming)."""
        if self.run_dir is None:
            return
        for name in ("metrics.csv", "timings.csv"):
            path = self.run_dir / name
            lines = path.read_text().splitlines(keepends=True)
            keep = [lines[0]] + [ln for ln in lines[1:]
                                 if not (ln.split(",")[1] == phase and int(ln.split(",")[0]) > step)]
            path.write_text("".join(keep))


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -------------------------------------------------------------- evaluation


def decode_corpus(gen: Generator, sources: Sequence[Sequence[int]], decoder: str = "greedy",
                  beam_size: int = 10, chunk: int = 512) -> list[list[int]]:
    """Translations (ids, specials stripped) for a list of sources."""
    if decoder == "beam":
        return [strip_special(gen.beam_search(s, beam_size)) for s in sources]
    out = []
    for s in range(0, len(sources), chunk):
        toks = gen.sample(pad_batch([list(x) for x in sources[s:s + chunk]]), "greedy")
        out.extend(strip_special(row) for row in toks)
    return out


def dev_pairs(corpus: Corpus, cfg: TrainConfig) -> list[SentencePair]:
    if not corpus.dev:
        raise ValueError("dev set is empty")
    return corpus.dev[:cfg.dev_eval_size] if cfg.dev_eval_size > 0 else list(corpus.dev)


def evaluate_bleu(gen: Generator, pairs: Sequence[SentencePair], decoder: str = "greedy",
                  beam_size: int = 10) -> float:
    hyps = decode_corpus(gen, [p.source for p in pairs], decoder, beam_size)
    return corpus_bleu(hyps, [p.target for p in pairs]).value


# -------------------------------------------------------------- pretraining


def _mle_batches(pairs, cfg: TrainConfig, T: int):
    """Endless stream of (step, batch), reshuffled every epoch from the run seed."""
    epoch = 0
    while True:
        for b in make_batches(pairs, cfg.mle_batch, T, shuffle_seed=cfg.seed * 1_000_003 + epoch):
            yield b
        epoch += 1


def pretrain_generator(gen: Generator, corpus: Corpus, cfg: TrainConfig, run_dir: Path | None = None,
                       frozen: bool = False) -> PhaseResult:
    """MLE training with periodic dev BLEU; stops after ``patience`` evaluations
    without improvement and leaves the best parameters loaded in ``gen``.

    ``frozen`` evaluates without updating (used to test the stopping rule).
    """
    dev = dev_pairs(corpus, cfg)
    opt = Optimizer(gen.params, cfg.optimizer_config(cfg.pretrain_lr))
    writer = MetricsWriter(run_dir)
    state = TrainState(phase="gen-pretrain")
    best = gen.state_dict()
    batches = _mle_batches(corpus.train, cfg, gen.config.t_max)
    t0 = time.perf_counter()
    while state.step < cfg.pretrain_max_steps:
        batch = next(batches)
        if not frozen:
            mle_step(gen, batch, opt)
            state.g_steps += 1
        state.step += 1
        if state.step % cfg.pretrain_eval_interval:
            continue
        bleu = evaluate_bleu(gen, dev, cfg.eval_decoder, cfg.beam_size)
        writer.row(state.step, "gen-pretrain", dev_bleu=bleu, wall_seconds=time.perf_counter() - t0)
        log.info("gen-pretrain step %d dev BLEU %.4f", state.step, bleu)
        if state.record(state.step, bleu):
            best = gen.state_dict()
        if state.since_improvement >= cfg.patience:
            break
    gen.load_state_dict(best)
    if run_dir is not None:
        save_checkpoint(run_dir / "gen_pretrained.ckpt", best)
        (run_dir / "gen_pretrained.json").write_text(state.to_json())
    return PhaseResult(state, run_dir)


def generate_negatives(gen: Generator, pairs: Sequence[SentencePair], count: int,
                       rng: np.random.Generator) -> list[MachinePair]:
    """``count`` pairs (X, greedy(X)) over sources drawn without replacement,
    cycling through fresh permutations when the corpus is smaller than ``count``."""
    if not pairs:
        raise ValueError("generate_negatives: no sources")
    if count < 1:
        raise ValueError("generate_negatives: count must be >= 1")
    idx: list[int] = []
    while len(idx) < count:
        idx.extend(rng.permutation(len(pairs))[:count - len(idx)].tolist())
    sources = [pairs[i].source for i in idx]
    out = []
    for s in range(0, count, 512):
        chunk = sources[s:s + 512]
        toks = gen.sample(pad_batch([list(x) for x in chunk]), "greedy")
        for src, row in zip(chunk, toks):
            out.append(MachinePair(tuple(src), tuple(int(t) for t in row if t != PAD)))
    return out


def _split_holdout(items: list, frac: float = 0.1) -> tuple[list, list]:
    n = max(1, int(round(len(items) * frac)))
    return items[n:], items[:n]


def pretrain_discriminator(disc: Discriminator, real: Sequence[SentencePair], fake: Sequence[MachinePair],
                           xi: float, cfg: TrainConfig, run_dir: Path | None = None,
                           raise_on_cap: bool = True) -> PhaseResult:
    """Balanced disc steps until held-out accuracy reaches ``xi`` or the step cap.

    The held-out set is a balanced 50/50 split taken from the front of both
    pools. Reaching the cap raises :class:`GateNotReached` unless
    ``raise_on_cap`` is False, in which case the shortfall is logged and the
    achieved accuracy returned.
    """
    if not real or not fake:
        raise ValueError("pretrain_discriminator: both pools must be non-empty")
    real_train, real_hold = _split_holdout(list(real))
    fake_train, fake_hold = _split_holdout(list(fake))
    n = min(len(real_hold), len(fake_hold))
    hold = real_hold[:n] + fake_hold[:n]
    labels = [1] * n + [0] * n
    if not real_train or not fake_train:
        real_train, fake_train = list(real), list(fake)
    opt = Optimizer(disc.params, cfg.optimizer_config(cfg.disc_pretrain_lr))
    writer = MetricsWriter(run_dir)
    state = TrainState(phase="disc-pretrain")
    acc = accuracy(disc, hold, labels)
    t0 = time.perf_counter()
    while acc < xi:
        if state.step >= cfg.disc_step_cap:
            if raise_on_cap:
                raise GateNotReached(acc, state.step, xi)
            log.warning("discriminator gate xi=%.3f not reached: accuracy %.4f after %d steps",
                        xi, acc, state.step)
            break
        rng = step_rng(cfg.seed, "disc-pretrain", state.step)
        k = min(cfg.disc_batch, len(real_train), len(fake_train))
        rb = [real_train[i] for i in rng.choice(len(real_train), k, replace=False)]
        fb = [fake_train[i] for i in rng.choice(len(fake_train), k, replace=False)]
        disc_step(disc, rb, fb, opt)
        state.step += 1
        state.d_steps += 1
        if state.step % cfg.disc_eval_every == 0 or state.step >= cfg.disc_step_cap:
            acc = accuracy(disc, hold, labels)
            writer.row(state.step, "disc-pretrain", disc_accuracy=acc, wall_seconds=time.perf_counter() - t0)
    if run_dir is not None:
        save_checkpoint(run_dir / "disc_pretrained.ckpt", disc.state_dict())
        (run_dir / "disc_pretrained.json").write_text(json.dumps({"accuracy": acc, "steps": state.step, "xi": xi}))
    return PhaseResult(state, run_dir, acc)


# -------------------------------------------------------- adversarial loop


def _sample_pairs(pairs: Sequence, k: int, rng: np.random.Generator) -> list:
    k = min(k, len(pairs))
    return [pairs[i] for i in rng.choice(len(pairs), k, replace=False)]


def _save_state(run_dir: Path, name: str, gen: Generator, disc: Discriminator | None,
                opts: dict[str, Optimizer], state: TrainState) -> None:
    entries = dict(gen.state_dict())
    if disc is not None:
        entries.update(disc.state_dict())
    for key, opt in opts.items():
        entries.update(opt.state_dict(f"opt.{key}."))
    save_checkpoint(run_dir / f"{name}.ckpt", entries)
    (run_dir / f"{name}.json").write_text(state.to_json())


def _load_state(run_dir: Path, name: str, gen: Generator, disc: Discriminator | None,
                opts: dict[str, Optimizer]) -> TrainState:
    entries = load_checkpoint(run_dir / f"{name}.ckpt")
    gen.load_state_dict(entries)
    if disc is not None:
        disc.load_state_dict(entries)
    for key, opt in opts.items():
        opt.load_state_dict(entries, f"opt.{key}.")
    return TrainState.from_json((run_dir / f"{name}.json").read_text())


def _eval_disc_accuracy(gen: Generator, disc: Discriminator, dev: Sequence[SentencePair]) -> float:
    fakes = generate_negatives(gen, dev, len(dev), np.random.default_rng(0))
    pairs = list(dev) + fakes
    return accuracy(disc, pairs, [1] * len(dev) + [0] * len(fakes))


def _check_divergence(value: float, cfg: TrainConfig, run_dir, gen, disc, opts, state) -> None:
    if math.isfinite(value) and abs(value) <= cfg.divergence_bound:
        return
    if run_dir is not None:
        _save_state(run_dir, "abort", gen, disc, opts, state)
    raise TrainingDiverged(f"step {state.step}: mean reward {value} outside +-{cfg.divergence_bound}")


def adversarial_loop(gen: Generator, disc: Discriminator, corpus: Corpus, cfg: TrainConfig,
                     run_dir: Path | None = None, resume: bool = False,
                     on_iteration: Callable[[TrainState, Generator, Discriminator], None] | None = None
                     ) -> PhaseResult:
    """Alternate policy-gradient, teacher-forcing and discriminator updates.

    One iteration: PG step on a sampled batch, one teacher-forcing step on a
    fresh batch, regenerate ``eta`` negatives with the updated generator, one
    disc step on a balanced batch, clip D to [-epsilon, epsilon]. Dev BLEU is
    measured every ``eval_interval`` iterations; the best generator is saved
    to ``gen_best.ckpt`` and the full state to ``state.ckpt`` for resuming.
    """
    cfg.validate()
    if disc.config.epsilon != cfg.epsilon:
        disc.config = replace(disc.config, epsilon=cfg.epsilon)
    dev = dev_pairs(corpus, cfg)
    rcfg = cfg.reward_config(gen.config.t_max)
    g_opt = Optimizer(gen.params, cfg.optimizer_config(cfg.adv_lr))
    d_opt = Optimizer(disc.params, cfg.optimizer_config(cfg.disc_lr))
    opts = {"gen": g_opt, "disc": d_opt}
    writer = MetricsWriter(run_dir)
    if resume:
        if run_dir is None or not (run_dir / "state.ckpt").exists():
            raise FileNotFoundError("resume requested but no state checkpoint found")
        state = _load_state(run_dir, "state", gen, disc, opts)
        writer.truncate_after(state.step, "adversarial")
    else:
        state = TrainState(phase="adversarial")
    train = corpus.train
    t0 = time.perf_counter()
    try:
        while state.step < cfg.max_steps and state.since_improvement < cfg.patience:
            i = state.step + 1
            pg_pairs = _sample_pairs(train, cfg.pg_batch, step_rng(cfg.seed, "adversarial", i, 0))
            diag = policy_gradient_step(gen, disc, [p.source for p in pg_pairs], [p.target for p in pg_pairs],
                                        rcfg, step_rng(cfg.seed, "adversarial", i, 1), g_opt, cfg.normalize)
            state.g_steps += 1
            tf_pairs = _sample_pairs(train, cfg.pg_batch, step_rng(cfg.seed, "adversarial", i, 2))
            teacher_forcing_step(gen, [p.source for p in tf_pairs], [p.target for p in tf_pairs], g_opt)
            state.tf_steps += 1
            negatives = generate_negatives(gen, train, cfg.eta, step_rng(cfg.seed, "adversarial", i, 3))
            drng = step_rng(cfg.seed, "adversarial", i, 4)
            k = min(cfg.disc_batch, len(negatives))
            disc_step(disc, _sample_pairs(train, k, drng), _sample_pairs(negatives, k, drng), d_opt)
            state.d_steps += 1
            state.step = i
            if disc.params.max_abs() > cfg.epsilon:
                raise AssertionError(f"clip invariant violated at step {i}")
            if not state.g_steps == state.tf_steps == state.d_steps:
                raise AssertionError(f"schedule invariant violated at step {i}")
            _check_divergence(diag.mean_reward, cfg, run_dir, gen, disc, opts, state)
            acc = bleu = None
            if i % cfg.eval_interval == 0:
                bleu = evaluate_bleu(gen, dev, cfg.eval_decoder, cfg.beam_size)
                acc = _eval_disc_accuracy(gen, disc, dev)
                if state.record(i, bleu) and run_dir is not None:
                    save_checkpoint(run_dir / "gen_best.ckpt", gen.state_dict())
                    (run_dir / "gen_best.json").write_text(json.dumps({"step": i, "dev_bleu": bleu}))
                log.info("adversarial step %d dev BLEU %.4f disc acc %.3f reward %.4f",
                         i, bleu, acc, diag.mean_reward)
            writer.row(i, "adversarial", diag.mean_reward, diag.reward_variance, acc, bleu,
                       wall_seconds=time.perf_counter() - t0)
            if bleu is not None and run_dir is not None:
                _save_state(run_dir, "state", gen, disc, opts, state)
            if on_iteration is not None:
                on_iteration(state, gen, disc)
    except NonFiniteError as exc:
        if run_dir is not None:
            _save_state(run_dir, "abort", gen, disc, opts, state)
        raise TrainingDiverged(f"non-finite value at step {state.step + 1}: {exc}") from exc
    return PhaseResult(state, run_dir)


# ------------------------------------------------------------------- MRT


def mrt_loss(gen: Generator, sources: Sequence[Sequence[int]], references: Sequence[Sequence[int]],
             sample_size: int, alpha: float, rng: np.random.Generator) -> tuple:
    """Expected risk over a sampled subset per source, with subset-renormalised
    sharpened probabilities q ∝ p^alpha and risk 1 - sentence BLEU.

    Returns (loss Tensor, mean risk) with the loss averaged over sources.
    """
    if sample_size < 2:
        raise ValueError("mrt: sample_size must be >= 2")
    t_max = gen.config.t_max
    src = pad_batch([list(s) for s in sources])
    rows = np.repeat(np.arange(len(sources)), sample_size)
    with no_grad():
        toks = gen.sample(src[rows], "multinomial", t_max, rng)
    subsets: list[list[tuple[int, ...]]] = [[] for _ in sources]
    for r, row in zip(rows, toks):
        seq = tuple(int(t) for t in row if t != PAD)
        if seq not in subsets[r]:
            subsets[r].append(seq)
    width = max(len(s) for s in subsets)
    flat_rows, flat_seqs, slot = [], [], np.zeros((len(sources), width), dtype=bool)
    risk = np.zeros((len(sources), width))
    for r, subset in enumerate(subsets):
        for j, seq in enumerate(subset):
            flat_rows.append(r)
            flat_seqs.append(list(seq))
            slot[r, j] = True
            risk[r, j] = 1.0 - sentence_bleu(seq, references[r]).value
    lp = gen.sequence_log_prob(src[flat_rows], pad_batch(flat_seqs), require_eos=False)
    # scatter per-sequence log-probs into a (sources, width) grid
    place = np.zeros((len(flat_rows), len(sources) * width))
    place[np.arange(len(flat_rows)), np.flatnonzero(slot.reshape(-1))] = 1.0
    grid = ops.reshape(ops.reshape(ops.scale(lp, alpha), (1, -1)) @ Tensor(place), (len(sources), width))
    q = ops.softmax(grid, mask=slot)
    loss = ops.scale(ops.sum(ops.mul(q, risk)), 1.0 / len(sources))
    return loss, float(np.sum(q.data * risk) / len(sources))


def mrt_baseline(gen: Generator, corpus: Corpus, cfg: TrainConfig, run_dir: Path | None = None) -> PhaseResult:
    """Minimum-risk fine-tuning of a pretrained generator with the same
    evaluation cadence, patience and step budget as the adversarial loop."""
    dev = dev_pairs(corpus, cfg)
    opt = Optimizer(gen.params, cfg.optimizer_config(cfg.adv_lr))
    writer = MetricsWriter(run_dir)
    state = TrainState(phase="mrt")
    t0 = time.perf_counter()
    while state.step < cfg.max_steps and state.since_improvement < cfg.patience:
        i = state.step + 1
        pairs = _sample_pairs(corpus.train, cfg.pg_batch, step_rng(cfg.seed, "mrt", i, 0))
        loss, risk = mrt_loss(gen, [p.source for p in pairs], [p.target for p in pairs],
                              cfg.mrt_sample_size, cfg.mrt_alpha, step_rng(cfg.seed, "mrt", i, 1))
        backward(loss, gen.params)
        opt.step()
        state.g_steps += 1
        state.step = i
        bleu = None
        if i % cfg.eval_interval == 0:
            bleu = evaluate_bleu(gen, dev, cfg.eval_decoder, cfg.beam_size)
            if state.record(i, bleu) and run_dir is not None:
                save_checkpoint(run_dir / "gen_best.ckpt", gen.state_dict())
                (run_dir / "gen_best.json").write_text(json.dumps({"step": i, "dev_bleu": bleu}))
        writer.row(i, "mrt", 1.0 - risk, None, None, bleu, wall_seconds=time.perf_counter() - t0)
    return PhaseResult(state, run_dir)


# ----------------------------------------------------------------- sweeps

XI_GRID = (0.6, 0.7, 0.8, 0.9, 0.95)
N_GRID = (0, 5, 10, 15, 20, 25, 30)


def disc_pools(gen: Generator, corpus: Corpus, cfg: TrainConfig) -> tuple[list[SentencePair], list[MachinePair]]:
    """Real and machine pairs over the same sampled training sources."""
    rng = step_rng(cfg.seed, "negatives", 0)
    fake = generate_negatives(gen, corpus.train, min(cfg.disc_pool, len(corpus.train)), rng)
    by_src = {p.source: p for p in corpus.train}
    return [by_src[m.source] for m in fake], fake


def run_sweeps(kind: str, gen_entries: dict, make_gen: Callable[[], Generator],
               make_disc: Callable[[], Discriminator], corpus: Corpus, cfg: TrainConfig, run_dir: Path,
               grid: Sequence[float] | None = None, disc_entries: dict | None = None) -> list[dict]:
    """Adversarial runs per grid point from the same pretrained generator.

    ``kind="xi"`` pretrains a fresh discriminator to each gate; ``kind="n"``
    shares one discriminator (``disc_entries`` or gated at ``cfg.xi``) and
    varies the rollout count, with N=0 standing for the pretrained generator.
    Writes one metrics CSV per point and ``summary.csv``.
    """
    if kind not in ("xi", "n"):
        raise ValueError(f"unknown sweep kind {kind!r}")
    grid = tuple(grid) if grid is not None else (XI_GRID if kind == "xi" else N_GRID)
    if not grid:
        raise ValueError("sweep grid is empty")
    run_dir.mkdir(parents=True, exist_ok=False)
    dev = dev_pairs(corpus, cfg)
    base = make_gen()
    base.load_state_dict(gen_entries)
    baseline_bleu = evaluate_bleu(base, dev, cfg.eval_decoder, cfg.beam_size)
    real, fake = disc_pools(base, corpus, cfg)
    rows = []
    for value in grid:
        point = run_dir / f"{kind}-{value}"
        point.mkdir()
        gen = make_gen()
        gen.load_state_dict(gen_entries)
        disc = make_disc()
        gate_acc = None
        if kind == "xi":
            gate_acc = pretrain_discriminator(disc, real, fake, float(value), cfg, point, raise_on_cap=False).accuracy
            pcfg = cfg
        else:
            if disc_entries is not None:
                disc.load_state_dict(disc_entries)
            else:
                gate_acc = pretrain_discriminator(disc, real, fake, cfg.xi, cfg, point, raise_on_cap=False).accuracy
            pcfg = replace(cfg, n_rollouts=max(int(value), 1))
        if kind == "n" and int(value) == 0:
            MetricsWriter(point).row(0, "adversarial", dev_bleu=baseline_bleu)
            best, best_step = baseline_bleu, 0
        else:
            res = adversarial_loop(gen, disc, corpus, pcfg, point)
            best, best_step = res.state.best_bleu, res.state.best_step
        rows.append({"kind": kind, "value": value, "best_dev_bleu": best, "best_step": best_step,
                     "baseline_dev_bleu": baseline_bleu, "disc_accuracy": gate_acc})
    with open(run_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows
