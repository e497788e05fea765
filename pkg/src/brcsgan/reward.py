"""Rewards, Monte Carlo search and the policy-gradient machinery.

The reward of a finished translation Y of source X with reference Y* is

    R = lam * (D(X, Y) - b) + (1 - lam) * Q(Y, Y*)

with D evaluated in eval mode and Q the smoothed sentence BLEU. A prefix that
has not finished is scored by completing it ``n_rollouts`` times under the
current policy and averaging the finished rewards. Rewards are constants with
respect to the generator parameters.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .bleu import sentence_bleu
from .corpus import EOS, PAD, pad_batch
from .discriminator import Discriminator
from .generator import DecodeState, Generator
from .numerics import Optimizer, Tensor, backward, no_grad
from .numerics import ops


@dataclass
class RewardConfig:
    lam: float = 0.7
    baseline: float = 0.5
    n_rollouts: int = 20
    t_max: int = 20

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.n_rollouts < 1:
            raise ValueError("n_rollouts must be >= 1")


def mix_reward(d_prob, bleu, cfg: RewardConfig):
    """lam * (D - b) + (1 - lam) * Q, elementwise."""
    return cfg.lam * (np.asarray(d_prob) - cfg.baseline) + (1.0 - cfg.lam) * np.asarray(bleu)


def is_finished(seq: Sequence[int], t_max: int) -> bool:
    return len(seq) >= t_max or (len(seq) > 0 and seq[-1] == EOS)


class RewardModel:
    """Scores finished sequences for a fixed list of (source, reference) pairs.

    D is frozen while a model is alive; terminal rewards are cached per
    (source index, sequence).
    """

    def __init__(self, disc: Discriminator | None, sources: Sequence[Sequence[int]],
                 references: Sequence[Sequence[int]], cfg: RewardConfig):
        self.disc = disc
        self.cfg = cfg
        self.references = [tuple(r) for r in references]
        self.cache: dict[tuple[int, tuple[int, ...]], tuple[float, float]] = {}
        self.src_feats = None
        if disc is not None and cfg.lam > 0:
            self.src_padded = pad_batch([list(s) for s in sources], disc.config.T)
            self.src_feats = disc.source_features(self.src_padded)

    def components(self, rows: Sequence[int], seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        """(D probability, BLEU) for each finished sequence; D is 0.5 when unused."""
        keys = [(int(r), tuple(int(t) for t in s)) for r, s in zip(rows, seqs)]
        missing = list(dict.fromkeys(k for k in keys if k not in self.cache))
        if missing:
            if self.src_feats is not None:
                T = self.disc.config.T
                tgt = pad_batch([list(k[1]) for k in missing], T)
                feats = Tensor(self.src_feats.data[[k[0] for k in missing]])
                d = self.disc.predict_prob(None, tgt, "eval", source_features=feats)
            else:
                d = np.full(len(missing), 0.5)
            for k, dk in zip(missing, d):
                q = sentence_bleu(k[1], self.references[k[0]]).value if self.cfg.lam < 1 else 0.0
                self.cache[k] = (float(dk), q)
        vals = np.array([self.cache[k] for k in keys]).reshape(-1, 2)
        return vals[:, 0], vals[:, 1]

    def terminal(self, rows: Sequence[int], seqs: Sequence[Sequence[int]]) -> np.ndarray:
        d, q = self.components(rows, seqs)
        return mix_reward(d, q, self.cfg)


def terminal_reward(disc: Discriminator | None, source, seq, reference, cfg: RewardConfig) -> float:
    if not is_finished(list(seq), cfg.t_max):
        raise ValueError("terminal_reward: sequence is not finished")
    return float(RewardModel(disc, [source], [reference], cfg).terminal([0], [seq])[0])


# ----------------------------------------------------------------- rollouts


@dataclass
class RolloutSet:
    prefix: tuple[int, ...]
    sequences: list[tuple[int, ...]]


def _prefix_states(gen: Generator, source: np.ndarray, prefixes: np.ndarray):
    """Encode sources and teacher-force the prefixes; returns (enc, state after the last prefix token)."""
    enc = gen.encode(source)
    state = gen.initial_state(enc)
    for t in range(prefixes.shape[1]):
        _, state = gen.decode_step(state, enc)
        state = gen.advance(state, prefixes[:, t])
    return enc, state


def complete_sequences(gen: Generator, enc, state: DecodeState, prefixes: Sequence[Sequence[int]],
                       rows: np.ndarray, n: int, rng: np.random.Generator, t_max: int,
                       chunk: int = 4096) -> list[tuple[int, ...]]:
    """n multinomial completions of each prefix, starting from its decoder state.

    ``rows[i]`` selects the encoder row and state row for prefix ``i``. The
    result lists the n completions of prefix 0 first, then prefix 1, etc.
    """
    rows = np.repeat(np.asarray(rows), n)
    plen = np.repeat([len(p) for p in prefixes], n)
    owners = np.repeat(np.arange(len(prefixes)), n)
    out: list[tuple[int, ...]] = []
    with no_grad():
        for s in range(0, len(rows), chunk):
            r = rows[s:s + chunk]
            sub_enc = enc.take(r)
            st = DecodeState(Tensor(state.hidden.data[r]), state.prev[r], 0)
            steps = t_max - int(plen[s:s + chunk].min())
            gen_toks, _ = gen.continue_decoding(sub_enc, st, steps, "multinomial", rng,
                                                start_len=plen[s:s + chunk], max_len=t_max)
            for i, toks in enumerate(gen_toks):
                tail = [int(t) for t in toks if t != PAD]
                out.append(tuple(prefixes[owners[s + i]]) + tuple(tail))
    return out


def mc_rollouts(gen: Generator, source: Sequence[int], prefix: Sequence[int], n: int,
                rng: np.random.Generator, t_max: int | None = None) -> RolloutSet:
    t_max = gen.config.t_max if t_max is None else t_max
    prefix = [int(t) for t in prefix]
    if not prefix:
        raise ValueError("mc_rollouts: empty prefix")
    if is_finished(prefix, t_max):
        raise ValueError("mc_rollouts: prefix already finished")
    with no_grad():
        enc, state = _prefix_states(gen, np.asarray([source]), np.asarray([prefix]))
        seqs = complete_sequences(gen, enc, state, [prefix], np.array([0]), n, rng, t_max)
    return RolloutSet(tuple(prefix), seqs)


def intermediate_reward(gen: Generator, disc: Discriminator | None, source, prefix, reference,
                        cfg: RewardConfig, rng: np.random.Generator, model: RewardModel | None = None) -> float:
    """Reward of a (possibly unfinished) prefix: terminal if finished, else mean over rollouts."""
    model = model or RewardModel(disc, [source], [reference], cfg)
    prefix = tuple(int(t) for t in prefix)
    if is_finished(prefix, cfg.t_max):
        return float(model.terminal([0], [prefix])[0])
    rs = mc_rollouts(gen, source, prefix, cfg.n_rollouts, rng, cfg.t_max)
    return float(np.mean(model.terminal([0] * len(rs.sequences), rs.sequences)))


# ------------------------------------------------------- sequence rewards


def sample_with_states(gen: Generator, source: np.ndarray, rng: np.random.Generator, t_max: int):
    """Multinomial samples (as tuples) plus the encoder and per-step decoder states."""
    with no_grad():
        enc = gen.encode(source)
        state = gen.initial_state(enc)
        toks, states = gen.continue_decoding(enc, state, t_max, "multinomial", rng,
                                             record_states=True, max_len=t_max)
    seqs = [tuple(int(t) for t in row if t != PAD) for row in toks]
    return seqs, enc, states


def reward_matrix(gen: Generator, model: RewardModel, seqs, enc, states, rng: np.random.Generator,
                  cfg: RewardConfig, record: dict | None = None) -> np.ndarray:
    """R[b, t] for every position of every sampled sequence (0 beyond its length).

    If ``record`` is given it receives the completions behind each
    intermediate value, keyed by (b, t) with t the 0-based position.
    """
    B = len(seqs)
    L = max(len(s) for s in seqs)
    R = np.zeros((B, L))
    final = model.terminal(range(B), seqs)
    prefixes, owners, positions = [], [], []
    for b, s in enumerate(seqs):
        R[b, len(s) - 1] = final[b]
        for t in range(1, len(s)):
            prefixes.append(s[:t])
            owners.append(b)
            positions.append(t)
    if prefixes:
        # group by prefix length so each group starts from one recorded state
        by_len: dict[int, list[int]] = {}
        for i, t in enumerate(positions):
            by_len.setdefault(t, []).append(i)
        for t in sorted(by_len):
            idx = by_len[t]
            st = states[t - 1]
            done = complete_sequences(gen, enc, st, [prefixes[i] for i in idx],
                                      np.array([owners[i] for i in idx]), cfg.n_rollouts, rng, cfg.t_max)
            rewards = model.terminal(np.repeat([owners[i] for i in idx], cfg.n_rollouts), done)
            means = rewards.reshape(len(idx), cfg.n_rollouts).mean(axis=1)
            for j, i in enumerate(idx):
                R[owners[i], t - 1] = means[j]
                if record is not None:
                    n = cfg.n_rollouts
                    record[(owners[i], t - 1)] = done[j * n:(j + 1) * n]
    return R


def reinforce_loss(gen: Generator, source: np.ndarray, seqs, rewards: np.ndarray, normalize: str = "sentence") -> Tensor:
    """-(1/B) sum_b w_b sum_t R[b,t] log p(y_t | y_<t, X); w_b = 1/len(y_b) or 1."""
    if normalize not in ("sentence", "none"):
        raise ValueError(f"unknown normalisation {normalize!r}")
    target = pad_batch([list(s) for s in seqs])
    lp = gen.token_log_probs(source, target)
    L = lp.shape[1]
    R = np.zeros((len(seqs), L))
    R[:, :min(L, rewards.shape[1])] = rewards[:, :L]
    if normalize == "sentence":
        R = R / np.array([len(s) for s in seqs], dtype=np.float64)[:, None]
    return ops.scale(ops.sum(ops.mul(lp, R)), -1.0 / len(seqs))


@dataclass
class PGDiagnostics:
    mean_reward: float
    reward_variance: float
    mean_length: float
    samples: list
    rewards: np.ndarray
    gradient: np.ndarray | None = None
    rollouts: dict | None = None


def policy_gradient_step(gen: Generator, disc: Discriminator | None, sources: Sequence[Sequence[int]],
                         references: Sequence[Sequence[int]], cfg: RewardConfig, rng: np.random.Generator,
                         optimizer: Optimizer | None, normalize: str = "sentence",
                         keep_gradient: bool = False) -> PGDiagnostics:
    """Sample, score every position by Monte Carlo search, and take one ascent step on J.

    With ``optimizer=None`` the gradient is left in ``gen.params.grads``
    (as the gradient of the loss, i.e. -grad J) and no update is applied.
    ``keep_gradient`` also copies that gradient and the rollouts behind every
    intermediate reward into the diagnostics.
    """
    src = pad_batch([list(s) for s in sources])
    model = RewardModel(disc, sources, references, cfg)
    seqs, enc, states = sample_with_states(gen, src, rng, cfg.t_max)
    rollouts = {} if keep_gradient else None
    R = reward_matrix(gen, model, seqs, enc, states, rng, cfg, rollouts)
    loss = reinforce_loss(gen, src, seqs, R, normalize)
    backward(loss, gen.params)
    grad = gen.params.flat_grads().copy() if keep_gradient else None
    if optimizer is not None:
        _step_unless_zero(gen, optimizer)
    valid = np.concatenate([R[b, :len(s)] for b, s in enumerate(seqs)])
    return PGDiagnostics(float(valid.mean()), float(valid.var()), float(np.mean([len(s) for s in seqs])),
                         seqs, R, grad, rollouts)


def _step_unless_zero(gen: Generator, optimizer: Optimizer) -> None:
    # an all-zero gradient carries no signal; skip so adaptive momentum cannot move parameters
    if not any(np.any(g) for g in gen.params.grads.values()):
        gen.params.zero_grad()
        return
    optimizer.step()


def teacher_forcing_step(gen: Generator, sources, targets, optimizer: Optimizer | None, reward: float = 1.0) -> float:
    """Reward-weighted likelihood update on human pairs (reward 1 at every position, no baseline)."""
    src = pad_batch([list(s) for s in sources])
    seqs = [tuple(t) for t in targets]
    R = np.full((len(seqs), max(len(s) for s in seqs)), float(reward))
    loss = reinforce_loss(gen, src, seqs, R, "sentence")
    value = loss.item()
    backward(loss, gen.params)
    if optimizer is not None:
        _step_unless_zero(gen, optimizer)
    return value


# -------------------------------------------------------------- enumeration


def enumerate_sequences(tokens: Sequence[int], t_max: int, limit: int = 20000) -> list[tuple[int, ...]]:
    """Every finished sequence over ``tokens``: EOS-terminated with length <= t_max, or length t_max."""
    tokens = sorted(int(t) for t in tokens)
    content = [t for t in tokens if t != EOS]
    total = sum(len(content) ** (n - 1) for n in range(1, t_max + 1)) + len(content) ** t_max
    if total > limit:
        raise ValueError(f"sequence space of {total} exceeds the enumeration limit {limit}")
    out = []
    for n in range(1, t_max + 1):
        for body in itertools.product(content, repeat=n - 1):
            out.append(tuple(body) + (EOS,))
    out.extend(itertools.product(content, repeat=t_max))
    return out


def _enumeration(gen: Generator, disc, source, reference, cfg: RewardConfig, limit: int):
    tokens = np.flatnonzero(gen.vocab_mask)
    seqs = enumerate_sequences(tokens, cfg.t_max, limit)
    rewards = RewardModel(disc, [source], [reference], cfg).terminal([0] * len(seqs), seqs)
    src = np.repeat(np.asarray([source]), len(seqs), axis=0)
    return seqs, rewards, src


def sequence_probabilities(gen: Generator, source, seqs) -> np.ndarray:
    src = np.repeat(np.asarray([source]), len(seqs), axis=0)
    with no_grad():
        lp = gen.sequence_log_prob(src, pad_batch([list(s) for s in seqs]), require_eos=False).data
    return np.exp(lp)


def exact_prefix_values(gen: Generator, disc, source, reference, cfg: RewardConfig,
                        limit: int = 20000) -> dict[tuple[int, ...], float]:
    """E[terminal reward | prefix] for every prefix in the enumerable space."""
    seqs, rewards, _ = _enumeration(gen, disc, source, reference, cfg, limit)
    p = sequence_probabilities(gen, source, seqs)
    mass: dict[tuple[int, ...], float] = {}
    value: dict[tuple[int, ...], float] = {}
    for s, pr, r in zip(seqs, p, rewards):
        for t in range(1, len(s) + 1):
            k = s[:t]
            mass[k] = mass.get(k, 0.0) + pr
            value[k] = value.get(k, 0.0) + pr * r
    return {k: value[k] / mass[k] for k in mass if mass[k] > 0}


def exact_expected_gradient(gen: Generator, disc, source, reference, cfg: RewardConfig,
                            normalize: str | None = None, limit: int = 20000) -> np.ndarray:
    """Exact gradient by full enumeration of the sequence space (flat, parameter order).

    ``normalize=None`` gives grad J for J = sum_Y p(Y) R(Y). ``"sentence"``
    and ``"none"`` instead give the exact expectation of the sampled
    estimator with that normalisation (``"none"`` coincides with grad J).
    """
    seqs, rewards, src = _enumeration(gen, disc, source, reference, cfg, limit)
    gen.params.zero_grad()
    target = pad_batch([list(s) for s in seqs])
    if normalize is None:
        lp = gen.sequence_log_prob(src, target, require_eos=False)
        J = ops.sum(ops.mul(ops.exp(lp), rewards))
        backward(J, gen.params)
    else:
        values = exact_prefix_values(gen, disc, source, reference, cfg, limit)
        p = sequence_probabilities(gen, source, seqs)
        lp = gen.token_log_probs(src, target)
        W = np.zeros(lp.shape)
        for i, s in enumerate(seqs):
            w = p[i] / (len(s) if normalize == "sentence" else 1.0)
            for t in range(len(s)):
                W[i, t] = w * values[s[:t + 1]]
        backward(ops.sum(ops.mul(lp, W)), gen.params)
    grad = gen.params.flat_grads().copy()
    gen.params.zero_grad()
    return grad


def expected_return(gen: Generator, disc, source, reference, cfg: RewardConfig, limit: int = 20000) -> float:
    """J = sum_Y p(Y) R(Y) by enumeration (no gradient)."""
    seqs, rewards, _ = _enumeration(gen, disc, source, reference, cfg, limit)
    return float(np.dot(sequence_probabilities(gen, source, seqs), rewards))
