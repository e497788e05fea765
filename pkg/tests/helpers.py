"""Small model and data factories shared by the test modules."""

from __future__ import annotations

import math

import numpy as np

from brcsgan.corpus import EOS, PAD, pad_batch
from brcsgan.discriminator import Discriminator, DiscriminatorConfig
from brcsgan.generator import Generator, GeneratorConfig


def tiny_generator(vocab=7, seed=0, scale=1.0, t_max=6, banned=None) -> Generator:
    kw = {} if banned is None else {"banned": banned}
    return Generator(GeneratorConfig(vocab_size=vocab, emb_dim=3, hidden=3, att_dim=3, t_max=t_max,
                                     init_scale=scale, seed=seed, **kw))


def tiny_discriminator(vocab=7, seed=0, scale=1.0, T=4, windows=(1, 2), epsilon=1.0) -> Discriminator:
    return Discriminator(DiscriminatorConfig(vocab_size=vocab, emb_dim=3, windows=windows, kernels=2, T=T,
                                             init_scale=scale, epsilon=epsilon, seed=seed))


def random_sources(rng: np.random.Generator, n: int, vocab: int, lo: int = 2, hi: int = 4) -> list[list[int]]:
    return [list(rng.integers(4, vocab, size=rng.integers(lo, hi + 1))) for _ in range(n)]


def random_targets(rng: np.random.Generator, n: int, vocab: int, hi: int = 3) -> list[list[int]]:
    return [list(rng.integers(4, vocab, size=rng.integers(0, hi + 1))) + [EOS] for _ in range(n)]


def padded(seqs, T=None) -> np.ndarray:
    return pad_batch(seqs, T)


# ------------------------------------------------------------ gradient checks

GRADIENT_COMPONENTS = ("encoder", "attention", "decoder", "discriminator")


def _component_loss(component: str, seed: int):
    """(loss closure, params) for one randomized finite-difference instance."""
    from brcsgan.numerics import ops

    r = np.random.default_rng(1000 + seed)
    if component == "discriminator":
        d = tiny_discriminator(seed=seed, windows=(1, 2, 3))
        n = 3
        rs, rt = padded(random_sources(r, n, 7), 4), padded(random_targets(r, n, 7), 4)
        fs, ft = padded(random_sources(r, n, 7), 4), padded(random_targets(r, n, 7), 4)
        return (lambda: d.loss(rs, rt, fs, ft)), d.params
    g = tiny_generator(seed=seed)
    src = padded(random_sources(r, 2, 7))
    if component == "encoder":
        w = r.normal(size=(2, src.shape[1], 6))
        return (lambda: ops.sum(ops.mul(ops.tanh(g.encode(src).annotations), w))), _subset(g.params, ("src_emb", "enc_"))
    if component == "attention":
        h = r.normal(size=(2, 3))
        w = r.normal(size=(2, 6))
        wa = r.normal(size=(2, src.shape[1]))

        def attn():
            from brcsgan.numerics import Tensor
            a, ctx = g.attend(Tensor(h), g.encode(src))
            return ops.add(ops.sum(ops.mul(ctx, w)), ops.sum(ops.mul(a, wa)))
        return attn, _subset(g.params, ("src_emb", "enc_", "att."))
    tgt = padded(random_targets(r, 2, 7))
    return (lambda: ops.sum(g.sequence_log_prob(src, tgt))), g.params


def _subset(store, prefixes):
    """A view of ``store`` holding only the named tensors, so probes skip parameters the loss ignores."""
    from brcsgan.numerics import ParamStore

    sub = ParamStore()
    for name, value in store.items():
        if name.startswith(prefixes):
            sub.values[name] = value
            sub.grads[name] = store.grads[name]
    return sub


def gradient_check_errors(component: str, instances: int, step: float = 1e-5) -> list[float]:
    from brcsgan.numerics import finite_difference_check

    if component not in GRADIENT_COMPONENTS:
        raise ValueError(component)
    out = []
    for seed in range(instances):
        f, params = _component_loss(component, seed)
        out.append(finite_difference_check(f, params, step=step))
    return out


# ------------------------------------------------------- reward instances

def enumerable_instance(seed: int = 0, lam: float = 0.7, n_rollouts: int = 4):
    """Generator over {A, B, EOS} with at most three output steps, a frozen
    discriminator, one source and one reference."""
    from brcsgan.reward import RewardConfig

    gen = tiny_generator(vocab=5, seed=seed, t_max=3)
    disc = tiny_discriminator(vocab=5, seed=seed + 1, T=3, windows=(1, 2))
    cfg = RewardConfig(lam=lam, baseline=0.5, n_rollouts=n_rollouts, t_max=3)
    return gen, disc, [4, 3, 4], (3, 4, EOS), cfg


def sampled_gradient_z_scores(episodes: int, batch: int = 1000, seed: int = 0):
    """Per-coordinate z-scores of the mean sampled policy gradient against the exact one.

    Episodes run in batches; the standard error comes from the spread of
    the batch means, which are independent and identically distributed.
    """
    from brcsgan.reward import exact_expected_gradient, policy_gradient_step

    gen, disc, src, ref, cfg = enumerable_instance(seed)
    exact = exact_expected_gradient(gen, disc, src, ref, cfg, normalize="none")
    rng = np.random.default_rng(seed)
    means = []
    for _ in range(episodes // batch):
        diag = policy_gradient_step(gen, disc, [src] * batch, [ref] * batch, cfg, rng, None,
                                    normalize="none", keep_gradient=True)
        gen.params.zero_grad()
        means.append(-diag.gradient)  # loss gradient is the negated ascent direction
    means = np.array(means)
    se = means.std(axis=0, ddof=1) / np.sqrt(len(means))
    live = se > 0
    z = np.abs(means.mean(axis=0) - exact)[live] / se[live]
    dead = np.abs(means.mean(axis=0) - exact)[~live]
    return z, dead, exact


def bleu_weighted_gradient(gen, sources, references, samples, rollouts) -> np.ndarray:
    """Loss gradient -(1/B) sum_b (1/T_b) sum_t w_bt grad log p(y_t), rebuilt one
    sentence at a time with weights taken straight from sentence BLEU."""
    from brcsgan.bleu import sentence_bleu
    from brcsgan.numerics import backward
    from brcsgan.numerics import ops

    total = np.zeros(gen.params.size())
    for b, (src, ref, seq) in enumerate(zip(sources, references, samples)):
        weights = np.zeros(len(seq))
        for t in range(len(seq) - 1):
            done = rollouts[(b, t)]
            weights[t] = sum(sentence_bleu(y, ref).value for y in done) / len(done)
        weights[-1] = sentence_bleu(seq, ref).value
        lp = gen.token_log_probs(padded([src]), padded([list(seq)]))
        gen.params.zero_grad()
        backward(ops.sum(ops.mul(lp, weights[None, :])), gen.params)
        total -= gen.params.flat_grads() / len(seq)
    gen.params.zero_grad()
    return total / len(samples)


def lambda_zero_gradient_gap(seed: int = 0, batch: int = 8) -> float:
    """Max abs difference between the lam=0 step gradient and the BLEU-weighted one on the same samples."""
    from brcsgan.corpus import EOS as _EOS
    from brcsgan.reward import RewardConfig, policy_gradient_step

    r = np.random.default_rng(seed)
    gen = tiny_generator(seed=seed, t_max=6)
    disc = tiny_discriminator(seed=seed, T=6)
    sources = random_sources(r, batch, 7)
    references = [tuple(r.integers(4, 7, size=r.integers(1, 5))) + (_EOS,) for _ in range(batch)]
    cfg = RewardConfig(lam=0.0, n_rollouts=5, t_max=6)
    diag = policy_gradient_step(gen, disc, sources, references, cfg, np.random.default_rng(seed + 1), None,
                                keep_gradient=True)
    gen.params.zero_grad()
    other = bleu_weighted_gradient(gen, sources, references, diag.samples, diag.rollouts)
    return float(np.max(np.abs(diag.gradient - other)))


def prefix_reward_moments(gen, disc, source, reference, cfg, prefix) -> tuple[float, float]:
    """Mean and variance of the terminal reward of completions of ``prefix``,
    by direct enumeration of the completions and their conditional probabilities."""
    from brcsgan.reward import enumerate_sequences, sequence_probabilities, terminal_reward

    prefix = tuple(prefix)
    tokens = np.flatnonzero(gen.vocab_mask)
    seqs = [s for s in enumerate_sequences(tokens, cfg.t_max) if s[:len(prefix)] == prefix]
    p = sequence_probabilities(gen, source, seqs)
    p = p / p.sum()
    r = np.array([terminal_reward(disc, source, s, reference, cfg) for s in seqs])
    mean = float(np.dot(p, r))
    return mean, float(np.dot(p, (r - mean) ** 2))


def rollout_estimates(n: int, repeats: int, prefix=(4,), seed: int = 0) -> np.ndarray:
    """``repeats`` independent Monte Carlo estimates of the reward of ``prefix`` with n rollouts each."""
    from dataclasses import replace

    from brcsgan.reward import intermediate_reward

    gen, disc, src, ref, cfg = enumerable_instance(seed)
    cfg = replace(cfg, n_rollouts=n)
    rng = np.random.default_rng([seed, n])
    return np.array([intermediate_reward(gen, disc, src, prefix, ref, cfg, rng) for _ in range(repeats)])


def oracle_bleu(cand, ref, smooth=True):
    """Independent reimplementation: explicit loops, no Counter, no shared helpers."""
    cand = [t for t in cand if t not in (PAD, EOS, 1)]
    ref = [t for t in ref if t not in (PAD, EOS, 1)]
    if not cand:
        return 0.0
    logs = 0.0
    for n in range(1, 5):
        cgrams = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
        rgrams = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
        used = [False] * len(rgrams)
        m = 0
        for g in cgrams:
            for j, r in enumerate(rgrams):
                if not used[j] and r == g:
                    used[j] = True
                    m += 1
                    break
        c = len(cgrams)
        if smooth and n >= 2:
            p = (m + 1) / (c + 1)
        else:
            p = m / c if c else 0.0
        if p == 0.0:
            return 0.0
        logs += math.log(p) / 4
    bp = 1.0 if len(cand) >= len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.exp(logs)
