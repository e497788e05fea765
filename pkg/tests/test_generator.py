"""Encoder-decoder: gradients, distribution properties, decoding and MLE."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brcsgan.corpus import BOS, EOS, PAD, SentencePair, batch_of
from brcsgan.generator import draw_categorical, mle_step, per_sentence_nll
from brcsgan.numerics import Optimizer, OptimizerConfig, no_grad
from brcsgan.reward import enumerate_sequences, sequence_probabilities

from helpers import gradient_check_errors, padded, random_sources, tiny_generator


@pytest.mark.parametrize("component", ["encoder", "attention", "decoder"])
def test_gradients_match_finite_differences(component):
    errs = gradient_check_errors(component, 4)
    assert max(errs) < 1e-4, errs


def test_banned_tokens_never_get_probability():
    g = tiny_generator()
    enc = g.encode(padded([[4, 5, 6], [6, 5]]))
    probs, _ = g.decode_step(g.initial_state(enc), enc)
    assert np.all(probs[:, [PAD, BOS]] == 0.0)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_sequence_probabilities_sum_to_one():
    g = tiny_generator(vocab=5, t_max=3)
    seqs = enumerate_sequences([3, 4, EOS], 3)
    p = sequence_probabilities(g, [4, 3], seqs)
    assert abs(p.sum() - 1.0) < 1e-12


def test_padding_does_not_change_scores():
    g = tiny_generator()
    tgt = padded([[5, EOS]])
    a = g.sequence_log_prob(padded([[4, 5]]), tgt).item()
    b = g.sequence_log_prob(padded([[4, 5, PAD, PAD]]), padded([[5, EOS, PAD]])).item()
    assert a == b


def test_batch_rows_are_independent():
    g = tiny_generator()
    src = padded([[4, 5, 6], [6, 4]])
    tgt = padded([[5, EOS], [4, 4, EOS]])
    both = g.sequence_log_prob(src, tgt).data
    alone = g.sequence_log_prob(src[1:, :2], tgt[1:]).data
    assert abs(both[1] - alone[0]) < 1e-12


def test_missing_eos_rejected():
    g = tiny_generator()
    with pytest.raises(ValueError):
        g.sequence_log_prob(padded([[4]]), padded([[5, 6]]))
    with pytest.raises(ValueError):
        g.encode(padded([[PAD, PAD]]))


def test_greedy_decoding_ends_and_pads():
    g = tiny_generator(t_max=6)
    out = g.sample(padded(random_sources(np.random.default_rng(0), 5, 7)), "greedy")
    assert out.shape == (5, 6)
    for row in out:
        row = list(row)
        if EOS in row:
            assert all(t == PAD for t in row[row.index(EOS) + 1:])
    with pytest.raises(ValueError):
        g.sample(padded([[4]]), "greedy", max_len=7)
    with pytest.raises(ValueError):
        g.sample(padded([[4]]), "multinomial")


def test_sampling_is_reproducible_under_seed():
    g = tiny_generator()
    src = padded([[4, 5, 6]] * 4)
    a = g.sample(src, "multinomial", rng=np.random.default_rng(3))
    b = g.sample(src, "multinomial", rng=np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_beam_one_equals_greedy():
    r = np.random.default_rng(4)
    for seed in range(5):
        g = tiny_generator(seed=seed)
        for src in random_sources(r, 3, 7):
            greedy = [int(t) for t in g.sample(padded([src]), "greedy")[0] if t != PAD]
            assert g.beam_search(src, beam_size=1) == greedy


def test_beam_finds_the_most_probable_sequence():
    g = tiny_generator(vocab=5, t_max=3, seed=2)
    src = [4, 3, 4]
    seqs = enumerate_sequences([3, 4, EOS], 3)
    p = sequence_probabilities(g, src, seqs)
    best = list(seqs[int(np.argmax(p))])
    assert g.beam_search(src, beam_size=40) == best


def test_draw_categorical_frequencies_and_zeros():
    probs = np.tile([0.0, 0.2, 0.0, 0.8], (20000, 1))
    draws = draw_categorical(probs, np.random.default_rng(0))
    assert set(np.unique(draws)) <= {1, 3}
    assert abs(np.mean(draws == 3) - 0.8) < 0.02


def test_mle_step_reduces_loss():
    g = tiny_generator(scale=0.3)
    pairs = [SentencePair((4, 5, 6), (6, 5, 4, EOS)), SentencePair((5, 6), (6, 5, EOS))]
    batch = batch_of(pairs, 6)
    opt = Optimizer(g.params, OptimizerConfig("adam", lr=0.05))
    first = mle_step(g, batch, opt)
    for _ in range(30):
        last = mle_step(g, batch, opt)
    assert last < first


def test_per_sentence_nll_matches_log_prob():
    g = tiny_generator()
    pairs = [SentencePair((4, 5), (5, 4, EOS)), SentencePair((6,), (EOS,))]
    batch = batch_of(pairs, 4)
    with no_grad():
        nll = per_sentence_nll(g, batch).data
        lp = g.sequence_log_prob(batch.source, batch.target).data
    assert np.allclose(nll, -lp / np.array([3, 1]), atol=1e-14)


def test_state_dict_roundtrip():
    a, b = tiny_generator(seed=1), tiny_generator(seed=2)
    b.load_state_dict(a.state_dict())
    src, tgt = padded([[4, 5]]), padded([[5, EOS]])
    assert a.sequence_log_prob(src, tgt).item() == b.sequence_log_prob(src, tgt).item()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(3, 6), min_size=1, max_size=4), st.integers(0, 50))
def test_log_probs_are_nonpositive_and_finite(src, seed):
    g = tiny_generator(seed=seed)
    out = g.sample(padded([src]), "multinomial", rng=np.random.default_rng(seed))[0]
    seq = [int(t) for t in out if t != PAD]
    if seq[-1] != EOS:
        return
    lp = g.sequence_log_prob(padded([src]), padded([seq])).item()
    assert np.isfinite(lp) and lp <= 0.0
