"""GRU-attention encoder-decoder acting as the translation policy.

Bidirectional GRU encoder over source embeddings, additive (tanh) attention,
a GRU decoder fed with the previous token and the context vector, and a tanh
readout layer producing vocabulary logits. PAD and BOS are never emitted:
their logits are masked out of every output distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import BOS, EOS, PAD, Batch
from .numerics import Optimizer, ParamStore, Tensor, backward, no_grad
from .numerics import ops


@dataclass
class GeneratorConfig:
    vocab_size: int
    emb_dim: int = 32  # 512 at full scale
    hidden: int = 64  # 512 at full scale
    att_dim: int = 64
    t_max: int = 20
    banned: tuple[int, ...] = (PAD, BOS)
    init_scale: float = 0.1
    seed: int = 0


@dataclass
class EncodedSource:
    annotations: Tensor  # (B, m, 2*hidden)
    mask: np.ndarray  # (B, m) float
    keys: Tensor  # (B, m, att_dim), annotations projected for attention

    def __len__(self) -> int:
        return self.mask.shape[0]

    def take(self, rows: np.ndarray) -> "EncodedSource":
        """Row-gather without gradient tracking (used for rollouts)."""
        return EncodedSource(Tensor(self.annotations.data[rows]), self.mask[rows], Tensor(self.keys.data[rows]))


@dataclass
class DecodeState:
    hidden: Tensor  # (B, hidden)
    prev: np.ndarray  # (B,) previous token ids
    step: int = 0


class Generator:
    def __init__(self, config: GeneratorConfig):
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        s = c.init_scale
        h, k, a = c.hidden, c.emb_dim, c.att_dim
        p = ParamStore()

        def u(*shape):
            return rng.uniform(-s, s, size=shape)

        p.add("src_emb", u(c.vocab_size, k))
        p.add("tgt_emb", u(c.vocab_size, k))
        for d in ("fwd", "bwd"):
            p.add(f"enc_{d}.W", u(k, 3 * h))
            p.add(f"enc_{d}.U", u(h, 3 * h))
            p.add(f"enc_{d}.b", np.zeros(3 * h))
        p.add("init.W", u(2 * h, h))
        p.add("init.b", np.zeros(h))
        p.add("att.W", u(h, a))
        p.add("att.U", u(2 * h, a))
        p.add("att.v", u(a, 1))
        p.add("dec.W", u(k + 2 * h, 3 * h))
        p.add("dec.U", u(h, 3 * h))
        p.add("dec.b", np.zeros(3 * h))
        p.add("out.W1", u(h + k + 2 * h, k))
        p.add("out.b1", np.zeros(k))
        p.add("out.W2", u(k, c.vocab_size))
        p.add("out.b2", np.zeros(c.vocab_size))
        self.params = p
        self.vocab_mask = np.ones(c.vocab_size, dtype=bool)
        self.vocab_mask[list(c.banned)] = False

    # ------------------------------------------------------------ forward

    def encode(self, source: np.ndarray) -> EncodedSource:
        """Encode a (B, m) id matrix (PAD-padded on the right)."""
        source = np.atleast_2d(np.asarray(source, dtype=np.int64))
        if source.shape[1] == 0:
            raise ValueError("encode: empty source")
        mask = (source != PAD).astype(np.float64)
        if np.any(mask.sum(axis=1) == 0):
            raise ValueError("encode: empty source sentence")
        width = int(np.flatnonzero(mask.any(axis=0)).max()) + 1
        source, mask = source[:, :width], mask[:, :width]
        p, h = self.params, self.config.hidden
        B, m = source.shape
        emb = [ops.embedding(p["src_emb"], source[:, j]) for j in range(m)]
        zero = Tensor(np.zeros((B, h)))
        fwd, state = [], zero
        for j in range(m):
            state = ops.gru_cell(emb[j], state, p["enc_fwd.W"], p["enc_fwd.U"], p["enc_fwd.b"], mask[:, j])
            fwd.append(state)
        bwd, state = [None] * m, zero
        for j in range(m - 1, -1, -1):
            state = ops.gru_cell(emb[j], state, p["enc_bwd.W"], p["enc_bwd.U"], p["enc_bwd.b"], mask[:, j])
            bwd[j] = state
        H = ops.stack([ops.concat([f, b_], axis=-1) for f, b_ in zip(fwd, bwd)], axis=1)
        keys = H @ p["att.U"]
        return EncodedSource(H, mask, keys)

    def initial_state(self, enc: EncodedSource) -> DecodeState:
        p = self.params
        w = enc.mask / enc.mask.sum(axis=1, keepdims=True)
        mean_h = ops.reshape(Tensor(w[:, None, :]) @ enc.annotations, (len(enc), -1))
        s0 = ops.tanh(mean_h @ p["init.W"] + p["init.b"])
        return DecodeState(s0, np.full(len(enc), BOS, dtype=np.int64), 0)

    def attend(self, hidden: Tensor, enc: EncodedSource) -> tuple[Tensor, Tensor]:
        """Attention weights (B, m) and context (B, 2*hidden) for decoder state ``hidden``."""
        p = self.params
        B, m = enc.mask.shape
        if np.any(enc.mask.sum(axis=1) == 0):
            raise ValueError("attend: all source positions masked")
        q = ops.reshape(hidden @ p["att.W"], (B, 1, -1))
        e = ops.reshape(ops.tanh(enc.keys + q) @ p["att.v"], (B, m))
        a = ops.softmax(e, mask=enc.mask > 0)
        ctx = ops.reshape(ops.reshape(a, (B, 1, m)) @ enc.annotations, (B, -1))
        return a, ctx

    def step_logits(self, state: DecodeState, enc: EncodedSource) -> tuple[Tensor, Tensor]:
        """(logits (B, V), new hidden) for one decoder step."""
        p = self.params
        e = ops.embedding(p["tgt_emb"], state.prev)
        _, ctx = self.attend(state.hidden, enc)
        s = ops.gru_cell(ops.concat([e, ctx], axis=-1), state.hidden, p["dec.W"], p["dec.U"], p["dec.b"])
        t = ops.tanh(ops.concat([s, e, ctx], axis=-1) @ p["out.W1"] + p["out.b1"])
        return t @ p["out.W2"] + p["out.b2"], s

    def decode_step(self, state: DecodeState, enc: EncodedSource) -> tuple[np.ndarray, DecodeState]:
        """Next-token distribution (B, V) and the advanced state; prev of the
        returned state is left for the caller to fill in via :meth:`advance`."""
        logits, s = self.step_logits(state, enc)
        probs = ops.softmax(logits, mask=np.broadcast_to(self.vocab_mask, logits.shape)).data
        return probs, DecodeState(s, state.prev, state.step + 1)

    @staticmethod
    def advance(state: DecodeState, tokens: np.ndarray) -> DecodeState:
        return DecodeState(state.hidden, np.asarray(tokens, dtype=np.int64), state.step)

    def token_log_probs(self, source: np.ndarray, target: np.ndarray) -> Tensor:
        """Per-position log p(y_t | y_<t, X) under teacher forcing, (B, L); PAD positions are 0."""
        target = np.atleast_2d(np.asarray(target, dtype=np.int64))
        used = np.flatnonzero((target != PAD).any(axis=0))
        target = target[:, :int(used.max()) + 1 if used.size else 1]
        enc = self.encode(source)
        state = self.initial_state(enc)
        mask = target != PAD
        vmask = np.broadcast_to(self.vocab_mask, (target.shape[0], self.config.vocab_size))
        cols = []
        for t in range(target.shape[1]):
            logits, s = self.step_logits(state, enc)
            lp = ops.gather_last(ops.log_softmax(logits, mask=vmask), np.where(mask[:, t], target[:, t], EOS))
            cols.append(ops.mul(lp, mask[:, t].astype(np.float64)))
            state = DecodeState(s, target[:, t], t + 1)
        return ops.stack(cols, axis=1)

    def sequence_log_prob(self, source: np.ndarray, target: np.ndarray, require_eos: bool = True) -> Tensor:
        """Sum over positions of log p(y_t | y_<t, X), shape (B,)."""
        target = np.atleast_2d(np.asarray(target, dtype=np.int64))
        if require_eos:
            lengths = (target != PAD).sum(axis=1)
            last = target[np.arange(len(target)), np.maximum(lengths - 1, 0)]
            if np.any(lengths == 0) or np.any(last != EOS):
                raise ValueError("sequence_log_prob: target missing EOS")
        return ops.sum(self.token_log_probs(source, target), axis=1)

    # ----------------------------------------------------------- decoding

    def sample(self, source: np.ndarray, mode: str = "greedy", max_len: int | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
        """Decode a batch; returns (B, max_len) ids with PAD after EOS."""
        max_len = self.config.t_max if max_len is None else max_len
        if max_len > self.config.t_max:
            raise ValueError(f"max_len {max_len} exceeds t_max {self.config.t_max}")
        if mode not in ("greedy", "multinomial"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        if mode == "multinomial" and rng is None:
            raise ValueError("multinomial sampling needs an rng")
        with no_grad():
            enc = self.encode(source)
            state = self.initial_state(enc)
            out, _ = self.continue_decoding(enc, state, max_len, mode, rng)
        return out

    def continue_decoding(self, enc: EncodedSource, state: DecodeState, steps: int, mode: str,
                          rng: np.random.Generator | None, record_states: bool = False,
                          start_len: np.ndarray | None = None, max_len: int | None = None):
        """Run up to ``steps`` further decoder steps under no_grad.

        Rows whose total length (``start_len`` + generated) reaches ``max_len``
        stop. Returns the (B, steps) generated ids and, if ``record_states``,
        the list of decoder states after each emitted token.
        """
        B = len(enc)
        out = np.full((B, steps), PAD, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        lengths = np.zeros(B, dtype=np.int64) if start_len is None else np.asarray(start_len).copy()
        cap = steps if max_len is None else max_len
        states = []
        for t in range(steps):
            probs, state = self.decode_step(state, enc)
            if mode == "greedy":
                tok = np.argmax(probs, axis=1)
            else:
                tok = draw_categorical(probs, rng)
            tok = np.where(done, PAD, tok)
            out[:, t] = tok
            state = self.advance(state, np.where(done, EOS, tok))
            if record_states:
                states.append(state)
            lengths = lengths + (~done)
            done = done | (tok == EOS) | (lengths >= cap)
            if done.all():
                break
        return out, states

    def beam_search(self, source, beam_size: int = 10, length_penalty: float = 0.0,
                    max_len: int | None = None) -> list[int]:
        """Best finished hypothesis for one source sentence (ids, EOS included if emitted).

        ``length_penalty`` is the exponent alpha of ((5 + len) / 6) ** alpha;
        0 disables it.
        """
        if beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        max_len = self.config.t_max if max_len is None else max_len
        src = np.asarray(source, dtype=np.int64).reshape(1, -1)

        def norm(score, n):
            return score / (((5.0 + n) / 6.0) ** length_penalty) if length_penalty else score

        with no_grad():
            enc0 = self.encode(src)
            enc = enc0
            state = self.initial_state(enc)
            hyps: list[tuple[float, list[int]]] = [(0.0, [])]
            finished: list[tuple[float, list[int]]] = []
            for t in range(max_len):
                probs, nstate = self.decode_step(state, enc)
                with np.errstate(divide="ignore"):
                    logp = np.log(probs)
                cands = []
                for hi, (score, toks) in enumerate(hyps):
                    for tok in np.flatnonzero(self.vocab_mask):
                        cands.append((score + logp[hi, tok], hi, int(tok)))
                # stable order: score desc, then hypothesis index, then token id
                cands.sort(key=lambda c: (-c[0], c[1], c[2]))
                budget = beam_size - len(finished)
                keep_rows, keep_toks = [], []
                new_hyps = []
                for score, hi, tok in cands[:budget]:
                    toks = hyps[hi][1] + [tok]
                    if tok == EOS or t + 1 == max_len:
                        finished.append((score, toks))
                    else:
                        new_hyps.append((score, toks))
                        keep_rows.append(hi)
                        keep_toks.append(tok)
                if not new_hyps or len(finished) >= beam_size:
                    break
                idx = np.asarray(keep_rows)
                state = DecodeState(Tensor(nstate.hidden.data[idx]), np.asarray(keep_toks), t + 1)
                enc = enc0.take(np.zeros(len(idx), dtype=np.int64))
                hyps = new_hyps
            if not finished:
                finished = hyps
        best = max(finished, key=lambda f: norm(f[0], len(f[1])))
        return best[1]

    # -------------------------------------------------------- persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return self.params.state_dict("gen.")

    def load_state_dict(self, entries) -> None:
        self.params.load_state_dict(entries, "gen.")


def draw_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row by inverse CDF; zero-probability entries are never chosen."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf <= u[:, None]).sum(axis=1)
    # guard against cdf[-1] < u from rounding: fall back to the last nonzero entry
    last = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
    return np.minimum(idx, last)


def per_sentence_nll(gen: Generator, batch: Batch) -> Tensor:
    """Mean token negative log-likelihood of each target sentence, shape (B,)."""
    lp = gen.token_log_probs(batch.source, batch.target)
    lengths = (batch.target != PAD).sum(axis=1).astype(np.float64)
    return ops.scale(ops.mul(ops.sum(lp, axis=1), 1.0 / lengths), -1.0)


def mle_step(gen: Generator, batch: Batch, optimizer: Optimizer) -> float:
    """One maximum-likelihood update; returns the pre-step mean loss."""
    loss = ops.mean(per_sentence_nll(gen, batch))
    value = loss.item()
    backward(loss, gen.params)
    optimizer.step()
    return value
