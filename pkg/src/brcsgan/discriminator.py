"""Conditional CNN discriminator D(X, Y).

Both sides are embedded into T x k matrices, convolved with kernel banks of
several window sizes, batch-normalised before the ReLU, max-pooled over time
and concatenated. A linear map V turns [c_x; c_y] into two logits
(fake, real); the reported probability is the softmax weight of "real",
i.e. sigmoid(real - fake).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import SentencePair, pad_batch
from .numerics import Optimizer, ParamStore, Tensor, backward, clip_to_box, no_grad
from .numerics import ops

SIDES = ("src", "tgt")


@dataclass
class DiscriminatorConfig:
    vocab_size: int
    emb_dim: int = 32
    windows: tuple[int, ...] = (1, 2, 3, 4)
    kernels: int = 32
    T: int = 20
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    init_scale: float = 0.1
    epsilon: float = 1.0
    seed: int = 0


class Discriminator:
    def __init__(self, config: DiscriminatorConfig):
        self.config = c = config
        if max(c.windows) > c.T:
            raise ValueError(f"window {max(c.windows)} longer than T={c.T}")
        rng = np.random.default_rng(c.seed)
        s = c.init_scale
        p = ParamStore()
        self.running: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for side in SIDES:
            p.add(f"{side}_emb", rng.uniform(-s, s, size=(c.vocab_size, c.emb_dim)))
        for side in SIDES:
            for l in c.windows:
                p.add(f"conv.{side}.{l}.w", rng.uniform(-s, s, size=(c.kernels, l, c.emb_dim)))
                p.add(f"conv.{side}.{l}.b", np.zeros(c.kernels))
                p.add(f"bn.{side}.{l}.gamma", np.ones(c.kernels))
                p.add(f"bn.{side}.{l}.beta", np.zeros(c.kernels))
                self.running[f"{side}.{l}"] = (np.zeros(c.kernels), np.ones(c.kernels))
        p.add("out.V", rng.uniform(-s, s, size=(2 * len(c.windows) * c.kernels, 2)))
        self.params = p

    @property
    def n_features(self) -> int:
        return len(self.config.windows) * self.config.kernels

    # ------------------------------------------------------------- forward

    def embed_pair(self, source: np.ndarray, target: np.ndarray) -> tuple[Tensor, Tensor]:
        """(B, T, k) source and target matrices; inputs must already be length T."""
        source, target = np.atleast_2d(source), np.atleast_2d(target)
        T = self.config.T
        if source.shape[1] != T or target.shape[1] != T:
            raise ValueError(f"embed_pair: expected length {T}, got {source.shape[1]} and {target.shape[1]}")
        p = self.params
        return ops.embedding(p["src_emb"], source), ops.embedding(p["tgt_emb"], target)

    def extract_features(self, M: Tensor, side: str, mode: str = "eval", update_stats: bool = False) -> Tensor:
        """Pooled features (B, len(windows) * kernels) for one side."""
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        c, p = self.config, self.params
        feats = []
        for l in c.windows:
            if l > M.shape[1]:
                raise ValueError(f"window {l} longer than sequence {M.shape[1]}")
            w, bias = p[f"conv.{side}.{l}.w"], p[f"conv.{side}.{l}.b"]
            gamma, beta = p[f"bn.{side}.{l}.gamma"], p[f"bn.{side}.{l}.beta"]
            key = f"{side}.{l}"
            if mode == "train":
                # batch statistics cancel the conv bias exactly, so normalise the
                # bias-free maps and add the bias to the running mean only
                normed, mu, var = ops.batch_norm(ops.conv1d_time(M, w), gamma, beta, axes=(0, 1), eps=c.bn_eps)
                if update_stats:
                    rm, rv = self.running[key]
                    mom = c.bn_momentum
                    self.running[key] = (mom * rm + (1 - mom) * (mu + bias.data), mom * rv + (1 - mom) * var)
            else:
                rm, rv = self.running[key]
                normed = ops.affine_norm(ops.conv1d_time(M, w, bias), gamma, beta, rm, rv, eps=c.bn_eps)
            feats.append(ops.max_over_time(ops.relu(normed), axis=1))
        return ops.concat(feats, axis=-1)

    def logits(self, source: np.ndarray, target: np.ndarray, mode: str = "eval",
               update_stats: bool = False, source_features: Tensor | None = None) -> Tensor:
        """(B, 2) logits ordered (fake, real)."""
        X, Y = self.embed_pair(source, target) if source_features is None else (None, self._embed_tgt(target))
        cx = source_features if source_features is not None else self.extract_features(X, "src", mode, update_stats)
        cy = self.extract_features(Y, "tgt", mode, update_stats)
        return ops.concat([cx, cy], axis=-1) @ self.params["out.V"]

    def _embed_tgt(self, target: np.ndarray) -> Tensor:
        target = np.atleast_2d(target)
        if target.shape[1] != self.config.T:
            raise ValueError(f"expected target length {self.config.T}, got {target.shape[1]}")
        return ops.embedding(self.params["tgt_emb"], target)

    def source_features(self, source: np.ndarray) -> Tensor:
        """Eval-mode source representation, reusable across many targets."""
        source = np.atleast_2d(source)
        if source.shape[1] != self.config.T:
            raise ValueError(f"expected source length {self.config.T}, got {source.shape[1]}")
        with no_grad():
            return self.extract_features(ops.embedding(self.params["src_emb"], source), "src", "eval")

    def logit_margin(self, source, target, mode: str = "eval", update_stats: bool = False,
                     source_features: Tensor | None = None) -> Tensor:
        """real - fake logit, shape (B,)."""
        lg = self.logits(source, target, mode, update_stats, source_features)
        return ops.sub(lg[:, 1], lg[:, 0])

    def predict_prob(self, source, target, mode: str = "eval", source_features: Tensor | None = None) -> np.ndarray:
        """Probability that each target is a human translation of its source."""
        with no_grad():
            d = self.logit_margin(source, target, mode, source_features=source_features).data
        p = ops.sigmoid(Tensor(d)).data
        # keep strictly inside (0, 1) where float64 sigmoid would round to an endpoint
        return np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))

    def loss(self, real_src, real_tgt, fake_src, fake_tgt, update_stats: bool = False) -> Tensor:
        """-mean log D(real) - mean log(1 - D(fake)), batch statistics over real + fake."""
        n_real = len(real_src)
        src = np.concatenate([real_src, fake_src])
        tgt = np.concatenate([real_tgt, fake_tgt])
        d = self.logit_margin(src, tgt, mode="train", update_stats=update_stats)
        real_term = ops.mean(ops.softplus(ops.scale(d[:n_real], -1.0)))
        fake_term = ops.mean(ops.softplus(d[n_real:]))
        return ops.add(real_term, fake_term)

    # ------------------------------------------------------------ persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.params.state_dict("disc.")
        for key, (m, v) in self.running.items():
            out[f"disc.running.{key}.mean"] = m.copy()
            out[f"disc.running.{key}.var"] = v.copy()
        return out

    def load_state_dict(self, entries) -> None:
        self.params.load_state_dict(entries, "disc.")
        for key in self.running:
            self.running[key] = (np.array(entries[f"disc.running.{key}.mean"]),
                                 np.array(entries[f"disc.running.{key}.var"]))


def pad_pairs(pairs: Sequence[SentencePair], T: int) -> tuple[np.ndarray, np.ndarray]:
    return pad_batch([p.source for p in pairs], T), pad_batch([p.target for p in pairs], T)


def disc_step(disc: Discriminator, real: Sequence[SentencePair], fake: Sequence[SentencePair],
              optimizer: Optimizer) -> float:
    """One update on a real/fake set followed by clipping to [-epsilon, epsilon]; returns the pre-step loss."""
    if not real or not fake:
        raise ValueError("disc_step: real and fake sets must be non-empty")
    T = disc.config.T
    rs, rt = pad_pairs(real, T)
    fs, ft = pad_pairs(fake, T)
    loss = disc.loss(rs, rt, fs, ft, update_stats=True)
    value = loss.item()
    backward(loss, disc.params)
    optimizer.step()
    clip_to_box(disc.params, disc.config.epsilon)
    return value


def accuracy(disc: Discriminator, pairs: Sequence[SentencePair], labels: Sequence[int], mode: str = "eval") -> float:
    """Fraction classified correctly with p >= 0.5 meaning "real" (label 1)."""
    if not pairs:
        raise ValueError("accuracy: empty set")
    src, tgt = pad_pairs(pairs, disc.config.T)
    p = disc.predict_prob(src, tgt, mode)
    pred = (p >= 0.5).astype(int)
    return float(np.mean(pred == np.asarray(labels)))
