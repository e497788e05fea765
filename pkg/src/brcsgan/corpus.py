"""Synthetic parallel corpora, vocabularies, padding, batching and text I/O.

Corpus generation draws from :class:`XorShift64Star` (xorshift64* seeded
through splitmix64) so a corpus is a pure function of its task spec on any
platform and in any implementation that follows the same recipe:

* seed state = splitmix64(seed); a zero state is replaced by 0x9E3779B97F4A7C15
* ``below(n)`` rejects draws >= floor(2**64 / n) * n, then takes ``x % n``
* cipher permutation: Fisher-Yates over content ids, i from last to 1, j = below(i + 1)
* each source: length = L_min + below(L_max - L_min + 1), tokens 4 + below(V - 4)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
TASK_KINDS = ("copy", "reverse", "cipher-reorder")

_MASK64 = (1 << 64) - 1


class CorpusError(ValueError):
    pass


class XorShift64Star:
    def __init__(self, seed: int):
        z = (seed + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
        self.state = z or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK64

    def below(self, n: int) -> int:
        if n <= 0:
            raise ValueError("below: n must be positive")
        limit = ((1 << 64) // n) * n
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise CorpusError(f"vocab must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("duplicate tokens in vocab")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def synthetic(cls, size: int) -> "Vocab":
        return cls(list(SPECIALS) + [f"w{i}" for i in range(4, size)])

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass(frozen=True)
class SentencePair:
    source: tuple[int, ...]
    target: tuple[int, ...]

    def __post_init__(self):
        if not self.source or not self.target:
            raise CorpusError("empty sentence")
        if self.target[-1] != EOS:
            raise CorpusError("target must end with EOS")
        if PAD in self.source or PAD in self.target:
            raise CorpusError("PAD inside a sentence")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    kind: str = "copy"
    vocab_size: int = 20
    min_len: int = 3
    max_len: int = 10
    n_train: int = 1000
    n_dev: int = 100
    n_test: int = 100
    seed: int = 0
    t_max: int = 20

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise CorpusError(f"unknown task kind {self.kind!r}")
        if self.vocab_size <= 4:
            raise CorpusError("vocab_size must exceed the 4 reserved tokens")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError("need 1 <= min_len <= max_len")
        if self.max_len > self.t_max - 1:
            raise CorpusError("max_len must leave room for EOS within t_max")
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise CorpusError("split sizes must be positive")


def task_mapping(kind: str, source: Sequence[int], permutation: Sequence[int] | None = None) -> tuple[int, ...]:
    """The deterministic source -> target map (without the trailing EOS)."""
    if kind == "copy":
        return tuple(source)
    if kind == "reverse":
        return tuple(reversed(source))
    if kind == "cipher-reorder":
        if permutation is None:
            raise CorpusError("cipher-reorder needs a permutation")
        out = [permutation[t] for t in source]
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return tuple(out)
    raise CorpusError(f"unknown task kind {kind!r}")


def cipher_permutation(vocab_size: int, rng: XorShift64Star) -> list[int]:
    content = list(range(4, vocab_size))
    rng.shuffle(content)
    return list(range(4)) + content


@dataclass
class Corpus:
    train: list[SentencePair]
    dev: list[SentencePair]
    test: list[SentencePair]
    vocab: Vocab
    permutation: list[int] = field(default_factory=list)


def generate_corpus(spec: SyntheticTaskSpec) -> Corpus:
    spec.validate()
    rng = XorShift64Star(spec.seed)
    perm = cipher_permutation(spec.vocab_size, rng)
    want = spec.n_train + spec.n_dev + spec.n_test
    n_content = spec.vocab_size - 4
    space = sum(n_content ** n for n in range(spec.min_len, spec.max_len + 1))
    if space < want:
        raise CorpusError(f"only {space} distinct sources exist, {want} requested")
    seen: set[tuple[int, ...]] = set()
    pairs: list[SentencePair] = []
    attempts = 0
    while len(pairs) < want:
        attempts += 1
        if attempts > 50 * want + 1000:
            raise CorpusError("could not draw enough distinct sources")
        n = spec.min_len + rng.below(spec.max_len - spec.min_len + 1)
        src = tuple(4 + rng.below(n_content) for _ in range(n))
        if src in seen:
            continue
        seen.add(src)
        tgt = task_mapping(spec.kind, src, perm) + (EOS,)
        pairs.append(SentencePair(src, tgt))
    a, b = spec.n_train, spec.n_train + spec.n_dev
    return Corpus(pairs[:a], pairs[a:b], pairs[b:], Vocab.synthetic(spec.vocab_size), perm)


# ------------------------------------------------------------------- padding


@dataclass(frozen=True)
class PaddedPair:
    source: np.ndarray
    target: np.ndarray
    source_mask: np.ndarray
    target_mask: np.ndarray


def pad_ids(ids: Sequence[int], T: int) -> np.ndarray:
    if len(ids) > T:
        raise CorpusError(f"sentence of length {len(ids)} exceeds T={T}")
    out = np.full(T, PAD, dtype=np.int64)
    out[:len(ids)] = ids
    return out


def pad_to_fixed(pair: SentencePair, T: int) -> PaddedPair:
    src, tgt = pad_ids(pair.source, T), pad_ids(pair.target, T)
    return PaddedPair(src, tgt, (src != PAD).astype(np.float64), (tgt != PAD).astype(np.float64))


@dataclass
class Batch:
    source: np.ndarray  # (B, T) int64
    target: np.ndarray  # (B, T) int64
    source_len: np.ndarray
    target_len: np.ndarray
    pairs: list[SentencePair]

    @property
    def source_mask(self) -> np.ndarray:
        return (self.source != PAD).astype(np.float64)

    @property
    def target_mask(self) -> np.ndarray:
        return (self.target != PAD).astype(np.float64)

    def __len__(self) -> int:
        return len(self.pairs)


def pad_batch(seqs: Sequence[Sequence[int]], T: int | None = None) -> np.ndarray:
    T = T if T is not None else max(len(s) for s in seqs)
    return np.stack([pad_ids(s, T) for s in seqs]) if seqs else np.zeros((0, T), dtype=np.int64)


def batch_of(pairs: Sequence[SentencePair], T: int) -> Batch:
    pairs = list(pairs)
    return Batch(
        source=pad_batch([p.source for p in pairs], T),
        target=pad_batch([p.target for p in pairs], T),
        source_len=np.array([len(p.source) for p in pairs], dtype=np.int64),
        target_len=np.array([len(p.target) for p in pairs], dtype=np.int64),
        pairs=pairs,
    )


def make_batches(pairs: Sequence[SentencePair], batch_size: int, T: int, shuffle_seed: int | None) -> list[Batch]:
    if batch_size < 1:
        raise CorpusError("batch_size must be >= 1")
    if not pairs:
        raise CorpusError("no pairs to batch")
    order = list(range(len(pairs)))
    if shuffle_seed is not None:
        XorShift64Star(shuffle_seed).shuffle(order)
    return [batch_of([pairs[i] for i in order[s:s + batch_size]], T)
            for s in range(0, len(order), batch_size)]


def strip_special(ids: Iterable[int]) -> list[int]:
    """Tokens up to (not including) the first EOS, with PAD/BOS dropped."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i not in (PAD, BOS):
            out.append(i)
    return out


# ----------------------------------------------------------------------- I/O


def _read_lines(path: str | Path) -> list[str]:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path}: malformed UTF-8") from exc
    return text.splitlines()


def read_parallel(source_path: str | Path, target_path: str | Path, vocab: Vocab) -> list[SentencePair]:
    src_lines, tgt_lines = _read_lines(source_path), _read_lines(target_path)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(f"line count mismatch: {len(src_lines)} vs {len(tgt_lines)}")
    return [SentencePair(tuple(vocab.encode(s.split())), tuple(vocab.encode(t.split())) + (EOS,))
            for s, t in zip(src_lines, tgt_lines)]


def read_sentences(path: str | Path, vocab: Vocab) -> list[list[int]]:
    return [vocab.encode(line.split()) for line in _read_lines(path)]


def write_sentences(path: str | Path, sentences: Iterable[Sequence[int]], vocab: Vocab) -> None:
    lines = [" ".join(vocab.decode(strip_special(s))) for s in sentences]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def write_parallel(pairs: Sequence[SentencePair], source_path: str | Path, target_path: str | Path, vocab: Vocab) -> None:
    write_sentences(source_path, [p.source for p in pairs], vocab)
    write_sentences(target_path, [p.target for p in pairs], vocab)
