"""Parameter stores, the reverse pass, optimizers, box clipping and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from .tensor import ShapeError, Tape, TapeError, Tensor, current_tape, no_grad


class ParamStore:
    """Ordered name -> (value, grad) map.

    Values are leaf tensors that require gradients; their ``data`` arrays are
    updated in place so graphs built later see the new values.
    """

    def __init__(self):
        self.values: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.grads_ready = False

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.values:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True)
        self.values[name] = t
        self.grads[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def items(self):
        return self.values.items()

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)
        self.grads_ready = False

    def size(self) -> int:
        return int(sum(v.data.size for v in self.values.values()))

    def flat_values(self) -> np.ndarray:
        return np.concatenate([v.data.reshape(-1) for v in self.values.values()])

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([g.reshape(-1) for g in self.grads.values()])

    def set_flat_values(self, flat: np.ndarray) -> None:
        i = 0
        for v in self.values.values():
            n = v.data.size
            v.data[...] = flat[i:i + n].reshape(v.shape)
            i += n

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data.copy() for k, v in self.values.items()}

    def load_state_dict(self, entries: Mapping[str, np.ndarray], prefix: str = "") -> None:
        for k, v in self.values.items():
            arr = np.asarray(entries[prefix + k], dtype=np.float64)
            if arr.shape != v.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} != {v.shape}")
            v.data[...] = arr

    def max_abs(self) -> float:
        return max(float(np.abs(v.data).max()) for v in self.values.values())


def backward(loss: Tensor, store: ParamStore | None = None, tape: Tape | None = None,
             keep_tape: bool = False) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(param) into ``store.grads`` and clear the tape.

    Returns the raw gradient map keyed by ``id`` of every leaf that received
    one, which lets callers differentiate with respect to non-parameter leaves.
    """
    tape = tape or current_tape()
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.owns(loss):
        raise TapeError("backward: loss is not on the current tape")

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    nodes = tape.nodes
    for i in range(loss.node, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        pgrads = node.backward_fn(g)
        for parent, pg in zip(node.parents, pgrads):
            if not parent.requires_grad or pg is None:
                continue
            if tape.owns(parent):
                key = parent.node
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            else:
                key = id(parent)
                if key in leaf_grads:
                    leaf_grads[key] = leaf_grads[key] + pg
                else:
                    leaf_grads[key] = pg

    if store is not None:
        for name, value in store.values.items():
            g = leaf_grads.get(id(value))
            if g is not None:
                store.grads[name] += g.reshape(value.shape)
        store.grads_ready = True
    if not keep_tape:
        tape.clear()
    return leaf_grads


# ------------------------------------------------------------------ optimizers


@dataclass
class OptimizerConfig:
    rule: str = "adam"  # "adam" or "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.rule not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer rule {self.rule!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


class Optimizer:
    """SGD or Adam over a ParamStore; zeroes grads after every step."""

    def __init__(self, store: ParamStore, config: OptimizerConfig):
        self.store = store
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in store.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in store.items()}

    def step(self) -> None:
        store, cfg = self.store, self.config
        if not store.grads_ready:
            raise RuntimeError("optimizer_step: gradients absent (run backward first)")
        self.t += 1
        if cfg.rule == "sgd":
            for k, p in store.items():
                p.data -= cfg.lr * store.grads[k]
        else:
            c1 = 1.0 - cfg.beta1 ** self.t
            c2 = 1.0 - cfg.beta2 ** self.t
            for k, p in store.items():
                g = store.grads[k]
                m, v = self.m[k], self.v[k]
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        store.zero_grad()

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}t": np.array([float(self.t)])}
        for k in self.m:
            out[f"{prefix}m.{k}"] = self.m[k].copy()
            out[f"{prefix}v.{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, entries: Mapping[str, np.ndarray], prefix: str) -> None:
        self.t = int(entries[f"{prefix}t"][0])
        for k in self.m:
            self.m[k][...] = entries[f"{prefix}m.{k}"]
            self.v[k][...] = entries[f"{prefix}v.{k}"]


def optimizer_step(store: ParamStore, config: OptimizerConfig, state: Optimizer | None = None) -> Optimizer:
    """One update of ``store``; pass the returned optimizer back in to keep moment state."""
    opt = state if state is not None else Optimizer(store, config)
    opt.step()
    return opt


def clip_to_box(store: ParamStore, epsilon: float) -> None:
    if not epsilon > 0:
        raise ValueError(f"clip_to_box: epsilon must be positive, got {epsilon}")
    for p in store.values.values():
        np.clip(p.data, -epsilon, epsilon, out=p.data)


# -------------------------------------------------------------- grad checking


def finite_difference_check(f: Callable[[], Tensor], params: ParamStore, step: float = 1e-5,
                            max_coords: int | None = None, rng: np.random.Generator | None = None,
                            reduce: str = "tensor") -> float:
    """Max relative error between analytic and central-difference gradients.

    The error of a parameter is |a - c| / max(|a|, |c|, 1e-8). With
    ``reduce="tensor"`` (default) a and c are whole named parameter tensors
    and |.| is the Euclidean norm; with ``reduce="coordinate"`` every scalar
    is scored on its own, which is dominated by float64 roundoff for
    coordinates whose gradient is below roughly 1e-7 times the loss.

    ``f`` rebuilds its graph from the current parameter values on each call.
    With ``max_coords`` only a random subset of coordinates per parameter is
    probed.
    """
    if not step > 0:
        raise ValueError("finite_difference_check: step must be positive")
    if reduce not in ("tensor", "coordinate"):
        raise ValueError(f"unknown reduce {reduce!r}")
    first = f().item()
    current_tape().clear()
    second_t = f()
    if second_t.item() != first:
        current_tape().clear()
        raise RuntimeError("finite_difference_check: f is not deterministic")
    params.zero_grad()
    backward(second_t, params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for name, value in params.items():
            flat = value.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            analytic = params.grads[name].reshape(-1)[coords].copy()
            central = np.empty(len(coords))
            for k, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                central[k] = (fp - fm) / (2.0 * step)
            if reduce == "tensor":
                err = np.linalg.norm(analytic - central) / max(
                    np.linalg.norm(analytic), np.linalg.norm(central), 1e-8)
            else:
                err = np.max(np.abs(analytic - central) / np.maximum(
                    np.maximum(np.abs(analytic), np.abs(central)), 1e-8), initial=0.0)
            worst = max(worst, float(err))
    params.zero_grad()
    return worst


# ---------------------------------------------------------------- checkpoints

MAGIC = b"BRCSGAN1"


def save_checkpoint(path: str | Path, entries: Mapping[str, np.ndarray]) -> None:
    """Write ``entries`` in the BRCSGAN1 binary format (all little-endian).

    Layout: magic, u64 entry count, then per entry u64 name length, UTF-8
    name, u64 rank, rank x u64 dims, float64 values in row-major order.
    """
    chunks = [MAGIC, struct.pack("<Q", len(entries))]
    for name, arr in entries.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a BRCSGAN1 checkpoint")
    pos = 8
    (count,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes after {count} entries")
    return out
