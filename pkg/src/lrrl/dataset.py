"""The immutable offline corpus: generation, sampling, binary IO, statistics.

A dataset is collected once from a scripted behavior policy and never mutated
afterwards; trainers only ever read minibatches from it. Serialization is a
little-endian binary format ("LRDS") whose roundtrip is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .envs import BehaviorPolicyKind, behavior_action, get_env

DATASET_MAGIC = b"LRDS"
DATASET_VERSION = 1


class DatasetFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DatasetFormatError):
    pass


class BadVersionError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class DimMismatchError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass(frozen=True)
class DatasetMeta:
    env_id: str
    state_dim: int
    action_dim: int
    behavior_kind: str
    seed: int
    size: int


def _behavior_string(kind: BehaviorPolicyKind) -> str:
    return f"{kind.kind}|{kind.noise_std!r}|{kind.gain_scale!r}"


def parse_behavior_string(s: str) -> BehaviorPolicyKind:
    kind, noise, gain = s.split("|")
    return BehaviorPolicyKind(kind, float(noise), float(gain))


@dataclass(frozen=True)
class Batch:
    """Column view of sampled transitions; every row equals a stored record."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray

    def __len__(self) -> int:
        return self.s.shape[0]


class FixedDataset:
    """Columnar transition store. Arrays are read-only after construction."""

    def __init__(self, meta: DatasetMeta, s, a, r, s_next, done):
        size = len(r)
        if size < 1:
            raise ValueError("a dataset must hold at least one transition")
        if meta.size != size:
            raise ValueError(f"meta.size {meta.size} != record count {size}")
        self.meta = meta
        self.s = np.ascontiguousarray(s, dtype=np.float64)
        self.a = np.ascontiguousarray(a, dtype=np.float64)
        self.r = np.ascontiguousarray(r, dtype=np.float64)
        self.s_next = np.ascontiguousarray(s_next, dtype=np.float64)
        self.done = np.ascontiguousarray(done, dtype=bool)
        if self.s.shape != (size, meta.state_dim) or self.s_next.shape != self.s.shape:
            raise DimMismatchError(f"state arrays {self.s.shape} vs meta {meta}")
        if self.a.shape != (size, meta.action_dim):
            raise DimMismatchError(f"action array {self.a.shape} vs meta {meta}")
        if not np.isfinite(self.r).all():
            raise ValueError("rewards must be finite")
        for arr in (self.s, self.a, self.r, self.s_next, self.done):
            arr.flags.writeable = False
        self._pairs = None

    @property
    def size(self) -> int:
        return self.meta.size

    def __len__(self) -> int:
        return self.meta.size

    def transition(self, i: int) -> Transition:
        return Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i], bool(self.done[i]))

    def transitions(self) -> list[Transition]:
        return [self.transition(i) for i in range(self.size)]

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])

    def pairs(self) -> np.ndarray:
        """All (s, a) rows concatenated, shape (size, state_dim + action_dim)."""
        if self._pairs is None:
            p = np.concatenate([self.s, self.a], axis=1)
            p.flags.writeable = False
            self._pairs = p
        return self._pairs

    def equals(self, other: "FixedDataset") -> bool:
        return (
            self.meta == other.meta
            and np.array_equal(self.s, other.s)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.s_next, other.s_next)
            and np.array_equal(self.done, other.done)
        )

    def behavior(self) -> BehaviorPolicyKind:
        return parse_behavior_string(self.meta.behavior_kind)


def generate_dataset(
    env_id: str, behavior: BehaviorPolicyKind, n_transitions: int, seed: int
) -> FixedDataset:
    """Collect full episodes with the scripted policy until n records exist.

    One rng stream (from ``seed``) drives both episode resets and policy
    noise, so regeneration with the same arguments is bitwise identical.
    """
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    env = get_env(env_id)
    rng = np.random.default_rng(seed)
    ss, aa, rr, ss2, dd = [], [], [], [], []
    count = 0
    while count < n_transitions:
        state = env.reset(rng)
        done = False
        while not done and count < n_transitions:
            action = behavior_action(behavior, state, rng)
            nxt, reward, done = env.step(state, action)
            ss.append(state.state)
            aa.append(action)
            rr.append(reward)
            ss2.append(nxt.state)
            dd.append(done)
            state = nxt
            count += 1
    meta = DatasetMeta(
        env_id=env_id,
        state_dim=env.spec.state_dim,
        action_dim=env.spec.action_dim,
        behavior_kind=_behavior_string(behavior),
        seed=int(seed),
        size=n_transitions,
    )
    return FixedDataset(meta, np.array(ss), np.array(aa), np.array(rr), np.array(ss2), np.array(dd))


def sample_indices(d: FixedDataset, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-with-replacement record indices."""
    if not (1 <= n <= d.size):
        raise ValueError(f"minibatch size {n} not in [1, {d.size}]")
    return rng.integers(0, d.size, size=n)


def sample_minibatch(d: FixedDataset, n: int, rng: np.random.Generator) -> list[Transition]:
    return [d.transition(int(i)) for i in sample_indices(d, n, rng)]


def _record_dtype(state_dim: int, action_dim: int) -> np.dtype:
    return np.dtype(
        [
            ("s", "<f8", (state_dim,)),
            ("a", "<f8", (action_dim,)),
            ("r", "<f8"),
            ("s_next", "<f8", (state_dim,)),
            ("done", "u1"),
        ]
    )


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_dataset(path, d: FixedDataset) -> None:
    rec = np.zeros(d.size, dtype=_record_dtype(d.meta.state_dim, d.meta.action_dim))
    rec["s"] = d.s
    rec["a"] = d.a
    rec["r"] = d.r
    rec["s_next"] = d.s_next
    rec["done"] = d.done.astype(np.uint8)
    blob = b"".join(
        [
            DATASET_MAGIC,
            struct.pack("<I", DATASET_VERSION),
            _pack_str(d.meta.env_id),
            struct.pack("<II", d.meta.state_dim, d.meta.action_dim),
            _pack_str(d.meta.behavior_kind),
            struct.pack("<QQ", d.meta.seed, d.meta.size),
            rec.tobytes(),
        ]
    )
    from .ioutil import atomic_write_bytes

    atomic_write_bytes(path, blob)


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.path, self.off = blob, path, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.blob):
            raise TruncatedFileError(f"{self.path}: truncated at byte {self.off}")
        vals = struct.unpack_from(fmt, self.blob, self.off)
        self.off += size
        return vals

    def take_str(self) -> str:
        (length,) = self.take("<I")
        if self.off + length > len(self.blob):
            raise TruncatedFileError(f"{self.path}: truncated string at byte {self.off}")
        raw = self.blob[self.off : self.off + length]
        self.off += length
        return raw.decode("utf-8")


def load_dataset(path) -> FixedDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != DATASET_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    r = _Reader(blob, path)
    r.off = 4
    (version,) = r.take("<I")
    if version != DATASET_VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    env_id = r.take_str()
    state_dim, action_dim = r.take("<II")
    behavior_kind = r.take_str()
    seed, size = r.take("<QQ")
    try:
        env = get_env(env_id)
    except KeyError:
        env = None
    if env is not None and (env.spec.state_dim != state_dim or env.spec.action_dim != action_dim):
        raise DimMismatchError(
            f"{path}: header dims ({state_dim}, {action_dim}) do not match env {env_id!r}"
        )
    dtype = _record_dtype(state_dim, action_dim)
    need = r.off + size * dtype.itemsize
    if len(blob) < need:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, need {need}")
    rec = np.frombuffer(blob, dtype=dtype, count=size, offset=r.off)
    meta = DatasetMeta(env_id, int(state_dim), int(action_dim), behavior_kind, int(seed), int(size))
    return FixedDataset(
        meta,
        rec["s"].astype(np.float64),
        rec["a"].astype(np.float64),
        rec["r"].astype(np.float64),
        rec["s_next"].astype(np.float64),
        rec["done"].astype(bool),
    )


def dataset_stats(d: FixedDataset) -> dict:
    """Descriptive statistics: rewards, action histograms, episode returns.

    Episode boundaries are recovered from the stored done flags; a truncated
    trailing episode is excluded from return statistics.
    """
    env = get_env(d.meta.env_id)
    lo, hi = env.spec.box_low, env.spec.box_high
    hists = []
    for j in range(d.meta.action_dim):
        counts, edges = np.histogram(d.a[:, j], bins=20, range=(lo[j], hi[j]))
        hists.append({"counts": counts.tolist(), "edges": edges.tolist()})
    ends = np.flatnonzero(d.done)
    episode_returns = []
    start = 0
    for e in ends:
        episode_returns.append(float(d.r[start : e + 1].sum()))
        start = e + 1
    return {
        "size": d.size,
        "env_id": d.meta.env_id,
        "behavior": d.meta.behavior_kind,
        "seed": d.meta.seed,
        "reward_mean": float(d.r.mean()),
        "reward_min": float(d.r.min()),
        "reward_max": float(d.r.max()),
        "action_histograms": hists,
        "episode_count": int(len(ends)),
        "mean_episode_return": float(np.mean(episode_returns)) if episode_returns else None,
    }
