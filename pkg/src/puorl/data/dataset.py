"""Columnar transition storage and the ``.puorl`` on-disk format."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import BadMagicError, DataError, DimensionMismatchError, FormatError, TruncatedFileError

MAGIC = b"PUORLDS1"
VERSION = 1
_HEADER = struct.Struct("<8sIIII")


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    true_domain: int = 0


class TransitionDataset:
    """Immutable-by-convention columns ``s, a, r, s_next, done``.

    The domain tag of each row rides along in ``_true_domain`` so subsets and
    unions stay gradeable, but learners never see it: the only reader is
    :func:`reveal_true_domains`.
    """

    __slots__ = ("s", "a", "r", "s_next", "done", "_true_domain")

    def __init__(self, s, a, r, s_next, done, true_domain=None):
        s = np.ascontiguousarray(s, dtype=np.float32)
        a = np.ascontiguousarray(a, dtype=np.float32)
        if s.ndim != 2 or a.ndim != 2:
            raise DataError("s and a must be 2-D")
        n = s.shape[0]
        if true_domain is None:
            true_domain = np.zeros(n, dtype=np.uint8)
        cols = dict(
            s=s,
            a=a,
            r=np.ascontiguousarray(r, dtype=np.float32).reshape(-1),
            s_next=np.ascontiguousarray(s_next, dtype=np.float32),
            done=np.ascontiguousarray(done, dtype=np.float32).reshape(-1),
            _true_domain=np.ascontiguousarray(true_domain, dtype=np.uint8).reshape(-1),
        )
        for k, v in cols.items():
            if v.shape[0] != n:
                raise DataError(f"column {k} has {v.shape[0]} rows, expected {n}")
            v.flags.writeable = False
            object.__setattr__(self, k, v)
        if self.s_next.shape != s.shape:
            raise DataError(f"s_next shape {self.s_next.shape} != s shape {s.shape}")
        for k in ("s", "a", "r", "s_next"):
            if not np.all(np.isfinite(cols[k])):
                raise DataError(f"column {k} holds non-finite values")

    def __setattr__(self, name, value):
        raise AttributeError("TransitionDataset is immutable")

    @property
    def count(self):
        return self.s.shape[0]

    @property
    def state_dim(self):
        return self.s.shape[1]

    @property
    def action_dim(self):
        return self.a.shape[1]

    def __len__(self):
        return self.count

    def __repr__(self):
        return f"TransitionDataset(count={self.count}, state_dim={self.state_dim}, action_dim={self.action_dim})"

    def __eq__(self, other):
        if not isinstance(other, TransitionDataset):
            return NotImplemented
        return all(
            getattr(self, k).shape == getattr(other, k).shape
            and getattr(self, k).tobytes() == getattr(other, k).tobytes()
            for k in self.__slots__
        )

    __hash__ = None

    def subset(self, index):
        index = np.asarray(index)
        return TransitionDataset(self.s[index], self.a[index], self.r[index], self.s_next[index],
                                 self.done[index], self._true_domain[index])

    def with_rewards(self, r):
        return TransitionDataset(self.s, self.a, r, self.s_next, self.done, self._true_domain)

    def transitions(self):
        return [Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i], bool(self.done[i]),
                           int(self._true_domain[i])) for i in range(self.count)]

    @classmethod
    def from_transitions(cls, transitions):
        if not transitions:
            raise DataError("no transitions")
        return cls(np.stack([t.s for t in transitions]), np.stack([t.a for t in transitions]),
                   [t.r for t in transitions], np.stack([t.s_next for t in transitions]),
                   [t.done for t in transitions], [t.true_domain for t in transitions])

    @classmethod
    def from_columns(cls, cols, true_domain=0):
        n = len(cols["r"])
        return cls(cols["s"], cols["a"], cols["r"], cols["s_next"], cols["done"],
                   np.full(n, true_domain, dtype=np.uint8))


def concat(*datasets):
    datasets = [d for d in datasets if d is not None]
    if not datasets:
        raise DataError("nothing to concatenate")
    dims = {(d.state_dim, d.action_dim) for d in datasets}
    if len(dims) != 1:
        raise DimensionMismatchError("dataset dims", datasets[0].state_dim, sorted(dims))
    return TransitionDataset(*(np.concatenate([getattr(d, k) for d in datasets])
                               for k in TransitionDataset.__slots__))


def reveal_true_domains(dataset):
    """Hidden domain labels (0 = positive). Evaluation code only."""
    return dataset._true_domain


def columns(dataset):
    return {"s": dataset.s, "a": dataset.a, "r": dataset.r, "s_next": dataset.s_next, "done": dataset.done}


# ------------------------------------------------------------------- file io

def to_bytes(dataset):
    parts = [_HEADER.pack(MAGIC, VERSION, dataset.count, dataset.state_dim, dataset.action_dim)]
    for k in ("s", "a", "r", "s_next", "done"):
        parts.append(getattr(dataset, k).astype("<f4").tobytes())
    parts.append(dataset._true_domain.astype(np.uint8).tobytes())
    return b"".join(parts)


def from_bytes(data, state_dim=None, action_dim=None):
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(data[:len(MAGIC)])!r}, expected {MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"header needs {_HEADER.size} bytes, file has {len(data)}")
    _, version, n, sd, ad = _HEADER.unpack_from(data)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if state_dim is not None and sd != state_dim:
        raise DimensionMismatchError("state_dim", state_dim, sd)
    if action_dim is not None and ad != action_dim:
        raise DimensionMismatchError("action_dim", action_dim, ad)
    widths = [("s", sd), ("a", ad), ("r", 1), ("s_next", sd), ("done", 1)]
    expected = _HEADER.size + 4 * n * sum(w for _, w in widths) + n
    if len(data) < expected:
        raise TruncatedFileError(f"expected {expected} bytes, file has {len(data)}")
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes")
    off = _HEADER.size
    cols = {}
    for k, w in widths:
        arr = np.frombuffer(data, dtype="<f4", count=n * w, offset=off)
        cols[k] = arr.reshape(n, w) if k in ("s", "a", "s_next") else arr
        off += 4 * n * w
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=off)
    return TransitionDataset(cols["s"], cols["a"], cols["r"], cols["s_next"], cols["done"], labels)


def atomic_write(path, payload):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save(dataset, path):
    atomic_write(path, to_bytes(dataset))


def load(path, state_dim=None, action_dim=None):
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), state_dim, action_dim)
