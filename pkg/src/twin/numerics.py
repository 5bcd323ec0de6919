"""Dense kernels shared by every stage: matmul, softmax, deterministic top-k.

Matrices are plain ``numpy.ndarray`` objects.  The product kernels here are
the only places multiply-adds are counted, so a code path that routes its
projections through them can be audited against the analytic cost model in
:mod:`twin.serving`.
"""
from __future__ import annotations

import contextlib
import contextvars
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


@dataclass
class FlopCounter:
    """Multiply-add and memory-read tallies, bucketed by phase label."""

    macs: Counter = field(default_factory=Counter)
    reads: Counter = field(default_factory=Counter)
    phase: str = "default"

    @property
    def total_macs(self) -> int:
        return int(sum(self.macs.values()))

    @property
    def total_reads(self) -> int:
        return int(sum(self.reads.values()))

    @contextlib.contextmanager
    def section(self, label: str) -> Iterator["FlopCounter"]:
        prev, self.phase = self.phase, label
        try:
            yield self
        finally:
            self.phase = prev


_ACTIVE: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "twin_flop_counter", default=None
)


@contextlib.contextmanager
def count_flops() -> Iterator[FlopCounter]:
    """Activate a fresh counter for the duration of the block."""
    counter = FlopCounter()
    token = _ACTIVE.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE.reset(token)


def active_counter() -> FlopCounter | None:
    return _ACTIVE.get()


@contextlib.contextmanager
def phase(label: str) -> Iterator[None]:
    """Attribute counts inside the block to ``label`` (no-op when not counting)."""
    counter = _ACTIVE.get()
    if counter is None:
        yield
        return
    with counter.section(label):
        yield


def record_reads(n: int) -> None:
    """Tally ``n`` row reads (gathers) against the active counter, if any."""
    counter = _ACTIVE.get()
    if counter is not None:
        counter.reads[counter.phase] += int(n)


def matmul(a, b) -> np.ndarray:
    """Matrix (or matrix-vector) product with multiply-add accounting.

    Accepts 1-D operands with numpy semantics: a vector on the left is a row,
    on the right a column.  Stacked (3-D) operands are multiplied batch-wise.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul needs at least 1-D operands")
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if inner_a != inner_b:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a, b)
    counter = _ACTIVE.get()
    if counter is not None:
        counter.macs[counter.phase] += int(out.size) * int(inner_a)
    return out


def rowwise_matmul(a, b) -> np.ndarray:
    """Matrix product whose rows do not depend on the other rows of ``a``.

    BLAS may pick a different kernel (and summation order) for a single row
    than for a block of rows, so the same row can differ in the last bit.
    Projections that must agree bit-for-bit between a cache built over the
    whole video pool and a per-request computation go through here.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    out = np.einsum("lh,hd->ld", a, b, optimize=False)
    counter = _ACTIVE.get()
    if counter is not None:
        counter.macs[counter.phase] += int(out.size) * int(a.shape[-1])
    return out


def block_matvec(x, w) -> np.ndarray:
    """Multiply each ``b``-wide column block of ``x`` by its own weight vector.

    ``x`` is (..., J*b) and ``w`` is (J, b); the result is (..., J).  This is
    the dense product with ``blockdiag(w[0], ..., w[J-1])`` without touching
    the zero blocks.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError("block weights must be (J, b)")
    J, b = w.shape
    if x.shape[-1] != J * b:
        raise ShapeError(f"block_matvec: width {x.shape[-1]} != {J}x{b}")
    out = np.einsum("...jb,jb->...j", x.reshape(x.shape[:-1] + (J, b)), w)
    counter = _ACTIVE.get()
    if counter is not None:
        counter.macs[counter.phase] += int(out.size) * int(b)
    return out


def softmax(v) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    v = np.asarray(v, dtype=float)
    if v.size == 0 or v.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def full_ranking(scores) -> np.ndarray:
    """All indices by descending score; equal scores keep ascending index."""
    scores = np.asarray(scores, dtype=float)
    # lexsort sorts by the last key first
    return np.lexsort((np.arange(scores.size), -scores))


def topk_indices(scores, k: int) -> np.ndarray:
    """Indices of the ``min(k, len)`` largest scores, best first.

    Ties are broken in favour of the smaller index, so the result is always a
    prefix of :func:`full_ranking`.  Runs in O(L + k log k).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=float).ravel()
    n = scores.size
    if k >= n:
        return full_ranking(scores)
    kth = np.partition(scores, n - k)[n - k]
    above = np.flatnonzero(scores > kth)
    need = k - above.size
    at = np.flatnonzero(scores == kth)[:need]
    chosen = np.concatenate([above, at])
    order = np.lexsort((chosen, -scores[chosen]))
    return chosen[order]
