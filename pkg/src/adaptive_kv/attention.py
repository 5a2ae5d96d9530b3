"""Dense causal attention numerics.

All engine math is float64; half precision exists only in the byte
accounting model (see metrics). Matrices are plain 2-D numpy arrays in
row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ROW_SUM_TOL = 1e-9


class AttentionError(ValueError):
    """Raised on malformed matrices or dimension mismatches."""


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce input to a finite float64 2-D array."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise AttentionError(f"{name} must be 2-D, got ndim={m.ndim}")
    if m.size == 0:
        raise AttentionError("empty input")
    if not np.all(np.isfinite(m)):
        raise AttentionError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class AttentionMap:
    """Square row-stochastic causal matrix of attention scores.

    Row i holds the attention distribution of query position i over key
    positions 0..i; entries above the diagonal are exactly zero.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = as_matrix(self.matrix, "attention map")
        if m.shape[0] != m.shape[1]:
            raise AttentionError(
                f"attention map must be square, got {m.shape[0]}x{m.shape[1]}"
            )
        if np.any(m < 0.0):
            raise AttentionError("attention map has negative entries")
        if np.any(np.abs(m.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise AttentionError("attention map rows must sum to 1")
        if np.any(np.triu(m, k=1) != 0.0):
            raise AttentionError("attention map must be causal (zero above diagonal)")
        object.__setattr__(self, "matrix", m)
        self.matrix.setflags(write=False)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def softmax_rows(m, causal_lengths: Sequence[int] | None = None) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety.

    When ``causal_lengths`` is given, row i is normalized over its first
    ``causal_lengths[i]`` columns and the rest are set to exactly zero.
    """
    logits = as_matrix(m, "softmax input")
    n_rows, n_cols = logits.shape
    if causal_lengths is None:
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)

    if len(causal_lengths) != n_rows:
        raise AttentionError(
            f"causal_lengths has {len(causal_lengths)} entries for {n_rows} rows"
        )
    out = np.zeros_like(logits)
    for i, length in enumerate(causal_lengths):
        if not 1 <= length <= n_cols:
            raise AttentionError(f"row {i}: causal length {length} out of range")
        row = logits[i, :length]
        shifted = row - row.max()
        exp = np.exp(shifted)
        out[i, :length] = exp / exp.sum()
    return out


def softmax_vector(v) -> np.ndarray:
    """Softmax of a single logit vector (max-subtracted)."""
    row = np.asarray(v, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise AttentionError("empty input")
    shifted = row - row.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def causal_attention(Q, K, V, d_k: int) -> tuple[AttentionMap, np.ndarray]:
    """Scaled dot-product attention with a causal mask.

    Returns the full attention map A = softmax(Q K^T / sqrt(d_k)) and the
    attended output A @ V.
    """
    q = as_matrix(Q, "Q")
    k = as_matrix(K, "K")
    v = as_matrix(V, "V")
    if d_k < 1:
        raise AttentionError(f"d_k must be >= 1, got {d_k}")
    if q.shape[1] != d_k:
        raise AttentionError(f"Q has {q.shape[1]} columns, expected d_k={d_k}")
    if k.shape[1] != d_k:
        raise AttentionError(f"K has {k.shape[1]} columns, expected d_k={d_k}")
    if k.shape[0] != v.shape[0]:
        raise AttentionError(
            f"V has {v.shape[0]} rows, expected {k.shape[0]} to match K"
        )
    if q.shape[0] != k.shape[0]:
        raise AttentionError(
            f"Q has {q.shape[0]} rows, expected {k.shape[0]} to match K"
        )
    logits = q @ k.T / np.sqrt(float(d_k))
    weights = softmax_rows(logits, causal_lengths=range(1, q.shape[0] + 1))
    return AttentionMap(weights), weights @ v
