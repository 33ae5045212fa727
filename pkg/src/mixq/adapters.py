"""Low-rank adapters over a frozen quantized base, and LoftQ initialization.

Shape convention used everywhere in the package: ``A`` is ``d_out x r``,
``B`` is ``r x d_in`` and the update is the product ``A @ B``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .quantizer import Codebook, QuantizedMatrix, dequantize, load_quantized, quantize

GAUSSIAN_INIT_STD = 0.02


@dataclass(frozen=True)
class LoraAdapter:
    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        B = np.asarray(self.B, dtype=np.float64)
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
            raise ValueError(f"incompatible adapter factors {A.shape} and {B.shape}")
        if A.shape[1] > min(A.shape[0], B.shape[1]):
            raise ValueError("rank exceeds min(d_out, d_in)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.B.shape[1]

    @property
    def n_params(self) -> int:
        return self.rank * (self.d_out + self.d_in)

    def delta(self) -> np.ndarray:
        return self.A @ self.B

    @classmethod
    def zeros(cls, d_out: int, d_in: int, rank: int = 0) -> "LoraAdapter":
        return cls(np.zeros((d_out, rank)), np.zeros((rank, d_in)))

    @classmethod
    def gaussian(cls, d_out: int, d_in: int, rank: int, rng: np.random.Generator) -> "LoraAdapter":
        """Standard LoRA start: random ``A``, zero ``B``, so ``A @ B == 0``."""
        A = rng.normal(0.0, GAUSSIAN_INIT_STD, size=(d_out, rank))
        return cls(A, np.zeros((rank, d_in)))


def lora_forward(W_frozen: QuantizedMatrix, adapter: LoraAdapter, X, b) -> np.ndarray:
    """``(W X + b) + (A B) X`` with ``X`` holding one input per column."""
    X = np.asarray(X, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != W_frozen.cols:
        raise ValueError(f"input shape {X.shape} does not match weight {W_frozen.shape}")
    if adapter.d_out != W_frozen.rows or adapter.d_in != W_frozen.cols:
        raise ValueError("adapter shape does not match the frozen weight")
    if b.ndim == 1:
        b = b[:, None]
    if b.shape[0] != W_frozen.rows:
        raise ValueError(f"bias shape {b.shape} does not match weight rows {W_frozen.rows}")
    frozen = dequantize(W_frozen) @ X + b
    return frozen + adapter.delta() @ X


def _canonical_signs(U: np.ndarray, Vt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    U = U.copy()
    Vt = Vt.copy()
    for i in range(U.shape[1]):
        col = U[:, i]
        tol = 1e-12 * np.max(np.abs(col)) if col.size else 0.0
        nz = np.flatnonzero(np.abs(col) > tol)
        if nz.size and col[nz[0]] < 0:
            U[:, i] = -col
            Vt[i, :] = -Vt[i, :]
    return U, Vt


def truncated_svd(R, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``r`` factors of ``R`` with singular values split evenly.

    Returns ``A = U_r sqrt(S_r)`` and ``B = sqrt(S_r) V_r^T``.  Each left
    singular vector is signed so its first nonzero entry is positive.
    """
    R = np.asarray(R, dtype=np.float64)
    rows, cols = R.shape
    if r < 0 or r > min(rows, cols):
        raise ValueError(f"rank {r} out of range for a {rows}x{cols} matrix")
    if not np.all(np.isfinite(R)):
        raise ValueError("residual has non-finite entries")
    if r == 0:
        return np.zeros((rows, 0)), np.zeros((0, cols))
    # LinAlgError on non-convergence is propagated, never swallowed.
    U, s, Vt = np.linalg.svd(R, full_matrices=False)
    U, Vt = _canonical_signs(U[:, :r], Vt[:r, :])
    root = np.sqrt(s[:r])
    return U * root[None, :], root[:, None] * Vt


@dataclass(frozen=True)
class LoftqInit:
    Q: QuantizedMatrix
    adapter: LoraAdapter
    iterations: int
    residual_norm: float
    history: tuple[float, ...] = field(default=())

    def save(self, fh) -> None:
        np.savez(
            fh,
            Q=np.frombuffer(self.Q.to_bytes(), dtype=np.uint8),
            A=self.adapter.A,
            B=self.adapter.B,
            iterations=np.int64(self.iterations),
            residual_norm=np.float64(self.residual_norm),
            history=np.asarray(self.history, dtype=np.float64),
        )

    @classmethod
    def load(cls, fh) -> "LoftqInit":
        with np.load(fh) as data:
            return cls(
                Q=load_quantized(data["Q"].tobytes()),
                adapter=LoraAdapter(data["A"], data["B"]),
                iterations=int(data["iterations"]),
                residual_norm=float(data["residual_norm"]),
                history=tuple(float(x) for x in data["history"]),
            )

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.save(buf)
        return buf.getvalue()


def loftq_init(W, codebook: Codebook, block_size: int = 64, r: int = 4, T: int = 1) -> LoftqInit:
    """Alternate quantizing ``W - A B`` and refitting ``A B`` to the residual."""
    if T < 1:
        raise ValueError("T must be >= 1")
    W = np.asarray(W, dtype=np.float64)
    d_out, d_in = W.shape
    A = np.zeros((d_out, r))
    B = np.zeros((r, d_in))
    history = []
    Q = None
    for _ in range(T):
        Q = quantize(W - A @ B, codebook, block_size)
        residual = W - dequantize(Q)
        A, B = truncated_svd(residual, r)
        history.append(float(np.linalg.norm(residual - A @ B)))
    return LoftqInit(Q, LoraAdapter(A, B), T, history[-1], tuple(history))
