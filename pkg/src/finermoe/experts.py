"""SwiGLU expert forward, for the full-size shared expert and the
finer-grained sparse experts.

Per row: y_inner = (x W1) * silu(x Wg), y = y_inner W2. No bias terms;
the activation is fixed to SiLU.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from finermoe.numerics import Matrix, matmul, silu


@dataclass
class DenseFfnWeights:
    """Pretrained dense FFN: W1, Wg of shape h x H; W2 of shape H x h."""

    w1: Matrix
    wg: Matrix
    w2: Matrix

    def __post_init__(self):
        h, H = self.w1.shape
        if self.wg.shape != (h, H) or self.w2.shape != (H, h):
            raise ValueError(
                f"inconsistent FFN shapes: w1 {self.w1.shape}, wg {self.wg.shape}, "
                f"w2 {self.w2.shape}"
            )

    @property
    def h(self) -> int:
        return self.w1.rows

    @property
    def H(self) -> int:
        return self.w1.cols

    def astype(self, dtype) -> "DenseFfnWeights":
        return DenseFfnWeights(self.w1.astype(dtype), self.wg.astype(dtype), self.w2.astype(dtype))

    def copy(self) -> "DenseFfnWeights":
        return DenseFfnWeights(self.w1.copy(), self.wg.copy(), self.w2.copy())


# A shared expert is a full-size FFN; reuse the same container.
SharedExpertWeights = DenseFfnWeights


@dataclass
class ExpertWeights:
    """One sparse expert: W1, Wg of shape h x H_e; W2 of shape H_e x h_e."""

    w1: Matrix
    wg: Matrix
    w2: Matrix

    def __post_init__(self):
        h, H_e = self.w1.shape
        if self.wg.shape != (h, H_e) or self.w2.rows != H_e:
            raise ValueError(
                f"inconsistent expert shapes: w1 {self.w1.shape}, wg {self.wg.shape}, "
                f"w2 {self.w2.shape}"
            )

    @property
    def h_e(self) -> int:
        return self.w2.cols

    def astype(self, dtype) -> "ExpertWeights":
        return ExpertWeights(self.w1.astype(dtype), self.wg.astype(dtype), self.w2.astype(dtype))

    def copy(self) -> "ExpertWeights":
        return ExpertWeights(self.w1.copy(), self.wg.copy(), self.w2.copy())

    def flat(self) -> np.ndarray:
        """All weights concatenated into one vector (w1, wg, w2 order)."""
        return np.concatenate([self.w1.a.ravel(), self.wg.a.ravel(), self.w2.a.ravel()])


def expert_forward(x: Matrix, w: ExpertWeights | DenseFfnWeights, acc64: bool = False) -> Matrix:
    """SwiGLU forward of a token batch; output is L x h_e (L x h for a dense FFN)."""
    if x.cols != w.w1.rows:
        raise ValueError(f"input width {x.cols} does not match expert input dim {w.w1.rows}")
    up = matmul(x, w.w1, acc64=acc64)
    gate = matmul(x, w.wg, acc64=acc64)
    inner = Matrix.wrap(up.a * silu(gate.a))
    return matmul(inner, w.w2, acc64=acc64)


def shared_forward(x: Matrix, w: DenseFfnWeights, acc64: bool = False) -> Matrix:
    """Full-size SwiGLU forward; identical computation at (H, h)."""
    return expert_forward(x, w, acc64=acc64)
