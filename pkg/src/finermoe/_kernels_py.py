"""Pure-NumPy matrix-multiply kernels, used when the compiled extension is absent.

Accumulation runs over the inner index in ascending order, one rounded
multiply and one rounded add per term, exactly like the compiled scalar
loop. The two backends therefore produce bit-identical output. The
``threads`` argument is accepted for interface parity and ignored; the
loops here are sequential, so results cannot depend on it.
"""

import numpy as np

BACKEND = "python"


def matmul_f32(a, b, out, acc64, threads):
    if acc64:
        acc = np.zeros(out.shape, dtype=np.float64)
        for p in range(a.shape[1]):
            acc += a[:, p, None].astype(np.float64) * b[None, p, :].astype(np.float64)
        np.copyto(out, acc.astype(np.float32))
    else:
        acc = np.zeros(out.shape, dtype=np.float32)
        for p in range(a.shape[1]):
            acc += a[:, p, None] * b[None, p, :]
        np.copyto(out, acc)


def matmul_f64(a, b, out, threads):
    acc = np.zeros(out.shape, dtype=np.float64)
    for p in range(a.shape[1]):
        acc += a[:, p, None] * b[None, p, :]
    np.copyto(out, acc)
