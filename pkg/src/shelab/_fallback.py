"""Pure-numpy stepping kernel, the fallback when shelab._core is absent.

Must stay semantically identical to the compiled kernel, including the
floating-point evaluation order of the update expression.
"""

from __future__ import annotations

import numpy as np


def step_field(dW, c, inv_dx, kind, pa, pb, u):
    """Advance u (shape (nt+1, nx+1), row 0 prefilled) through all nt steps.

    Returns None on success, else (step, node) of the first non-finite value.
    """
    nt = dW.shape[0]
    for m in range(nt):
        row = u[m]
        interior = row[1:-1]
        if kind == 0:
            s = pa
        elif kind == 1:
            s = interior
        elif kind == 2:
            s = pa + pb * interior
        else:
            s = np.sin(interior)
        lap = (row[2:] - 2.0 * interior) + row[:-2]
        nxt = interior + c * lap + s * dW[m, 1:] * inv_dx
        finite = np.isfinite(nxt)
        if not finite.all():
            return m + 1, 1 + int(np.argmin(finite))
        u[m + 1, 0] = 1.0
        u[m + 1, -1] = 1.0
        u[m + 1, 1:-1] = nxt
    return None
