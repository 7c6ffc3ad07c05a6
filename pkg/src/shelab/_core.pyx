# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled stepping kernel for the explicit finite-difference scheme.

Semantics are identical to shelab._fallback.step_field; keep the two in
sync, including the floating-point evaluation order of the update.
"""

from libc.math cimport sin, isfinite


def step_field(double[:, ::1] dW, double c, double inv_dx,
               int kind, double pa, double pb, double[:, ::1] u):
    """Advance u (shape (nt+1, nx+1), row 0 prefilled) through all nt steps.

    Returns None on success, else (step, node) of the first non-finite value.
    """
    cdef Py_ssize_t nt = dW.shape[0]
    cdef Py_ssize_t last = u.shape[1] - 1
    cdef Py_ssize_t m, j
    cdef double v, s, lap
    cdef Py_ssize_t bad = -1

    for m in range(nt):
        u[m + 1, 0] = 1.0
        u[m + 1, last] = 1.0
        for j in range(1, last):
            v = u[m, j]
            if kind == 0:
                s = pa
            elif kind == 1:
                s = v
            elif kind == 2:
                s = pa + pb * v
            else:
                s = sin(v)
            lap = u[m, j + 1] - 2.0 * v + u[m, j - 1]
            v = v + c * lap + s * dW[m, j] * inv_dx
            if not isfinite(v):
                bad = j
                break
            u[m + 1, j] = v
        if bad >= 0:
            return (m + 1, bad)
    return None
