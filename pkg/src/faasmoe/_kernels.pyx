# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pipelined-method cost floor.

Mirrors ``faasmoe._kernels_py.pipelined_cost_floor`` operation for
operation; the two must return bit-identical arrays.
"""
import numpy as np

from libc.math cimport INFINITY


def pipelined_cost_floor(const long long[:, ::1] r,
                         const unsigned char[:, :, ::1] feasible,
                         const double[::1] head,
                         const double[::1] unit,
                         const double[::1] mem_gb,
                         const double[::1] lam,
                         double din_bs, double do_bs, double tdl,
                         long long beta_lo, long long beta_hi,
                         bint beta_multiplier):
    cdef Py_ssize_t n_exp = r.shape[0]
    cdef Py_ssize_t n_g = r.shape[1]
    cdef Py_ssize_t n_m = unit.shape[0]
    cdef Py_ssize_t n_beta = beta_hi - beta_lo + 1
    out = np.empty(n_beta if n_beta > 0 else 0, dtype=np.float64)
    if n_beta <= 0:
        return out
    cdef double[::1] o = out
    cdef Py_ssize_t b, i, gi, j
    cdef long long beta, rr, n, nblocks
    cdef double total, best, t_nblk, t_blk, slot, a, trep, c

    for b in range(n_beta):
        beta = beta_lo + b
        total = 0.0
        for i in range(n_exp):
            best = INFINITY
            for gi in range(n_g):
                rr = r[i, gi]
                if rr < 0:
                    continue
                n = (rr + beta - 1) // beta
                t_nblk = tdl + n * do_bs
                nblocks = beta if beta_multiplier else n
                for j in range(n_m):
                    if not feasible[i, gi, j]:
                        continue
                    a = din_bs + unit[j]
                    slot = a if a >= do_bs else do_bs
                    t_blk = tdl + beta * slot
                    trep = head[i] + t_nblk + nblocks * t_blk
                    c = ((gi + 1) * trep) * mem_gb[j] + lam[i] * trep
                    if c < best:
                        best = c
            total = total + best
        o[b] = total
    return out
