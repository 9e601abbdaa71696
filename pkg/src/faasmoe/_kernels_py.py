"""Pure-Python (numpy) implementation of the hot planner kernel."""
from __future__ import annotations

import numpy as np


def pipelined_cost_floor(r, feasible, head, unit, mem_gb, lam, din_bs, do_bs, tdl,
                         beta_lo, beta_hi, beta_multiplier):
    """Per-beta sum over experts of the cheapest feasible pipelined option.

    ``r[i, g-1]`` is the per-replica token count of expert ``i`` with ``g``
    replicas (negative when that replica count is not allowed) and
    ``feasible[i, g-1, j]`` marks memory/payload-feasible options.  Each
    option is scored as its cost plus ``lam[i]`` times its replica time,
    a Lagrangian relaxation of the latency limit (``lam = 0`` gives the
    plain cost floor).
    """
    betas = np.arange(beta_lo, beta_hi + 1, dtype=np.int64)
    out = np.zeros(betas.shape[0], dtype=np.float64)
    if betas.size == 0:
        return out
    beta_f = betas.astype(np.float64)
    for i in range(r.shape[0]):
        best = np.full(betas.shape[0], np.inf)
        for gi in range(r.shape[1]):
            rr = int(r[i, gi])
            if rr < 0:
                continue
            n = (rr + betas - 1) // betas
            t_nblk = tdl + n.astype(np.float64) * do_bs
            nblocks = beta_f if beta_multiplier else n.astype(np.float64)
            for j in range(unit.shape[0]):
                if not feasible[i, gi, j]:
                    continue
                a = din_bs + unit[j]
                slot = a if a >= do_bs else do_bs
                t_blk = tdl + beta_f * slot
                trep = head[i] + t_nblk + nblocks * t_blk
                c = (float(gi + 1) * trep) * mem_gb[j] + lam[i] * trep
                np.minimum(best, c, out=best)
        out = out + best
    return out
