"""Compiled per-triple loops for training and bulk scoring.

These mirror ``ksr.model._score_grad`` with explicit O(n * d) loops so that a
training step costs time proportional to the table sizes, not to Python
dispatch overhead.
"""

import math
import warnings

import numpy as np
from numba import njit, prange
from numba.core.errors import NumbaWarning

warnings.filterwarnings("ignore", message="The TBB threading layer", category=NumbaWarning)


@njit(cache=True, fastmath=False)
def _lse(x, d):
    mx = x[0]
    for c in range(1, d):
        if x[c] > mx:
            mx = x[c]
    s = 0.0
    for c in range(d):
        s += math.exp(x[c] - mx)
    return mx + math.log(s)


@njit(cache=True)
def score_grad(ent, rs, ro, rf, h, r, t, sigma, want_grad, ga, gu, gb, gv, gf, buf):
    """Score of (h, r, t); fills ga/gu/gb/gv (n, d) and gf (n) when want_grad.

    ``buf`` is scratch of shape (8, d). Returns nan on non-finite features.
    """
    n = ent.shape[1]
    d = ent.shape[2]
    la = buf[0]
    lb = buf[1]
    lu = buf[2]
    lv = buf[3]
    p = buf[4]
    q = buf[5]
    g = buf[6]
    tmp = buf[7]

    # feature mixture weights
    fmax = rf[r, 0]
    for k in range(1, n):
        if rf[r, k] > fmax:
            fmax = rf[r, k]
    fsum = 0.0
    for k in range(n):
        fsum += math.exp(rf[r, k] - fmax)

    total = 0.0
    for k in range(n):
        pik = math.exp(rf[r, k] - fmax) / fsum
        za = _lse(ent[h, k], d)
        zb = _lse(rs[r, k], d)
        zu = _lse(ent[t, k], d)
        zv = _lse(ro[r, k], d)
        for c in range(d):
            la[c] = ent[h, k, c] - za
            lb[c] = rs[r, k, c] - zb
            lu[c] = ent[t, k, c] - zu
            lv[c] = ro[r, k, c] - zv
            tmp[c] = ent[h, k, c] + rs[r, k, c]
        zp = _lse(tmp, d)
        for c in range(d):
            p[c] = math.exp(tmp[c] - zp)
            tmp[c] = ent[t, k, c] + ro[r, k, c]
        zq = _lse(tmp, d)
        for c in range(d):
            q[c] = math.exp(tmp[c] - zq)
            g[c] = -abs(p[c] - q[c]) / sigma + la[c] + lb[c] + lu[c] + lv[c]
        lk = _lse(g, d)
        if not math.isfinite(lk):
            return np.nan
        total += pik * lk
        if want_grad:
            gf[k] = lk  # finished below once the total is known
            pb = 0.0
            qb = 0.0
            for c in range(d):
                rho = math.exp(g[c] - lk)
                diff = p[c] - q[c]
                sgn = 1.0 if diff > 0 else (-1.0 if diff < 0 else 0.0)
                beta = -rho * sgn / sigma
                g[c] = rho
                tmp[c] = beta
                pb += p[c] * beta
                qb += q[c] * beta
            for c in range(d):
                rho = g[c]
                dp = p[c] * (tmp[c] - pb)
                dq = q[c] * (tmp[c] - qb)
                ga[k, c] = pik * (rho - math.exp(la[c]) + dp)
                gb[k, c] = pik * (rho - math.exp(lb[c]) + dp)
                gu[k, c] = pik * (rho - math.exp(lu[c]) - dq)
                gv[k, c] = pik * (rho - math.exp(lv[c]) - dq)
    if want_grad:
        for k in range(n):
            pik = math.exp(rf[r, k] - fmax) / fsum
            gf[k] = pik * (gf[k] - total)
    return total


@njit(cache=True)
def _apply(ent, rs, ro, rf, h, r, t, scale, ga, gu, gb, gv, gf):
    n = ent.shape[1]
    d = ent.shape[2]
    for k in range(n):
        for c in range(d):
            ent[h, k, c] += scale * ga[k, c]
            ent[t, k, c] += scale * gu[k, c]
            rs[r, k, c] += scale * gb[k, c]
            ro[r, k, c] += scale * gv[k, c]
        rf[r, k] += scale * gf[k]


@njit(cache=True)
def _sgd_range(ent, rs, ro, rf, pos, neg, start, stop, alpha, gamma, sigma, losses):
    n = ent.shape[1]
    d = ent.shape[2]
    pga = np.empty((n, d))
    pgu = np.empty((n, d))
    pgb = np.empty((n, d))
    pgv = np.empty((n, d))
    pgf = np.empty(n)
    nga = np.empty((n, d))
    ngu = np.empty((n, d))
    ngb = np.empty((n, d))
    ngv = np.empty((n, d))
    ngf = np.empty(n)
    buf = np.empty((8, d))
    for i in range(start, stop):
        sp = score_grad(ent, rs, ro, rf, pos[i, 0], pos[i, 1], pos[i, 2], sigma, True,
                        pga, pgu, pgb, pgv, pgf, buf)
        sn = score_grad(ent, rs, ro, rf, neg[i, 0], neg[i, 1], neg[i, 2], sigma, True,
                        nga, ngu, ngb, ngv, ngf, buf)
        loss = gamma - sp + sn
        if not math.isfinite(loss):
            losses[i] = np.nan
            return i
        if loss > 0.0:
            losses[i] = loss
            # ascend the positive score, descend the negative one
            _apply(ent, rs, ro, rf, pos[i, 0], pos[i, 1], pos[i, 2], alpha, pga, pgu, pgb, pgv, pgf)
            _apply(ent, rs, ro, rf, neg[i, 0], neg[i, 1], neg[i, 2], -alpha, nga, ngu, ngb, ngv, ngf)
        else:
            losses[i] = 0.0
    return -1


@njit(cache=True)
def sgd_epoch(ent, rs, ro, rf, pos, neg, alpha, gamma, sigma, losses):
    """Sequential SGD over aligned positive/negative rows; returns index of a non-finite step or -1."""
    return _sgd_range(ent, rs, ro, rf, pos, neg, 0, pos.shape[0], alpha, gamma, sigma, losses)


@njit(cache=True, parallel=True)
def sgd_epoch_hogwild(ent, rs, ro, rf, pos, neg, alpha, gamma, sigma, losses, shards):
    """Lock-free SGD over ``shards`` contiguous slices updated concurrently."""
    m = pos.shape[0]
    bad = np.full(shards, -1, dtype=np.int64)
    for s in prange(shards):
        start = s * m // shards
        stop = (s + 1) * m // shards
        bad[s] = _sgd_range(ent, rs, ro, rf, pos, neg, start, stop, alpha, gamma, sigma, losses)
    for s in range(shards):
        if bad[s] >= 0:
            return bad[s]
    return -1


@njit(cache=True, parallel=True)
def score_many(ent, rs, ro, rf, heads, rels, tails, sigma):
    m = heads.shape[0]
    d = ent.shape[2]
    out = np.empty(m)
    for i in prange(m):
        buf = np.empty((8, d))
        dummy = np.empty((0, 0))
        out[i] = score_grad(ent, rs, ro, rf, heads[i], rels[i], tails[i], sigma, False,
                            dummy, dummy, dummy, dummy, np.empty(0), buf)
    return out
