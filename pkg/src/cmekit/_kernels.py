"""Hot loops of the direct solver and the closed moment right-hand side.

Every kernel exists twice: a numba-compiled loop and a vectorized numpy
version. The numba path is used when numba imports and ``CMEKIT_NUMBA`` is
not set to ``0``; :func:`set_backend` switches at runtime (tests and the
benchmark use it). Both paths share one open-addressing hash table layout,
so a state space built with one backend can be stepped with the other.
"""
from __future__ import annotations

import os

import numpy as np

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_FNV_OFFSET = np.uint64(14695981039346656037)
_FNV_PRIME = np.uint64(1099511628211)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)


# ---------------------------------------------------------------------------
# numpy implementations


def _hash_rows_np(X):
    h = np.full(X.shape[0], _FNV_OFFSET, dtype=np.uint64)
    for i in range(X.shape[1]):
        h ^= X[:, i].astype(np.int64).view(np.uint64)
        h *= _FNV_PRIME
    h ^= h >> _S30
    h *= _MIX1
    h ^= h >> _S27
    h *= _MIX2
    h ^= h >> _S31
    return h


def _table_lookup_np(slots, X, Q):
    mask = np.uint64(slots.shape[0] - 1)
    pos = _hash_rows_np(Q) & mask
    out = np.full(Q.shape[0], -1, dtype=np.int64)
    pending = np.arange(Q.shape[0])
    pos = pos[pending]
    while pending.size:
        cand = slots[pos.astype(np.int64)]
        empty = cand < 0
        hit = np.zeros(pending.size, dtype=bool)
        nz = ~empty
        if nz.any():
            hit[nz] = np.all(X[cand[nz]] == Q[pending[nz]], axis=1)
        out[pending[hit]] = cand[hit]
        keep = ~(empty | hit)
        pending = pending[keep]
        pos = (pos[keep] + np.uint64(1)) & mask
    return out


def _table_insert_np(slots, X, rows):
    mask = np.uint64(slots.shape[0] - 1)
    pos = _hash_rows_np(X[rows]) & mask
    for r, p in zip(rows.tolist(), pos.tolist()):
        while slots[p] >= 0:
            p = (p + 1) & int(mask)
        slots[p] = r


def _propensities_np(X, pairs, rates):
    N, R = X.shape[0], pairs.shape[0]
    A = np.broadcast_to(rates, (N, R)).copy()
    Xf = X.astype(np.float64)
    for j in range(R):
        a, b = pairs[j]
        if a < 0:
            continue
        if b < 0:
            A[:, j] *= Xf[:, a]
        elif a == b:
            A[:, j] *= Xf[:, a] * (Xf[:, a] - 1.0) * 0.5
        else:
            A[:, j] *= Xf[:, a] * Xf[:, b]
    return A


def _euler_sweep_np(X, succ, p, active, size, pairs, rates, h, delta2,
                    newp, big, cand_k, cand_j, cand_f):
    newp[:size] = 0.0
    big[:size] = False
    act = np.flatnonzero(active[:size])
    A = _propensities_np(X[act], pairs, rates)
    out = A.sum(axis=1)
    max_out = float(out.max()) if out.size else 0.0
    bad = -1
    over = np.flatnonzero(h * out >= 1.0)
    if over.size:
        bad = int(act[over[0]])
    pk = p[act]
    newp[act] = pk * (1.0 - h * out)
    F = h * A * pk[:, None]
    T = succ[act].astype(np.int64)
    flow = (T >= 0) & (F > 0.0)
    tgt = T[flow]
    newp[:size] += np.bincount(tgt, weights=F[flow], minlength=size)[:size]
    big[tgt[F[flow] > delta2]] = True
    rows, cols = np.nonzero((T < 0) & (F > 0.0))
    ncand = rows.size
    m = min(ncand, cand_k.shape[0])
    cand_k[:m] = act[rows[:m]]
    cand_j[:m] = cols[:m]
    cand_f[:m] = F[rows[:m], cols[:m]]
    return ncand, max_out, bad


def _resolve_inactive_np(newp, active, big, size):
    idle = ~active[:size] & (newp[:size] > 0.0)
    wake = idle & big[:size]
    lost = idle & ~big[:size]
    defect = float(newp[:size][lost].sum())
    newp[:size][lost] = 0.0
    active[:size] |= wake
    return defect


def _prune_np(p, active, size, delta1):
    drop = active[:size] & (p[:size] <= delta1)
    mass = float(p[:size][drop].sum())
    p[:size][drop] = 0.0
    active[:size] &= ~drop
    return mass


def _scatter_add_np(target, idx, vals):
    np.add.at(target, idx, vals)


def _closure_eval_np(ext, factors, coeffs, targets, nq):
    vals = coeffs * np.prod(ext[factors], axis=1)
    return np.bincount(targets, weights=vals, minlength=nq)


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit(cache=True)
    def _hash_row_nb(row):
        h = np.uint64(14695981039346656037)
        for i in range(row.shape[0]):
            h ^= np.uint64(np.int64(row[i]))
            h *= np.uint64(1099511628211)
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
        return h

    @njit(cache=True)
    def _hash_rows_nb(X):
        out = np.empty(X.shape[0], dtype=np.uint64)
        for k in range(X.shape[0]):
            out[k] = _hash_row_nb(X[k])
        return out

    @njit(cache=True)
    def _rows_equal(a, b):
        for i in range(a.shape[0]):
            if a[i] != b[i]:
                return False
        return True

    @njit(cache=True)
    def _table_lookup_nb(slots, X, Q):
        mask = np.uint64(slots.shape[0] - 1)
        out = np.empty(Q.shape[0], dtype=np.int64)
        for q in range(Q.shape[0]):
            pos = _hash_row_nb(Q[q]) & mask
            out[q] = -1
            while True:
                r = slots[pos]
                if r < 0:
                    break
                if _rows_equal(X[r], Q[q]):
                    out[q] = r
                    break
                pos = (pos + np.uint64(1)) & mask
        return out

    @njit(cache=True)
    def _table_insert_nb(slots, X, rows):
        mask = np.uint64(slots.shape[0] - 1)
        for k in range(rows.shape[0]):
            r = rows[k]
            pos = _hash_row_nb(X[r]) & mask
            while slots[pos] >= 0:
                pos = (pos + np.uint64(1)) & mask
            slots[pos] = r

    @njit(cache=True)
    def _propensity_nb(x, a, b, c):
        if a < 0:
            return c
        if b < 0:
            return c * x[a]
        if a == b:
            return c * x[a] * (x[a] - 1.0) * 0.5
        return c * x[a] * x[b]

    @njit(cache=True)
    def _propensities_nb(X, pairs, rates):
        N, R = X.shape[0], pairs.shape[0]
        A = np.empty((N, R))
        for k in range(N):
            for j in range(R):
                A[k, j] = _propensity_nb(X[k], pairs[j, 0], pairs[j, 1], rates[j])
        return A

    @njit(cache=True)
    def _euler_sweep_nb(X, succ, p, active, size, pairs, rates, h, delta2,
                        newp, big, cand_k, cand_j, cand_f):
        R = pairs.shape[0]
        cap = cand_k.shape[0]
        for k in range(size):
            newp[k] = 0.0
            big[k] = False
        ncand = 0
        max_out = 0.0
        bad = -1
        for k in range(size):
            if not active[k]:
                continue
            pk = p[k]
            xk = X[k]
            out = 0.0
            for j in range(R):
                a = _propensity_nb(xk, pairs[j, 0], pairs[j, 1], rates[j])
                if a <= 0.0:
                    continue
                out += a
                f = h * a * pk
                if f <= 0.0:
                    continue
                t = succ[k, j]
                if t >= 0:
                    newp[t] += f
                    if f > delta2:
                        big[t] = True
                else:
                    if ncand < cap:
                        cand_k[ncand] = k
                        cand_j[ncand] = j
                        cand_f[ncand] = f
                    ncand += 1
            if out > max_out:
                max_out = out
            if h * out >= 1.0 and bad < 0:
                bad = k
            newp[k] += pk * (1.0 - h * out)
        return ncand, max_out, bad

    @njit(cache=True)
    def _resolve_inactive_nb(newp, active, big, size):
        defect = 0.0
        for k in range(size):
            if active[k] or newp[k] <= 0.0:
                continue
            if big[k]:
                active[k] = True
            else:
                defect += newp[k]
                newp[k] = 0.0
        return defect

    @njit(cache=True)
    def _prune_nb(p, active, size, delta1):
        mass = 0.0
        for k in range(size):
            if active[k] and p[k] <= delta1:
                mass += p[k]
                p[k] = 0.0
                active[k] = False
        return mass

    @njit(cache=True)
    def _scatter_add_nb(target, idx, vals):
        for i in range(idx.shape[0]):
            target[idx[i]] += vals[i]

    @njit(cache=True)
    def _closure_eval_nb(ext, factors, coeffs, targets, nq):
        out = np.zeros(nq)
        F = factors.shape[1]
        for t in range(coeffs.shape[0]):
            v = coeffs[t]
            for f in range(F):
                v *= ext[factors[t, f]]
            out[targets[t]] += v
        return out


# ---------------------------------------------------------------------------
# dispatch

_NAMES = (
    "hash_rows", "table_lookup", "table_insert", "propensities", "euler_sweep",
    "resolve_inactive", "prune", "scatter_add", "closure_eval",
)

backend = "numpy"


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous backend."""
    global backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    previous = backend
    suffix = "_nb" if name == "numba" else "_np"
    g = globals()
    for fn in _NAMES:
        g[fn] = g[f"_{fn}{suffix}"]
    backend = name
    return previous


def _env_wants_numba() -> bool:
    return os.environ.get("CMEKIT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


set_backend("numba" if HAVE_NUMBA and _env_wants_numba() else "numpy")
