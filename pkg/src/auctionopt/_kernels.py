"""Hot replay kernel: every request auctioned under every grid parameter.

The kernel is written once in plain Python/numpy and compiled with numba's
``@njit(parallel=True)`` when available.  Set ``AUCTIONOPT_NUMBA=0`` in the
environment (or call :func:`set_numba_enabled`) to run the uncompiled fallback
instead; both paths execute the identical statement sequence, so their float
results are bit-for-bit equal.  Requests are independent ``prange``
iterations writing disjoint output rows, which keeps results independent of
the thread count.

Scoring uses a per-request table of ``ctr ** alpha`` over the category's
unique alpha values, turning the inner (request, param) loop into lookups.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import prange
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    prange = range
    _HAVE_NUMBA = False

_env_flag = os.environ.get("AUCTIONOPT_NUMBA", "1").strip().lower()
_numba_enabled = _HAVE_NUMBA and _env_flag not in ("0", "false", "no", "off")
_compiled = None


def numba_enabled() -> bool:
    return _numba_enabled


def set_numba_enabled(flag: bool) -> None:
    """Select the kernel backend at runtime (used by tests and benchmarks)."""
    global _numba_enabled
    if flag and not _HAVE_NUMBA:
        raise RuntimeError("numba is not importable; cannot enable the compiled kernel")
    _numba_enabled = bool(flag)


def set_threads(n: int) -> None:
    """Limit numba's thread pool; a no-op on the fallback path."""
    if _HAVE_NUMBA and n > 0:
        import numba

        numba.set_num_threads(n)


def _replay_chunk_impl(
    req_cat,      # int64[n]      category index per request
    req_nslots,   # int64[n]
    cand_start,   # int64[n]      offset into the candidate arrays
    cand_count,   # int64[n]
    bid,          # float64[m]
    cvr,          # float64[m]    predicted CVR (scoring and pricing)
    cvr_metric,   # float64[m]    CVR used for the conversions metric
    ctr_rank,     # float64[m]    position-1 (ranking) calibrated CTR
    ctr_pos,      # float64[m,P]  metric CTR at positions 1..P
    alpha_idx,    # int64[C,K]    per param: index into alpha_vals row
    alpha_vals,   # float64[C,A]  unique alphas per category (padded)
    n_alpha,      # int64[C]
    gamma_val,    # float64[C,K]
    reserve,      # float64[C]
    floor,        # float64[C]
    out_clicks,   # float64[n,K]
    out_revenue,  # float64[n,K]
    out_conv,     # float64[n,K]
    out_filled,   # int32[n,K]
    out_hasad,    # uint8[n,K]
):
    n_req = req_cat.shape[0]
    k_params = alpha_idx.shape[1]
    for i in prange(n_req):
        c = req_cat[i]
        s0 = cand_start[i]
        nc = cand_count[i]
        nslots = req_nslots[i]
        resv = reserve[c]
        flr = floor[c]
        na = n_alpha[c]

        pw = np.empty((nc, na), dtype=np.float64)
        for t in range(nc):
            for a in range(na):
                pw[t, a] = ctr_rank[s0 + t] ** alpha_vals[c, a]

        surv_idx = np.empty(nc, dtype=np.int64)
        surv_score = np.empty(nc, dtype=np.float64)

        for j in range(k_params):
            aidx = alpha_idx[c, j]
            g = gamma_val[c, j]

            # Score and filter: reserve cut plus unpriceable zero-CTR candidates
            cnt = 0
            for t in range(nc):
                r = ctr_rank[s0 + t]
                if r <= 0.0:
                    continue
                s = pw[t, aidx] * bid[s0 + t] + g * r * cvr[s0 + t]
                if s < resv:
                    continue
                surv_idx[cnt] = t
                surv_score[cnt] = s
                cnt += 1

            # Insertion sort by (score desc, bid desc, candidate order asc)
            for a in range(1, cnt):
                key_t = surv_idx[a]
                key_s = surv_score[a]
                key_b = bid[s0 + key_t]
                b = a - 1
                while b >= 0:
                    sb = surv_score[b]
                    if sb > key_s:
                        break
                    if sb == key_s:
                        bb = bid[s0 + surv_idx[b]]
                        if bb > key_b or (bb == key_b and surv_idx[b] < key_t):
                            break
                    surv_idx[b + 1] = surv_idx[b]
                    surv_score[b + 1] = surv_score[b]
                    b -= 1
                surv_idx[b + 1] = key_t
                surv_score[b + 1] = key_s

            n_win = nslots if nslots < cnt else cnt
            clicks = 0.0
            revenue = 0.0
            conv = 0.0
            for k in range(n_win):
                t = surv_idx[k]
                next_score = surv_score[k + 1] if k + 1 < cnt else resv
                r = ctr_rank[s0 + t]
                raw = (next_score - g * r * cvr[s0 + t]) / pw[t, aidx]
                price = raw if raw > flr else flr
                b_t = bid[s0 + t]
                if price > b_t:
                    price = b_t
                pc = ctr_pos[s0 + t, k]
                clicks += pc
                revenue += pc * price
                conv += pc * cvr_metric[s0 + t]

            out_clicks[i, j] = clicks
            out_revenue[i, j] = revenue
            out_conv[i, j] = conv
            out_filled[i, j] = n_win
            out_hasad[i, j] = 1 if n_win > 0 else 0


def _get_compiled():
    global _compiled
    if _compiled is None:
        from numba import njit

        _compiled = njit(parallel=True, cache=True, nogil=True)(_replay_chunk_impl)
    return _compiled


def replay_chunk(*args) -> None:
    """Dispatch to the compiled kernel or the pure-Python fallback."""
    if _numba_enabled:
        _get_compiled()(*args)
    else:
        _replay_chunk_impl(*args)
