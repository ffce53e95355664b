"""Cox partial-likelihood fitting with Breslow ties.

All routines work on a stack of B covariate matrices sharing one set of
times and events, so the many refits needed by SIMEX run as a single
vectorized Newton iteration. A single fit is the B = 1 case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import NoEvents, NotConverged, Singular

MAX_ITER = 50
GRAD_TOL = 1e-8
STEP_TOL = 1e-6
REL_LL_TOL = 1e-10
MAX_HALVINGS = 40


@dataclass
class CoxFit:
    coef: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    loglik: float

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @property
    def z(self) -> np.ndarray:
        return self.coef / self.se

    @property
    def p_values(self) -> np.ndarray:
        """Two-sided Wald p-values against a standard normal."""
        return 2.0 * stats.norm.sf(np.abs(self.z))


class _RiskSets:
    """Time ordering and tie groups shared by every covariate matrix."""

    def __init__(self, times, events):
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=float)
        if times.shape != events.shape:
            raise ValueError("times and events differ in length")
        if not np.any(events > 0):
            raise NoEvents("Cox fit needs at least one event", field="event")
        self.order = np.argsort(times, kind="stable")
        t = times[self.order]
        self.events = events[self.order]
        # each subject's risk set starts at the first index of its tie group
        _, first, counts = np.unique(t, return_index=True, return_counts=True)
        self.start = np.repeat(first, counts)
        self.n = t.size


def _rev_cumsum(a, axis):
    return np.flip(np.cumsum(np.flip(a, axis=axis), axis=axis), axis=axis)


def _pieces(rs: _RiskSets, X: np.ndarray, beta: np.ndarray, order: int):
    """Log partial likelihood and, for order >= 1/2, score and information.

    X is (B, n, p) already in time order, beta is (B, p).
    """
    # at divergent trial steps late risk sets can underflow to 0; the
    # resulting -inf/NaN is rejected by step halving or flagged singular
    with np.errstate(divide="ignore", invalid="ignore"):
        return _pieces_raw(rs, X, beta, order)


def _pieces_raw(rs, X, beta, order):
    eta = np.einsum("bnp,bp->bn", X, beta)
    shift = eta.max(axis=1, keepdims=True)
    r = np.exp(eta - shift)
    S0 = _rev_cumsum(r, 1)[:, rs.start]
    d = rs.events
    ll = np.sum(d * (eta - shift - np.log(S0)), axis=1)
    if order == 0:
        return ll, None, None
    rX = r[:, :, None] * X
    S1 = _rev_cumsum(rX, 1)[:, rs.start] / S0[:, :, None]
    grad = np.einsum("n,bnp->bp", d, X - S1)
    if order == 1:
        return ll, grad, None
    S2 = _rev_cumsum(rX[:, :, :, None] * X[:, :, None, :], 1)[:, rs.start] / S0[:, :, None, None]
    info = np.einsum("n,bnpq->bpq", d, S2 - S1[:, :, :, None] * S1[:, :, None, :])
    return ll, grad, info


def _as_stack(X, n):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim == 2:
        X = X[None]
    if X.shape[1] != n:
        raise ValueError(f"covariates have {X.shape[1]} rows, expected {n}")
    return X


def cox_loglik(times, events, X, beta) -> float:
    rs = _RiskSets(times, events)
    Xs = _as_stack(X, rs.n)[:, rs.order]
    return float(_pieces(rs, Xs, np.atleast_2d(np.asarray(beta, dtype=float)), 0)[0][0])


def cox_gradient(times, events, X, beta) -> np.ndarray:
    rs = _RiskSets(times, events)
    Xs = _as_stack(X, rs.n)[:, rs.order]
    return _pieces(rs, Xs, np.atleast_2d(np.asarray(beta, dtype=float)), 1)[1][0]


def cox_information(times, events, X, beta) -> np.ndarray:
    """Observed information, i.e. minus the Hessian of the log partial likelihood."""
    rs = _RiskSets(times, events)
    Xs = _as_stack(X, rs.n)[:, rs.order]
    return _pieces(rs, Xs, np.atleast_2d(np.asarray(beta, dtype=float)), 2)[2][0]


def _solve(info, grad):
    try:
        return np.linalg.solve(info, grad[..., None])[..., 0]
    except np.linalg.LinAlgError:
        # fall back to per-fit solves so one singular matrix does not sink the batch
        out = np.full_like(grad, np.nan)
        for b in range(grad.shape[0]):
            try:
                out[b] = np.linalg.solve(info[b], grad[b])
            except np.linalg.LinAlgError:
                pass
        return out


def _covariance(info):
    cov = np.full_like(info, np.nan)
    for b in range(info.shape[0]):
        try:
            if np.linalg.cond(info[b]) < 1e14:
                cov[b] = np.linalg.inv(info[b])
        except np.linalg.LinAlgError:
            pass
    return cov


def fit_cox_batch(times, events, X) -> list[CoxFit]:
    """Newton-Raphson from beta = 0 for each of B covariate matrices.

    ``X`` is (n, p) or (B, n, p). Converged means max|score| < 1e-8 with
    a Newton step below 1e-6, or a relative change in the log partial
    likelihood below 1e-10. Steps that lower the objective are halved.
    Unconverged fits come back flagged, never raised.
    """
    rs = _RiskSets(times, events)
    Xs = _as_stack(X, rs.n)[:, rs.order]
    B, _, p = Xs.shape
    beta = np.zeros((B, p))
    ll, grad, info = _pieces(rs, Xs, beta, 2)
    done = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    singular = np.zeros(B, dtype=bool)
    for it in range(1, MAX_ITER + 1):
        active = ~done
        if not active.any():
            break
        iters[active] = it
        flat = active & (np.max(np.abs(grad), axis=1) < GRAD_TOL)
        # zero score at the start (e.g. a constant covariate): nothing to do
        done |= flat & np.all(beta == 0, axis=1)
        active = ~done
        if not active.any():
            break
        step = np.zeros_like(beta)
        step[active] = _solve(info[active], grad[active])
        bad = active & ~np.all(np.isfinite(step), axis=1)
        singular |= bad
        done |= bad
        active = ~done
        if not active.any():
            break
        trial = beta.copy()
        new_ll = ll.copy()
        pending = active.copy()
        scale = np.ones(B)
        for _ in range(MAX_HALVINGS):
            trial[pending] = beta[pending] + scale[pending, None] * step[pending]
            new_ll[pending] = _pieces(rs, Xs[pending], trial[pending], 0)[0]
            worse = pending & ~(new_ll >= ll - 1e-12 * np.abs(ll))
            if not worse.any():
                break
            scale[worse] *= 0.5
            pending = worse
        step_size = np.max(np.abs(trial - beta), axis=1)
        rel = np.abs(new_ll - ll) <= REL_LL_TOL * np.abs(ll)
        beta[active] = trial[active]
        prev_ll = ll.copy()
        ll, grad, info = _pieces(rs, Xs, beta, 2)
        small = (np.max(np.abs(grad), axis=1) < GRAD_TOL) & (step_size < STEP_TOL)
        # a relative change of zero from a nonzero objective also counts
        done |= active & (small | (rel & (prev_ll != 0)))
    converged = done & ~singular
    cov = _covariance(info)
    return [CoxFit(beta[b].copy(), cov[b], bool(converged[b]), int(iters[b]), float(ll[b])) for b in range(B)]


def fit_cox(times, events, X, strict: bool = False) -> CoxFit:
    """Single Cox fit; ``strict`` turns a non-converged or singular fit into an exception."""
    fit = fit_cox_batch(times, events, X)[0]
    if strict and not fit.converged:
        if not np.any(fit.coef):
            raise Singular("information matrix is singular at the start")
        raise NotConverged(f"no convergence in {MAX_ITER} iterations", fit)
    return fit


def breslow_cumhaz(fit: CoxFit, times, events, X, at=None) -> np.ndarray:
    """Breslow estimate of the baseline cumulative hazard at ``at`` (default: the times)."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=float)
    X = _as_stack(X, times.size)[0]
    r = np.exp(X @ fit.coef)
    at = times if at is None else np.asarray(at, dtype=float)
    ev_t = np.unique(times[events > 0])
    if ev_t.size == 0:
        return np.zeros(at.shape)
    risk = np.array([r[times >= t].sum() for t in ev_t])
    d = np.array([events[times == t].sum() for t in ev_t])
    jumps = np.cumsum(d / risk)
    idx = np.searchsorted(ev_t, at, side="right") - 1
    return np.where(idx >= 0, jumps[np.maximum(idx, 0)], 0.0)


def martingale_residuals(fit: CoxFit, times, events, X) -> np.ndarray:
    """r_i = delta_i - H0(u_i) exp(eta_i) with the Breslow baseline."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=float)
    Xm = _as_stack(X, times.size)[0]
    return events - breslow_cumhaz(fit, times, events, Xm) * np.exp(Xm @ fit.coef)
