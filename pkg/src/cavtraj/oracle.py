"""Direct-transcription oracle: the control problem as a convex QP on a grid.

Forward Euler on ``n`` steps of ``dt = (tf - t0)/n``::

    v[j+1] = v[j] + dt*u[j]        p[j+1] = p[j] + dt*v[j]

with cost ``0.5*dt*sum(u**2)``, terminal equality ``p[n] = pf`` and, for
``j = 1..n``, bounds on ``u[j-1]`` and ``v[j]`` plus the safety row
``gamma + rho*v[j] <= xi*(p_k(t_j) - p[j])``.

The solver keeps ``v`` and ``p`` as variables tied by the dynamics rows, so
every matrix stays banded; a Mehrotra predictor-corrector interior-point
method then needs one sparse LU per iteration.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from cavtraj.domain import Scenario
from cavtraj.lead import eval_lead

ACTIVE_TOL = 1e-6

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TranscribedQP:
    """Forward-Euler transcription of one scenario.

    ``weights`` holds the per-control cost weight ``0.5*dt``; ``lead_p`` is the
    lead position at ``t_1..t_n`` (``None`` without a lead).
    """

    scenario: Scenario
    n: int
    dt: float
    t: np.ndarray
    weights: np.ndarray
    lead_p: Optional[np.ndarray]
    inequalities: bool = True

    @property
    def n_variables(self) -> int:
        return self.n

    @property
    def n_equalities(self) -> int:
        return 1

    @property
    def n_inequalities(self) -> int:
        if not self.inequalities:
            return 0
        return 4 * self.n + (self.n if self.lead_p is not None else 0)

    def speed_map(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(M, m)`` with ``v[1..n] = M @ u + m``."""
        M = self.dt * np.tril(np.ones((self.n, self.n)))
        return M, np.full(self.n, self.scenario.bc.v0)

    def position_map(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense ``(M, m)`` with ``p[1..n] = M @ u + m``."""
        bc = self.scenario.bc
        j = np.arange(1, self.n + 1)
        # p[j] = p0 + j*dt*v0 + dt^2 * sum_{l<j-1} (j-1-l) u[l]
        diff = (j[:, None] - 1) - np.arange(self.n)[None, :]
        M = self.dt**2 * np.where(diff > 0, diff, 0).astype(float)
        return M, bc.p0 + j * self.dt * bc.v0


def transcribe(scenario: Scenario, n: int = 2600, inequalities: bool = True) -> TranscribedQP:
    if n < 2:
        raise ValueError("the grid needs at least two steps")
    bc = scenario.bc
    dt = (bc.tf - bc.t0) / n
    t = bc.t0 + dt * np.arange(n + 1)
    t[-1] = bc.tf
    lead_p = None
    if scenario.lead is not None:
        lead_p, _, _ = eval_lead(scenario.lead, t[1:])
    return TranscribedQP(scenario, n, dt, t, np.full(n, 0.5 * dt), lead_p, inequalities)


@dataclass(frozen=True)
class QPSolution:
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    cost: float
    status: str
    iterations: int
    kkt_residual: float
    labels: tuple[str, ...] = ()

    @property
    def converged(self) -> bool:
        return self.status == "optimal"


def _assemble(qp: TranscribedQP):
    """Sparse ``(Q, A, b, G, h)`` over ``x = [u, v_1..v_n, p_1..p_n]``."""
    n, dt = qp.n, qp.dt
    sc = qp.scenario
    bc, prm = sc.bc, sc.params
    N = 3 * n
    iu, iv, ip = 0, n, 2 * n
    # cost scaled by 1/dt: multipliers then approximate their continuous-time values
    Q = sp.diags(np.concatenate([np.ones(n), np.zeros(2 * n)]), format="csc")

    I = sp.identity(n, format="csr")
    shift = sp.eye(n, k=-1, format="csr")  # row j picks entry j-1
    zero = sp.csr_matrix((n, n))
    # v_{j+1} - v_j - dt*u_j = 0 ; p_{j+1} - p_j - dt*v_j = 0 (v_0, p_0 known)
    dyn_v = sp.hstack([-dt * I, I - shift, zero])
    dyn_p = sp.hstack([zero, -dt * shift, I - shift])
    term = sp.csr_matrix(([1.0], ([0], [ip + n - 1])), shape=(1, N))
    A = sp.vstack([dyn_v, dyn_p, term], format="csr")
    b = np.zeros(2 * n + 1)
    b[0] = bc.v0
    b[n] = bc.p0 + dt * bc.v0
    b[-1] = bc.pf

    if not qp.inequalities:
        return Q, A, b, sp.csr_matrix((0, N)), np.zeros(0)
    Gu = sp.hstack([I, zero, zero])
    Gv = sp.hstack([zero, I, zero])
    rows = [Gu, -Gu, Gv, -Gv]
    h = [np.full(n, prm.u_max), np.full(n, -prm.u_min), np.full(n, prm.v_max), np.full(n, -prm.v_min)]
    if qp.lead_p is not None:
        rows.append(sp.hstack([zero, prm.rho * I, prm.xi * I]))
        h.append(prm.xi * qp.lead_p - prm.gamma)
    return Q, A, b, sp.vstack(rows, format="csr"), np.concatenate(h)


def _max_step(x: np.ndarray, dx: np.ndarray) -> float:
    neg = dx < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-x[neg] / dx[neg])))


def _farkas(At, Gt, b, h, y, z, radius: float, tol: float = 1e-7) -> bool:
    """Whether the multipliers certify an empty feasible set.

    For any feasible ``x`` and ``z >= 0``, ``b'y + h'z >= x'(A'y + G'z)``, which
    is at least ``-radius * |A'y + G'z|_inf`` when ``|x|_1 <= radius``.  A
    normalized gap below that bound therefore proves infeasibility.
    """
    scale = np.linalg.norm(y, np.inf) + np.linalg.norm(z, np.inf)
    if scale < 1e6:
        return False
    comb = np.linalg.norm(At @ y + Gt @ z, np.inf) / scale
    gap = (b @ y + h @ z) / scale
    return gap < -max(tol, radius * comb)


def solve_qp(qp: TranscribedQP, *, tol: float = 1e-10, max_iter: int = 120) -> QPSolution:
    """Mehrotra predictor-corrector interior-point solve of ``qp``.

    Never raises on infeasibility: ``status`` is ``"infeasible"`` when the
    iterates diverge, ``"max_iter"`` when the iteration budget runs out.
    """
    Q, A, b, G, h = _assemble(qp)
    n = qp.n
    N, me, mi = Q.shape[0], A.shape[0], G.shape[0]

    At, Gt = A.T.tocsr(), G.T.tocsr()
    # least-squares start: min 0.5 x'Qx + 0.5|Gx - h|^2 subject to Ax = b,
    # then shift slacks and multipliers into the positive orthant
    K0 = sp.bmat([[Q + Gt @ G, At], [A, -1e-13 * sp.identity(me)]], format="csc")
    sol0 = splu(K0).solve(np.concatenate([Gt @ h, b]))
    x, y = sol0[:N], np.zeros(me)
    r = h - G @ x
    s = r + max(0.0, 1.0 - float(np.min(r))) if mi else np.zeros(0)
    z = -r + max(0.0, 1.0 + float(np.max(r))) if mi else np.zeros(0)
    z = np.maximum(z, 1.0)
    bnorm, hnorm = 1 + np.linalg.norm(b, np.inf), 1 + (np.linalg.norm(h, np.inf) if mi else 0)
    status, it, kkt = "max_iter", 0, math.inf
    prm = qp.scenario.params
    # 1-norm bound on any feasible x, from the control and speed bounds
    radius = n * (max(-prm.u_min, prm.u_max) + prm.v_max
                  + abs(qp.scenario.bc.p0) + prm.v_max * (qp.scenario.bc.tf - qp.scenario.bc.t0))
    for it in range(max_iter):
        rd = Q @ x + At @ y + Gt @ z
        rp = A @ x - b
        rg = G @ x + s - h
        mu = float(s @ z) / mi if mi else 0.0
        kkt = max(np.linalg.norm(rd, np.inf), np.linalg.norm(rp, np.inf) / bnorm,
                  (np.linalg.norm(rg, np.inf) / hnorm) if mi else 0.0)
        if kkt < tol and mu < tol * 1e-2:
            status = "optimal"
            break
        if not np.all(np.isfinite(x)) or np.linalg.norm(x, np.inf) > 1e12:
            status = "infeasible"
            break
        if mi and _farkas(At, Gt, b, h, y, z, radius):
            status = "infeasible"
            break
        w = z / s if mi else np.zeros(0)
        H = Q + Gt @ sp.diags(w) @ G
        K = sp.bmat([[H, At], [A, -1e-13 * sp.identity(me)]], format="csc")
        lu = splu(K)

        def direction(rsz):
            corr = (z * rg - rsz) / s if mi else np.zeros(0)
            rhs = np.concatenate([-rd - Gt @ corr, -rp])
            sol = lu.solve(rhs)
            dx, dy = sol[:N], sol[N:]
            Gdx = G @ dx
            dz = w * Gdx + corr
            ds = -rg - Gdx
            return dx, dy, dz, ds

        if not mi:
            dx, dy, _, _ = direction(np.zeros(0))
            x, y = x + dx, y + dy
            continue
        dx, dy, dz, ds = direction(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / mi
        sigma = (mu_aff / mu) ** 3
        dx, dy, dz, ds = direction(s * z + ds * dz - sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        log.debug("ipm it=%d kkt=%.3e mu=%.3e alpha=%.3e sigma=%.3e", it, kkt, mu, alpha, sigma)
        x, y, z, s = x + alpha * dx, y + alpha * dy, z + alpha * dz, s + alpha * ds
        if alpha < 1e-10:
            status = "infeasible"
            break

    u, v, p = x[:n], x[n:2 * n], x[2 * n:]
    cost = float(np.sum(qp.weights * u * u))
    labels = active_labels(qp, u, v, p) if status == "optimal" else ()
    return QPSolution(u, v, p, cost, status, it, float(kkt), labels)


def active_labels(qp: TranscribedQP, u, v, p, tol: float = ACTIVE_TOL) -> tuple[str, ...]:
    """Binding constraint of grid step ``j`` (control ``u[j]``, state ``j+1``).

    Safety takes priority over control bounds, control over speed bounds.
    """
    prm = qp.scenario.params
    out = []
    for j in range(qp.n):
        if qp.lead_p is not None and prm.xi * (qp.lead_p[j] - p[j]) - (prm.gamma + prm.rho * v[j]) < tol:
            out.append("safety")
        elif u[j] - prm.u_min < tol:
            out.append("u_min")
        elif prm.u_max - u[j] < tol:
            out.append("u_max")
        elif v[j] - prm.v_min < tol:
            out.append("v_min")
        elif prm.v_max - v[j] < tol:
            out.append("v_max")
        else:
            out.append("unconstrained")
    return tuple(out)


@dataclass(frozen=True)
class ComparisonReport:
    n: int
    analytic_cost: float
    oracle_cost: float
    cost_gap_rel: float
    max_pos_dev: float
    max_speed_dev: float
    active_set_agreement: float

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "analytic_cost": self.analytic_cost,
            "oracle_cost": self.oracle_cost,
            "cost_gap_rel": self.cost_gap_rel,
            "max_pos_dev": self.max_pos_dev,
            "max_speed_dev": self.max_speed_dev,
            "active_set_agreement": self.active_set_agreement,
        }


def compare(traj, qp: TranscribedQP, sol: QPSolution) -> ComparisonReport:
    """Cost gap, grid deviations and active-set agreement of ``traj`` against ``sol``.

    The analytic arc kind is read at the middle of each grid step.
    """
    t = qp.t
    p_a, v_a, _ = traj.eval(t[1:])
    pos = float(np.max(np.abs(p_a - sol.p))) if qp.n else 0.0
    spd = float(np.max(np.abs(v_a - sol.v))) if qp.n else 0.0
    mids = 0.5 * (t[:-1] + t[1:])
    idx = traj.arc_index(mids)
    analytic = [traj.arcs[i].kind.value for i in idx]
    agree = float(np.mean([a == b for a, b in zip(analytic, sol.labels)])) if sol.labels else 0.0
    denom = max(abs(sol.cost), 1e-12)
    gap = abs(traj.total_cost - sol.cost) / denom
    return ComparisonReport(qp.n, traj.total_cost, sol.cost, gap, pos, spd, agree)


def run_oracle(traj, n: int = 2600) -> tuple[ComparisonReport, QPSolution]:
    qp = transcribe(traj.scenario, n)
    sol = solve_qp(qp)
    return compare(traj, qp, sol), sol
