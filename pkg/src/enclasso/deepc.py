"""Data-driven predictive control posed as a Lasso problem.

Trajectory data are stacked into block-Hankel matrices; the tracking problem
over horizon ``N`` with ``M`` past samples becomes

    min_g 0.5 ||H g - J f_t||^2 + lambda_g ||g||_1

with ``H = J [Y_p; Y_f; U_p; U_f]``, ``J = blkdiag(2 lambda_y I, Q, 2 lambda_u I, R)^{1/2}``
and ``f_t = [ybar_t; r_t; ubar_t; 0]``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from .admm import LassoProblem, fista_oracle


class InsufficientDataError(ValueError):
    pass


def hankel(signal, dim: int, L: int) -> np.ndarray:
    """Block-Hankel matrix ``H_L`` of a signal with ``dim`` entries per sample.

    Column ``j`` stacks samples ``j .. j + L - 1``.
    """
    w = np.asarray(signal, dtype=np.float64).reshape(-1, dim)
    T = w.shape[0]
    if L < 1 or T < L:
        raise InsufficientDataError(f"need at least L={L} samples, got {T}")
    windows = np.lib.stride_tricks.sliding_window_view(w, L, axis=0)  # (T-L+1, dim, L)
    return windows.transpose(2, 1, 0).reshape(L * dim, T - L + 1)


@dataclass
class PersistencyReport:
    full_row_rank: bool
    rank: int
    rows: int
    length_ok: bool
    required_length: int

    def __bool__(self):
        return self.full_row_rank and self.length_ok


def check_persistency(u_d, m: int, order: int, rtol: float = 1e-8) -> PersistencyReport:
    """Whether ``u_d`` is persistently exciting of ``order``.

    Rank uses singular values above ``rtol * s_max``. The length check is the
    richness requirement ``T >= (m + 1) * order - 1``.
    """
    T = np.asarray(u_d).size // m
    required = (m + 1) * order - 1
    try:
        Hu = hankel(u_d, m, order)
    except InsufficientDataError:
        return PersistencyReport(False, 0, m * order, T >= required, required)
    s = np.linalg.svd(Hu, compute_uv=False)
    rank = int(np.count_nonzero(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    return PersistencyReport(rank == Hu.shape[0], rank, Hu.shape[0], T >= required, required)


@dataclass
class TrajectoryData:
    u_d: np.ndarray
    y_d: np.ndarray
    m: int
    p: int
    n_state: int | None = None

    @property
    def T(self) -> int:
        return self.u_d.size // self.m


@dataclass
class ControlWeights:
    Q: np.ndarray  # per-sample output weight (p x p), batched over the horizon
    R: np.ndarray  # per-sample input weight (m x m)
    lambda_y: float
    lambda_u: float
    lambda_g: float
    mu_g: float = 0.0

    @classmethod
    def building_example(cls, m: int = 4, p: int = 4) -> "ControlWeights":
        return cls(300.0 * np.eye(p), np.eye(m), 3000.0, 3000.0, 300.0)


def _psd_sqrt(X) -> np.ndarray:
    vals, vecs = np.linalg.eigh(np.asarray(X, dtype=float))
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


@dataclass
class HankelData:
    U_p: np.ndarray
    U_f: np.ndarray
    Y_p: np.ndarray
    Y_f: np.ndarray
    J: np.ndarray
    m: int
    p: int
    M: int
    N: int
    mu_g: float = 0.0

    @property
    def S(self) -> int:
        return self.U_p.shape[1]

    @property
    def stacked(self) -> np.ndarray:
        return np.vstack([self.Y_p, self.Y_f, self.U_p, self.U_f])

    @property
    def H(self) -> np.ndarray:
        H = self.J @ self.stacked
        if self.mu_g:
            H = np.vstack([H, np.sqrt(2 * self.mu_g) * np.eye(self.S)])
        return H

    @property
    def rows(self) -> int:
        return self.H.shape[0]

    def f(self, ybar, r, ubar) -> np.ndarray:
        """``f_t = [ybar; r; ubar; 0]`` (zeros also cover ridge rows)."""
        tail = self.m * self.N + (self.S if self.mu_g else 0)
        return np.concatenate([np.ravel(ybar), np.ravel(r), np.ravel(ubar), np.zeros(tail)])

    def Jf(self, ybar, r, ubar) -> np.ndarray:
        f = self.f(ybar, r, ubar)
        k = self.J.shape[0]
        return np.concatenate([self.J @ f[:k], f[k:]])

    def objective_expanded(self, g, ybar, r, ubar, w: ControlWeights) -> float:
        """Tracking objective written term by term (before the Lasso rewrite)."""
        Qb = np.kron(np.eye(self.N), w.Q)
        Rb = np.kron(np.eye(self.N), w.R)
        ey = self.Y_f @ g - np.ravel(r)
        eu = self.U_f @ g
        return (0.5 * (ey @ Qb @ ey + eu @ Rb @ eu)
                + w.lambda_y * np.sum((self.Y_p @ g - np.ravel(ybar)) ** 2)
                + w.lambda_u * np.sum((self.U_p @ g - np.ravel(ubar)) ** 2)
                + w.lambda_g * np.abs(g).sum() + w.mu_g * float(g @ g))


def build_hankel(traj: TrajectoryData, w: ControlWeights, M: int, N: int) -> HankelData:
    m, p = traj.m, traj.p
    if traj.n_state is not None and M < traj.n_state:
        raise ValueError(f"past window M={M} shorter than plant order {traj.n_state}")
    Hu = hankel(traj.u_d, m, M + N)
    Hy = hankel(traj.y_d, p, M + N)
    J = linalg.block_diag(np.sqrt(2 * w.lambda_y) * np.eye(p * M),
                          _psd_sqrt(np.kron(np.eye(N), w.Q)),
                          np.sqrt(2 * w.lambda_u) * np.eye(m * M),
                          _psd_sqrt(np.kron(np.eye(N), w.R)))
    return HankelData(Hu[: m * M], Hu[m * M:], Hy[: p * M], Hy[p * M:], J, m, p, M, N, w.mu_g)


def build_lasso(traj: TrajectoryData, w: ControlWeights, M: int, N: int,
                ubar, ybar, r, rho: float = 1.0) -> tuple[HankelData, LassoProblem]:
    h = build_hankel(traj, w, M, N)
    return h, LassoProblem(h.H, h.Jf(ybar, r, ubar), w.lambda_g, rho)


def hetero_split(h: HankelData, K: int) -> list[int]:
    """Row blocks: server 1 takes the first ``(m+p)M + pN`` rows, the rest share the remainder."""
    if K < 2:
        raise ValueError("heterogeneous split needs K >= 2")
    first = (h.m + h.p) * h.M + h.p * h.N
    rest = h.rows - first
    if rest < K - 1:
        raise ValueError(f"{rest} remaining rows cannot feed {K - 1} servers")
    base = rest // (K - 1)
    return [first] + [base] * (K - 2) + [rest - base * (K - 2)]


# -- plant and closed loop -------------------------------------------------

@dataclass
class PlantSim:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    process_std: float = 0.1
    measurement_std: float = 0.1
    x: np.ndarray | None = None
    seed: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[0] != n or self.C.shape[1] != n:
            raise ValueError("inconsistent state-space dimensions")
        if self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise ValueError("D must be p x m")
        if self.x is None:
            self.x = np.zeros(n)
        self.rng = np.random.default_rng(self.seed)

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def step(self, u) -> np.ndarray:
        """Measure ``y_t`` for input ``u_t`` and advance the state."""
        u = np.asarray(u, dtype=float)
        y = self.C @ self.x + self.D @ u + self.measurement_std * self.rng.standard_normal(self.p)
        self.x = (self.A @ self.x + self.B @ u
                  + self.process_std * self.rng.standard_normal(self.A.shape[0]))
        return y


def building_plant(seed: int = 0, noise_std: float = 0.1) -> PlantSim:
    """Seeded stand-in for a four-room thermal model (stable, spectral radius 0.98)."""
    rng = np.random.default_rng(seed)
    Qm, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    eig = np.array([0.98, 0.9, 0.85, 0.75])
    A = Qm @ np.diag(eig) @ Qm.T
    B = 0.1 * np.eye(4) + 0.02 * rng.random((4, 4))
    return PlantSim(A, B, np.eye(4), np.zeros((4, 4)), noise_std, noise_std, seed=seed + 1)


def collect_offline(plant: PlantSim, T: int, seed: int) -> TrajectoryData:
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, (T, plant.m))
    y = np.array([plant.step(ut) for ut in u])
    return TrajectoryData(u.ravel(), y.ravel(), plant.m, plant.p, plant.A.shape[0])


def reference_signal(steps: int, p: int, seed: int, hold: int = 10,
                     amplitude: float = 1.0) -> np.ndarray:
    """Piecewise-constant setpoints, one new level every ``hold`` samples."""
    rng = np.random.default_rng(seed)
    levels = rng.uniform(-amplitude, amplitude, (steps // hold + 2, p))
    return np.repeat(levels, hold, axis=0)[:steps]


Solver = Callable[[HankelData, np.ndarray, int], np.ndarray]


@dataclass
class SolverResult:
    """Solver output; ``u`` (the applied input) takes precedence over ``g``."""
    g: np.ndarray | None = None
    u: np.ndarray | None = None
    iterations: int = 0
    summary: str = ""


def exact_solver(h: HankelData, Jf: np.ndarray, t: int, lam: float) -> np.ndarray:
    return fista_oracle(LassoProblem(h.H, Jf, lam), tol=1e-12)


@dataclass
class ClosedLoopLog:
    rows: list = field(default_factory=list)

    @property
    def tracking_cost(self) -> float:
        return float(sum(r["cost"] for r in self.rows if not r["offline"]))

    def to_csv(self) -> str:
        out = io.StringIO()
        if not self.rows:
            return ""
        m = len(self.rows[0]["u"])
        p = len(self.rows[0]["y"])
        header = (["t", "offline"] + [f"u{i + 1}" for i in range(m)]
                  + [f"y{i + 1}" for i in range(p)] + [f"r{i + 1}" for i in range(p)]
                  + ["cost", "admm_iterations", "transcript"])
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        for r in self.rows:
            writer.writerow([r["t"], int(r["offline"])] + [f"{v:.12g}" for v in r["u"]]
                            + [f"{v:.12g}" for v in r["y"]] + [f"{v:.12g}" for v in r["r"]]
                            + [f"{r['cost']:.12g}", r["iterations"], r["transcript"]])
        return out.getvalue()


def closed_loop(plant: PlantSim, w: ControlWeights, solver, steps: int, seed: int,
                M: int = 4, N: int = 8, T: int = 84, reference=None) -> ClosedLoopLog:
    """Receding-horizon run; rows ``t < M`` replay the tail of the offline data.

    ``solver(h, Jf, t)`` returns ``g``, ``(g, iterations, transcript_summary)``
    or a :class:`SolverResult`. The first ``m`` entries of ``U_f g`` (or of
    ``SolverResult.u``) are applied. Solvers with ``needs_signals = True`` also
    receive ``ybar``, ``r`` and ``ubar``.
    """
    traj = collect_offline(plant, T, seed)
    report = check_persistency(traj.u_d, traj.m, M + N + traj.n_state)
    if not report:
        raise InsufficientDataError(f"offline input not persistently exciting: {report}")
    h = build_hankel(traj, w, M, N)
    m, p = plant.m, plant.p
    if reference is None:
        reference = reference_signal(steps + N, p, seed + 7)
    us = list(traj.u_d.reshape(-1, m)[-M:])
    ys = list(traj.y_d.reshape(-1, p)[-M:])
    log = ClosedLoopLog()
    Qs, Rs = w.Q, w.R

    def cost(y, r, u):
        e = y - r
        return float(e @ Qs @ e + u @ Rs @ u)

    for t in range(min(M, steps)):
        log.rows.append(dict(t=t, offline=True, u=us[t], y=ys[t], r=reference[t],
                             cost=cost(ys[t], reference[t], us[t]), iterations=0,
                             transcript=""))
    for t in range(M, steps):
        ubar = np.concatenate(us[-M:])
        ybar = np.concatenate(ys[-M:])
        r = reference[t:t + N].ravel()
        Jf = h.Jf(ybar, r, ubar)
        try:
            if getattr(solver, "needs_signals", False):
                result = solver(h, Jf, t, ybar, r, ubar)
            else:
                result = solver(h, Jf, t)
        except Exception as exc:
            raise RuntimeError(f"solver failed at step t={t}: {exc}") from exc
        if isinstance(result, SolverResult):
            iters, summary = result.iterations, result.summary
            u = (result.u if result.u is not None else h.U_f @ result.g)[:m]
        else:
            g, iters, summary = result if isinstance(result, tuple) else (result, 0, "")
            u = (h.U_f @ g)[:m]
        y = plant.step(u)
        us.append(u)
        ys.append(y)
        log.rows.append(dict(t=t, offline=False, u=u, y=y, r=reference[t],
                             cost=cost(y, reference[t], u), iterations=iters,
                             transcript=summary))
    return log
