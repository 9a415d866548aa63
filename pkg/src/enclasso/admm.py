"""Plaintext Lasso solvers: centralized, consensus and heterogeneous ADMM.

All ADMM variants start from ``z = w = 0`` and run a fixed number of
iterations. ``shrink`` hooks let callers replace the exact soft threshold by
a polynomial approximation so that encrypted runs can be compared against a
plaintext run of exactly the same arithmetic.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg

from .cheb import soft_threshold


class InvalidSplitError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass
class LassoProblem:
    """``min_x 0.5 ||A x - b||^2 + lam ||x||_1`` with ADMM penalty ``rho``."""

    A: np.ndarray
    b: np.ndarray
    lam: float
    rho: float = 1.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64).ravel()
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError(f"A has {self.A.shape[0]} rows but b has {self.b.shape[0]}")
        if self.lam <= 0 or self.rho <= 0:
            raise ValueError("lam and rho must be positive")

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, x) -> float:
        r = self.A @ x - self.b
        return 0.5 * float(r @ r) + self.lam * float(np.abs(x).sum())


@dataclass
class AdmmTrace:
    x: list = field(default_factory=list)
    z: list = field(default_factory=list)
    w: list = field(default_factory=list)
    y: list = field(default_factory=list)  # x^{k+1} + w^k (summed over servers when distributed)

    def append(self, **kw):
        for key, value in kw.items():
            getattr(self, key).append(np.array(value, copy=True))


def default_shrink(alpha: float, k: int = 1) -> Callable[[np.ndarray], np.ndarray]:
    return lambda s: soft_threshold(s, alpha) / k


def local_inverse(A, rho: float, method: str = "dense") -> np.ndarray:
    """``(A^T A + rho I)^{-1}``, directly or via the matrix inversion lemma."""
    A = np.atleast_2d(A)
    m, n = A.shape
    if method == "dense":
        c, low = linalg.cho_factor(A.T @ A + rho * np.eye(n))
        return linalg.cho_solve((c, low), np.eye(n))
    if method == "woodbury":
        # (A^T A + rho I)^{-1} = (I - A^T (rho I + A A^T)^{-1} A) / rho
        small = linalg.solve(rho * np.eye(m) + A @ A.T, A, assume_a="pos")
        return (np.eye(n) - A.T @ small) / rho
    raise ValueError(f"unknown inversion method {method!r}")


def admm_central(p: LassoProblem, iters: int, shrink=None, z0=None, w0=None,
                 tol: float | None = None) -> tuple[np.ndarray, AdmmTrace]:
    if iters < 1:
        raise ValueError("iters must be >= 1")
    n = p.n
    shrink = shrink or default_shrink(p.lam / p.rho)
    Minv = local_inverse(p.A, p.rho)
    Atb = p.A.T @ p.b
    z = np.zeros(n) if z0 is None else np.array(z0, dtype=float)
    w = np.zeros(n) if w0 is None else np.array(w0, dtype=float)
    trace = AdmmTrace()
    x = z
    for _ in range(iters):
        x = Minv @ (Atb + p.rho * (z - w))
        y = x + w
        z_old, z = z, shrink(y)
        w = y - z
        trace.append(x=x, z=z, w=w, y=y)
        if tol is not None:
            primal = np.linalg.norm(x - z)
            dual = p.rho * np.linalg.norm(z - z_old)
            if primal < tol and dual < tol:
                break
    return x, trace


def _normalize_split(split, m: int) -> list[np.ndarray]:
    if all(np.isscalar(s) for s in split):
        sizes = [int(s) for s in split]
        if any(s <= 0 for s in sizes):
            raise InvalidSplitError(f"empty block in split {sizes}")
        if sum(sizes) != m:
            raise InvalidSplitError(f"block sizes {sizes} do not cover {m} rows")
        bounds = np.cumsum([0] + sizes)
        return [np.arange(bounds[i], bounds[i + 1]) for i in range(len(sizes))]
    blocks = [np.asarray(b, dtype=int) for b in split]
    if any(b.size == 0 for b in blocks):
        raise InvalidSplitError("empty block in split")
    joined = np.sort(np.concatenate(blocks))
    if joined.size != m or not np.array_equal(joined, np.arange(m)):
        raise InvalidSplitError("split must cover every row exactly once")
    return blocks


def even_split(m: int, K: int) -> list[int]:
    """Homogeneous block sizes; the last block absorbs the remainder."""
    if not 1 <= K <= m:
        raise InvalidSplitError(f"cannot split {m} rows into {K} blocks")
    base = m // K
    return [base] * (K - 1) + [m - base * (K - 1)]


def _consensus(blocks_A, blocks_b, rho, lam, iters, shrink, local_updates=1,
               z0=None, inverse="dense"):
    K = len(blocks_A)
    n = blocks_A[0].shape[1]
    shrink = shrink or default_shrink(lam / rho, K)
    Minv = [local_inverse(Ai, rho, inverse) for Ai in blocks_A]
    Atb = [Ai.T @ bi for Ai, bi in zip(blocks_A, blocks_b)]
    z = np.zeros(n) if z0 is None else np.array(z0, dtype=float)
    w = [np.zeros(n) for _ in range(K)]
    trace = AdmmTrace()  # x and w entries are K x n stacks
    for _ in range(iters):
        xs = []
        for i in range(K):
            reps = local_updates if i == 0 else 1
            for r in range(reps):
                xi = Minv[i] @ (Atb[i] + rho * (z - w[i]))
                if r < reps - 1:
                    w[i] = w[i] + xi - z
            xs.append(xi)
        total = sum(xs) + sum(w)
        z = shrink(total)
        w = [wi + xi - z for wi, xi in zip(w, xs)]
        trace.append(x=np.array(xs), z=z, w=np.array(w), y=total)
    return z, trace


def admm_distributed(p: LassoProblem, split, iters: int, shrink=None,
                     inverse: str = "dense") -> tuple[np.ndarray, AdmmTrace]:
    """Consensus ADMM over a row partition of ``(A, b)``.

    ``z^{k+1} = (1/K) S_{lam/rho}(sum_i x_i^{k+1} + w_i^k)``. Returns the final
    ``z`` and a trace whose ``y`` entries are the packed sums fed to ``shrink``.
    """
    blocks = _normalize_split(split, p.m)
    return _consensus([p.A[b] for b in blocks], [p.b[b] for b in blocks],
                      p.rho, p.lam, iters, shrink, inverse=inverse)


def admm_hetero(H, Jf, split_sizes: Sequence[int], lam: float, rho: float, iters: int,
                local_updates: int = 1, shrink=None) -> tuple[np.ndarray, AdmmTrace]:
    """Heterogeneous consensus ADMM where only block 1 carries a data term.

    Server 1 repeats its local ``g_1``/``w_1`` update ``local_updates`` times
    (against the current ``z``) before each global ``z`` update.
    """
    H = np.asarray(H, dtype=float)
    Jf = np.asarray(Jf, dtype=float)
    blocks = _normalize_split(split_sizes, H.shape[0])
    for blk in blocks[1:]:
        if np.any(Jf[blk]):
            raise InvalidSplitError("right-hand side must vanish outside block 1")
    if local_updates < 1:
        raise ValueError("local_updates must be >= 1")
    return _consensus([H[b] for b in blocks], [Jf[b] for b in blocks],
                      rho, lam, iters, shrink, local_updates)


@dataclass
class IntervalBound:
    sigma: float
    c: float
    n_norm: float
    per_iteration_bound: np.ndarray  # entry k bounds ||x^{k+1} + w^k||_inf

    @property
    def max_bound(self) -> float:
        return float(self.per_iteration_bound.max())


def lemma1_bound(p: LassoProblem, K_iter: int) -> IntervalBound:
    """A priori bound on the soft-threshold input of centralized ADMM."""
    n = p.n
    rho = p.rho
    Minv = local_inverse(p.A, rho)
    nvec = Minv @ (p.A.T @ p.b)
    sigma = float(np.linalg.norm(rho * Minv, 2))
    c = (np.sqrt(n) * p.lam / rho * float(np.linalg.norm(2 * rho * Minv - np.eye(n), 2))
         + float(np.linalg.norm(nvec)))
    n_norm = float(np.linalg.norm(nvec))
    k = np.arange(K_iter)
    if sigma >= 1.0 - 1e-12:
        bound = n_norm + k * c
    else:
        bound = sigma ** k * n_norm + (1 - sigma ** k) / (1 - sigma) * c
    return IntervalBound(sigma, c, n_norm, bound)


def fista_oracle(p: LassoProblem, tol: float = 1e-10, max_iter: int = 500_000,
                 x0=None) -> np.ndarray:
    """Accelerated proximal gradient with backtracking and adaptive restart."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    A, b, lam = p.A, p.b, p.lam
    x = np.zeros(p.n) if x0 is None else np.array(x0, dtype=float)
    yk, t = x.copy(), 1.0
    L = 1.0
    f_prev = p.objective(x)
    calm = 0

    def smooth(v):
        r = A @ v - b
        return 0.5 * float(r @ r), A.T @ r

    for _ in range(max_iter):
        fy, grad = smooth(yk)
        while True:
            x_new = soft_threshold(yk - grad / L, lam / L)
            d = x_new - yk
            fx, _ = smooth(x_new)
            if fx <= fy + float(grad @ d) + 0.5 * L * float(d @ d) * (1 + 1e-12) + 1e-300:
                break
            L *= 2.0
        f_new = fx + lam * float(np.abs(x_new).sum())
        if f_new > f_prev and t > 1.0:
            # restart momentum; a plain proximal step is always accepted
            yk, t = x.copy(), 1.0
            continue
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        yk = x_new + (t - 1) / t_new * (x_new - x)
        step = np.linalg.norm(x_new - x)
        rel = abs(f_prev - f_new) / max(1.0, abs(f_new))
        x, t = x_new, t_new
        f_prev = f_new
        calm = calm + 1 if rel < tol and step <= np.sqrt(tol) * max(1.0, np.linalg.norm(x)) else 0
        if calm >= 10:
            return x
    raise ConvergenceError(f"FISTA did not reach tol={tol} in {max_iter} iterations")


# -- instance files --------------------------------------------------------

def dump_problem(p: LassoProblem, split: Sequence[int] | None = None) -> str:
    out = io.StringIO()
    out.write(f"# lam={p.lam!r}\n# rho={p.rho!r}\n")
    if split is not None:
        out.write("# split=" + ",".join(str(s) for s in split) + "\n")
    writer = csv.writer(out, lineterminator="\n")
    for row, bi in zip(p.A, p.b):
        writer.writerow([repr(float(v)) for v in row] + [repr(float(bi))])
    return out.getvalue()


def load_problem(text: str) -> tuple[LassoProblem, list[int] | None]:
    meta, rows = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif line.strip():
            rows.append([float(v) for v in line.split(",")])
    data = np.array(rows)
    split = [int(s) for s in meta["split"].split(",")] if "split" in meta else None
    return LassoProblem(data[:, :-1], data[:, -1], float(meta["lam"]),
                        float(meta.get("rho", 1.0))), split


def random_problem(m: int, n: int, seed: int, lam: float | None = None,
                   rho: float = 1.0) -> LassoProblem:
    """Seeded instance with a sparse ground truth and ``lam`` at 10% of ``||A^T b||_inf``."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, n))
    x_true = np.where(rng.random(n) < 0.5, rng.standard_normal(n), 0.0)
    b = A @ x_true + 0.1 * rng.standard_normal(m)
    if lam is None:
        lam = 0.1 * float(np.abs(A.T @ b).max())
    return LassoProblem(A, b, lam, rho)
