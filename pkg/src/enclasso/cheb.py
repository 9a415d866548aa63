"""Chebyshev interpolation of soft thresholding and its encrypted evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .simd_he import Evaluator, LevelExhaustedError, PackedCiphertext


def soft_threshold(x, alpha: float):
    """``S_alpha(x) = (x - alpha)_+ - (-x - alpha)_+``, element-wise."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x - alpha, 0.0) - np.maximum(-x - alpha, 0.0)
    return float(out) if out.ndim == 0 else out


soft_threshold_exact = soft_threshold


def eval_levels(degree: int) -> int:
    """Multiplicative depth of the Paterson-Stockmeyer evaluation."""
    return math.ceil(math.log2(degree + 1))


@dataclass(frozen=True)
class SoftThresholdSpec:
    alpha: float
    interval: tuple[float, float]
    scale_out: float = 1.0

    def __post_init__(self):
        a, b = self.interval
        if self.alpha <= 0 or self.scale_out <= 0:
            raise ValueError("alpha and scale_out must be positive")
        if not a < b:
            raise ValueError(f"degenerate interval [{a}, {b}]")
        if a > -self.alpha or b < self.alpha:
            raise ValueError("interval must contain [-alpha, alpha]")


@dataclass(frozen=True, eq=False)
class ChebyshevPoly:
    coeffs: np.ndarray
    interval: tuple[float, float]
    alpha: float | None = None

    def __post_init__(self):
        a, b = self.interval
        if not a < b:
            raise ValueError(f"degenerate interval [{a}, {b}]")
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=np.float64))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    @property
    def l_p(self) -> int:
        """Levels consumed by encrypted evaluation: depth plus the affine map."""
        return eval_levels(self.degree) + 1

    def to_unit(self, x):
        a, b = self.interval
        return (2.0 * np.asarray(x, dtype=np.float64) - a - b) / (b - a)

    def scaled(self, factor: float) -> "ChebyshevPoly":
        return ChebyshevPoly(self.coeffs * factor, self.interval, self.alpha)

    def __call__(self, x):
        return clenshaw_eval(self, x)

    def save(self, path) -> None:
        a, b = self.interval
        lines = [f"# interval={a!r},{b!r} alpha={self.alpha!r} degree={self.degree}"]
        lines += [repr(float(c)) for c in self.coeffs]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ChebyshevPoly":
        header, *body = Path(path).read_text().splitlines()
        meta = dict(item.split("=", 1) for item in header.lstrip("# ").split())
        a, b = (float(v) for v in meta["interval"].split(","))
        alpha = None if meta.get("alpha", "None") == "None" else float(meta["alpha"])
        return cls(np.array([float(v) for v in body if v.strip()]), (a, b), alpha)


def interpolate(spec: SoftThresholdSpec, degree: int) -> ChebyshevPoly:
    """Interpolate ``scale_out * S_alpha`` at the ``degree + 1`` Chebyshev extrema."""
    if degree < 1:
        raise ValueError("degree must be at least 1")
    a, b = spec.interval
    k = np.arange(degree + 1)
    nodes = np.cos(np.pi * k / degree)
    f = soft_threshold(0.5 * (b - a) * nodes + 0.5 * (a + b), spec.alpha)
    w = np.ones(degree + 1)
    w[0] = w[-1] = 0.5
    # discrete cosine transform of type I
    coeffs = (2.0 / degree) * (np.cos(np.pi * np.outer(k, k) / degree) @ (w * f))
    coeffs[0] *= 0.5
    coeffs[-1] *= 0.5
    return ChebyshevPoly(coeffs * spec.scale_out, (a, b), spec.alpha)


def clenshaw_eval(p: ChebyshevPoly, x):
    """Clenshaw recurrence on the mapped input; extrapolates outside the interval."""
    t = p.to_unit(x)
    b1 = np.zeros_like(t)
    b2 = np.zeros_like(t)
    for c in p.coeffs[:0:-1]:
        b1, b2 = 2.0 * t * b1 - b2 + c, b1
    out = t * b1 - b2 + p.coeffs[0]
    return float(out) if out.ndim == 0 else out


def out_of_interval(p: ChebyshevPoly, x) -> int:
    """Count of inputs outside the validity interval (reported, never clipped)."""
    a, b = p.interval
    x = np.asarray(x)
    return int(np.count_nonzero((x < a) | (x > b)))


def baby_size(degree: int) -> int:
    """Baby-step bound ``k``: ``ceil(sqrt(d/2))`` rounded up to a power of two."""
    k = max(2, math.ceil(math.sqrt(degree / 2)))
    return 1 << (k - 1).bit_length()


def _divide(c: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``sum c_i T_i = q * T_g + r`` with ``deg r < g`` (needs ``deg < 2g``)."""
    d = len(c) - 1
    q = np.zeros(d - g + 1)
    r = np.array(c[:g], dtype=np.float64)
    q[0] = c[g]
    for j in range(1, d - g + 1):
        # T_{g+j} = 2 T_g T_j - T_{g-j}
        q[j] = 2.0 * c[g + j]
        r[g - j] -= c[g + j]
    return q, r


class _ChebBasis:
    """Lazily computed encrypted ``T_i(t)`` with zero padding beyond ``n``."""

    def __init__(self, ev: Evaluator, t: PackedCiphertext, n: int):
        self.ev = ev
        self.n = n
        self.one = ev.mask(n)
        self.cache = {1: t}

    def __getitem__(self, i: int) -> PackedCiphertext:
        if i in self.cache:
            return self.cache[i]
        ev = self.ev
        hi = 1 << (i.bit_length() - 1)
        if hi == i:
            half = self[i // 2]
            # T_2h = 2 T_h^2 - 1; doubling by addition keeps the depth
            out = ev.add_plain(ev.mult_ct(ev.add(half, half), half), self._neg_one())
        else:
            a, b = self[hi], self[i - hi]
            prod = ev.mult_ct(ev.add(a, a), b)
            rest = 2 * hi - i
            out = ev.sub(prod, self[rest]) if rest else ev.add_plain(prod, self._neg_one())
        self.cache[i] = out
        return out

    def _neg_one(self):
        return self.ev.mask(self.n, -1.0)


def _depth(i: int) -> int:
    return (i - 1).bit_length() if i > 1 else 0


def _leaf_depth(deg: int) -> int:
    return _depth(deg) + 1 if deg >= 1 else 0


def _ps(basis: _ChebBasis, c: np.ndarray, target: int, k: int) -> PackedCiphertext | None:
    """Evaluate ``sum c_i T_i`` with multiplicative depth at most ``target``.

    Returns ``None`` for the constant polynomial (added by the caller).
    """
    ev = basis.ev
    deg = len(c) - 1
    if deg == 0:
        return None
    if deg < k and _leaf_depth(deg) <= target:
        acc = None
        for i in range(1, deg + 1):
            term = ev.mult_const(basis[i], c[i])
            acc = term if acc is None else ev.add(acc, term)
        return ev.add_plain(acc, ev.mask(basis.n, c[0])) if c[0] else acc
    g = 1 << (deg.bit_length() - 1)
    q, r = _divide(c, g)
    if len(q) == 1:
        top = ev.mult_const(basis[g], q[0])
    else:
        qc = _ps(basis, q, target - 1, k)
        top = ev.mult_ct(qc, basis[g])
    rc = _ps(basis, r, target, k)
    if rc is None:
        return ev.add_plain(top, ev.mask(basis.n, r[0])) if r[0] else top
    return ev.add(top, rc)


def eval_ps_encrypted(p: ChebyshevPoly, x: PackedCiphertext, ev: Evaluator,
                      length: int | None = None) -> PackedCiphertext:
    """Paterson-Stockmeyer evaluation of ``p`` on every payload slot of ``x``.

    The affine map to ``[-1, 1]`` multiplies by a plaintext that is zero past
    ``length`` which also clears junk slots, so the output is zero-padded.
    Consumes exactly ``p.l_p`` levels.
    """
    n = x.length if length is None else length
    if x.level < p.l_p:
        raise LevelExhaustedError(
            f"polynomial evaluation needs {p.l_p} levels, ciphertext has {x.level}")
    a, b = p.interval
    t = ev.mult_pt(x, ev.mask(n, 2.0 / (b - a)), length=n)
    shift = -(a + b) / (b - a)
    if shift:
        t = ev.add_plain(t, ev.mask(n, shift))
    depth = eval_levels(p.degree)
    basis = _ChebBasis(ev, t, n)
    out = _ps(basis, p.coeffs, depth, baby_size(p.degree))
    if out is None:
        out = ev.add_plain(ev.mult_const(t, 0.0), ev.mask(n, p.coeffs[0]))
    return ev.level_down(out, x.level - p.l_p)
