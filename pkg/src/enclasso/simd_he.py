"""Leveled SIMD ciphertext simulator.

The reference backend keeps every slot as a fixed-point real (quantized to
``2**-scale_bits``) and enforces CKKS-style level bookkeeping: additions and
rotations are free, every multiplication (ciphertext, plaintext or scalar)
consumes one level, and a level-0 ciphertext refuses further multiplications.
Refreshing is only possible through the collective :func:`Evaluator.dboot`.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

ZEROS = "zeros"
JUNK = "junk"
_PAD_CODES = {ZEROS: 0, JUNK: 1}


class HEError(Exception):
    """Base class for simulator errors."""


class CapacityError(HEError):
    pass


class ShapeError(HEError):
    pass


class LevelExhaustedError(HEError):
    """Raised when a multiplication is requested on a ciphertext at level 0."""


class BootstrapHeadroomError(LevelExhaustedError):
    """Raised when a ciphertext is too low for the collective refresh."""


class ProtocolDesyncError(HEError):
    pass


@dataclass(frozen=True)
class SchemeParams:
    slot_count: int = 2 ** 14
    max_level: int = 9
    scale_bits: int = 40
    l_boot: int = 3
    noise_std: float = 0.0

    def __post_init__(self):
        n = self.slot_count
        if n < 1 or n & (n - 1):
            raise ValueError(f"slot_count must be a power of two, got {n}")
        if self.scale_bits < 1:
            raise ValueError("scale_bits must be positive")
        if self.l_boot < 0:
            raise ValueError("l_boot must be non-negative")
        if self.max_level < self.l_boot + 1:
            raise ValueError(
                f"max_level={self.max_level} leaves no usable level above l_boot={self.l_boot}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    @property
    def scale(self) -> float:
        return float(2 ** self.scale_bits)

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.scale_bits

    def to_config(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_config(cls, text: str) -> "SchemeParams":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ValueError(f"unknown scheme parameter {key!r}")
            kwargs[key] = float(value) if key == "noise_std" else int(value)
        return cls(**kwargs)


def quantize(values, scale_bits: int) -> np.ndarray:
    scale = 2.0 ** scale_bits
    return np.round(np.asarray(values, dtype=np.float64) * scale) / scale


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class PackedCiphertext:
    """Simulated ciphertext: ``slot_count`` reals plus a level and pad contract.

    ``length`` is the declared payload length. With ``pad_kind == "zeros"``
    every slot from ``length`` on is exactly zero.
    """

    slots: np.ndarray
    level: int
    length: int
    pad_kind: str = ZEROS
    tag: str = ""

    def __post_init__(self):
        if self.level < 0:
            raise LevelExhaustedError(f"negative level {self.level}")
        if self.pad_kind not in _PAD_CODES:
            raise ValueError(f"bad pad kind {self.pad_kind!r}")

    @property
    def slot_count(self) -> int:
        return self.slots.shape[0]

    def payload(self) -> np.ndarray:
        return np.array(self.slots[: self.length])

    def to_bytes(self) -> bytes:
        body = struct.pack("<IiIB", self.slot_count, self.level, self.length,
                           _PAD_CODES[self.pad_kind])
        body += np.asarray(self.slots, dtype="<f8").tobytes()
        return struct.pack("<I", len(body)) + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "PackedCiphertext":
        (size,) = struct.unpack_from("<I", data, 0)
        if len(data) != size + 4:
            raise ValueError(f"record length {len(data) - 4} does not match prefix {size}")
        n, level, length, pad = struct.unpack_from("<IiIB", data, 4)
        slots = np.frombuffer(data, dtype="<f8", count=n, offset=4 + 13).astype(np.float64)
        kind = {v: k for k, v in _PAD_CODES.items()}[pad]
        return cls(_frozen(slots), level, length, kind)


@dataclass(frozen=True, eq=False)
class PlainVector:
    slots: np.ndarray

    @property
    def slot_count(self) -> int:
        return self.slots.shape[0]


@dataclass
class OpCounts:
    ct_mults: int = 0
    pt_mults: int = 0
    const_mults: int = 0
    rotations: int = 0
    additions: int = 0
    boots: int = 0

    def snapshot(self) -> "OpCounts":
        return OpCounts(**vars(self))

    def __sub__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(**{k: v - getattr(other, k) for k, v in vars(self).items()})

    def __add__(self, other: "OpCounts") -> "OpCounts":
        return OpCounts(**{k: v + getattr(other, k) for k, v in vars(self).items()})


def bsgs_split(cols: int) -> tuple[int, int]:
    """Baby/giant step sizes ``(n1, n2)`` for a product with ``cols`` columns."""
    n1 = max(1, math.ceil(math.sqrt(cols / 2)))
    return n1, math.ceil(cols / n1)


class Evaluator:
    """Operations over :class:`PackedCiphertext` for one party.

    The evaluator owns only its operation counters; ciphertexts are immutable.
    ``on_boot`` is invoked once per collective bootstrap so a protocol
    transcript can record the communication round.
    """

    def __init__(self, params: SchemeParams, seed: int | None = 0,
                 on_boot: Callable[[PackedCiphertext, PackedCiphertext], None] | None = None):
        self.params = params
        self.counts = OpCounts()
        self.on_boot = on_boot
        self._rng = np.random.default_rng(seed)

    # -- encoding -------------------------------------------------------
    def _pad(self, values, n_slots: int) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.shape[0] > n_slots:
            raise CapacityError(f"payload of {values.shape[0]} exceeds {n_slots} slots")
        out = np.zeros(n_slots)
        out[: values.shape[0]] = values
        return out

    def encode(self, values, pad: str = ZEROS, level: int | None = None,
               tag: str = "") -> PackedCiphertext:
        """Fresh ciphertext at ``level`` (default: the top level ``L``)."""
        p = self.params
        slots = quantize(self._pad(values, p.slot_count), p.scale_bits)
        length = int(np.asarray(values).size)
        if pad == JUNK:
            # trailing slots hold arbitrary data nobody may rely on
            slots[length:] = quantize(self._rng.uniform(-1, 1, p.slot_count - length),
                                      p.scale_bits)
        if level is None:
            level = p.max_level
        if not 0 <= level <= p.max_level:
            raise ValueError(f"level {level} outside [0, {p.max_level}]")
        return PackedCiphertext(_frozen(slots), level, length, pad, tag)

    def plain(self, values) -> PlainVector:
        return PlainVector(_frozen(quantize(self._pad(values, self.params.slot_count),
                                            self.params.scale_bits)))

    def mask(self, length: int, value: float = 1.0) -> PlainVector:
        return self.plain(np.full(length, value))

    @staticmethod
    def decode(ct: PackedCiphertext, length: int | None = None) -> np.ndarray:
        return np.array(ct.slots[: ct.length if length is None else length])

    # -- helpers --------------------------------------------------------
    def _check(self, *cts):
        n = self.params.slot_count
        for ct in cts:
            if ct.slot_count != n:
                raise ShapeError(f"slot count {ct.slot_count} != {n}")

    def _requant(self, slots: np.ndarray) -> np.ndarray:
        p = self.params
        if p.noise_std:
            # perturb occupied slots only so zero padding survives
            noise = self._rng.normal(0.0, p.noise_std, slots.shape)
            slots = np.where(slots != 0, slots + noise, slots)
        return quantize(slots, p.scale_bits)

    def _consume(self, *cts) -> int:
        level = min(ct.level for ct in cts)
        if level < 1:
            raise LevelExhaustedError(
                "ciphertext at level 0 does not accept any more multiplications")
        return level - 1

    # -- arithmetic -----------------------------------------------------
    def add(self, a: PackedCiphertext, b: PackedCiphertext) -> PackedCiphertext:
        self._check(a, b)
        self.counts.additions += 1
        pad = ZEROS if a.pad_kind == b.pad_kind == ZEROS else JUNK
        return PackedCiphertext(_frozen(a.slots + b.slots), min(a.level, b.level),
                                max(a.length, b.length), pad)

    def sub(self, a: PackedCiphertext, b: PackedCiphertext) -> PackedCiphertext:
        self._check(a, b)
        self.counts.additions += 1
        pad = ZEROS if a.pad_kind == b.pad_kind == ZEROS else JUNK
        return PackedCiphertext(_frozen(a.slots - b.slots), min(a.level, b.level),
                                max(a.length, b.length), pad)

    def add_plain(self, a: PackedCiphertext, p: PlainVector) -> PackedCiphertext:
        """Add a plaintext; callers keep the zero-pad contract by masking ``p``."""
        self._check(a, p)
        self.counts.additions += 1
        slots = a.slots + p.slots
        pad = a.pad_kind
        if pad == ZEROS and np.any(slots[a.length:]):
            pad = JUNK
        return PackedCiphertext(_frozen(slots), a.level, a.length, pad)

    def mult_ct(self, a: PackedCiphertext, b: PackedCiphertext) -> PackedCiphertext:
        self._check(a, b)
        level = self._consume(a, b)
        self.counts.ct_mults += 1
        pad = ZEROS if ZEROS in (a.pad_kind, b.pad_kind) else JUNK
        if a.pad_kind == ZEROS and b.pad_kind == ZEROS:
            length = min(a.length, b.length)
        elif a.pad_kind == ZEROS:
            length = a.length
        elif b.pad_kind == ZEROS:
            length = b.length
        else:
            length = max(a.length, b.length)
        return PackedCiphertext(_frozen(self._requant(a.slots * b.slots)), level, length, pad)

    def mult_pt(self, a: PackedCiphertext, p: PlainVector,
                length: int | None = None) -> PackedCiphertext:
        """Slot-wise product with a plaintext.

        If ``p`` is zero beyond ``length`` the result is declared zero-padded
        with that payload length; this is how masking restores ``E_v0`` form.
        """
        self._check(a, p)
        level = self._consume(a)
        self.counts.pt_mults += 1
        slots = self._requant(a.slots * p.slots)
        if length is not None and not np.any(p.slots[length:]):
            return PackedCiphertext(_frozen(slots), level, length, ZEROS)
        return PackedCiphertext(_frozen(slots), level, a.length, a.pad_kind)

    def mult_const(self, a: PackedCiphertext, c: float) -> PackedCiphertext:
        """Multiply by a public real constant (rescaled, so one level)."""
        level = self._consume(a)
        self.counts.const_mults += 1
        c = float(quantize(c, self.params.scale_bits))
        return PackedCiphertext(_frozen(self._requant(a.slots * c)), level, a.length, a.pad_kind)

    def rotate(self, a: PackedCiphertext, i: int) -> PackedCiphertext:
        """Cyclic left rotation by ``i`` slots (negative ``i`` rotates right)."""
        self._check(a)
        if i % a.slot_count == 0:
            return a
        self.counts.rotations += 1
        return PackedCiphertext(_frozen(np.roll(a.slots, -i)), a.level, a.length, JUNK)

    def level_down(self, a: PackedCiphertext, level: int) -> PackedCiphertext:
        if level > a.level:
            raise ValueError(f"cannot raise level {a.level} to {level}")
        if level == a.level:
            return a
        return PackedCiphertext(a.slots, level, a.length, a.pad_kind)

    def with_payload(self, a: PackedCiphertext, length: int) -> PackedCiphertext:
        """Re-declare the payload length; zero-pad claim is verified."""
        pad = ZEROS if not np.any(a.slots[length:]) else JUNK
        return PackedCiphertext(a.slots, a.level, length, pad)

    # -- collective refresh --------------------------------------------
    def dboot(self, shared: Sequence[PackedCiphertext] | PackedCiphertext,
              parties: int | None = None) -> PackedCiphertext:
        """Distributed bootstrapping among ``parties`` key-share holders.

        Each party adds a uniformly random mask over ``Z / 2**64`` to the
        fixed-point encoding; the masks sum to zero so the recombined message
        is exact. Output is refreshed to the top level.
        """
        if isinstance(shared, PackedCiphertext):
            shared = [shared] * (parties or 1)
        if parties is not None and len(shared) != parties:
            raise ProtocolDesyncError(f"{len(shared)} inputs for {parties} parties")
        ref = shared[0]
        self._check(*shared)
        for ct in shared[1:]:
            if ct.level != ref.level or not np.array_equal(ct.slots, ref.slots):
                raise ProtocolDesyncError("parties hold different ciphertexts")
        p = self.params
        if ref.level < p.l_boot:
            raise BootstrapHeadroomError(
                f"level {ref.level} below bootstrap headroom l_B={p.l_boot}")
        fixed = np.round(ref.slots * p.scale).astype(np.int64).view(np.uint64)
        masks = self._rng.integers(0, 2 ** 63, size=(len(shared), p.slot_count),
                                   dtype=np.uint64, endpoint=False) * np.uint64(2)
        masks[-1] = -masks[:-1].sum(axis=0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            # one party's partial carries the message, every partial carries a mask
            partials = masks.copy()
            partials[0] += fixed
            total = partials.sum(axis=0, dtype=np.uint64)
        slots = total.view(np.int64).astype(np.float64) / p.scale
        self.counts.boots += 1
        out = PackedCiphertext(_frozen(slots), p.max_level, ref.length, ref.pad_kind)
        if self.on_boot is not None:
            self.on_boot(ref, out)
        return out

    # -- encrypted matrix-vector product -----------------------------------
    def encode_diagonals(self, matrix, level: int | None = None,
                         encrypt: bool = True) -> list:
        """Extended diagonals of ``matrix`` pre-rotated for :meth:`mult_diag`.

        ``d_i[j] = S[j, (j + i) mod cols]`` for ``j < rows``, rotated right by
        ``j * n1`` where ``i = j * n1 + k``.
        """
        S = np.asarray(matrix, dtype=np.float64)
        rows, cols = S.shape
        n1, _ = bsgs_split(cols)
        r = np.arange(rows)
        diags = []
        for i in range(cols):
            d = self._pad(S[r, (r + i) % cols], self.params.slot_count)
            d = np.roll(d, (i // n1) * n1)
            d = _frozen(quantize(d, self.params.scale_bits))
            if encrypt:
                top = self.params.max_level if level is None else level
                diags.append(PackedCiphertext(d, top, rows, JUNK if i // n1 else ZEROS))
            else:
                diags.append(PlainVector(d))
        return diags

    def decode_diagonals(self, diags, rows: int, cols: int) -> np.ndarray:
        n1, _ = bsgs_split(cols)
        S = np.zeros((rows, cols))
        r = np.arange(rows)
        for i, d in enumerate(diags):
            slots = np.roll(np.asarray(d.slots), -(i // n1) * n1)
            S[r, (r + i) % cols] = slots[:rows]
        return S

    def mult_diag(self, diags, p: PackedCiphertext, rows: int, cols: int) -> PackedCiphertext:
        """Baby-step giant-step product ``S @ p`` from pre-rotated diagonals.

        ``p`` must be zero-padded with payload length ``cols``. It is first
        replicated with period ``cols`` so that left rotations read the
        cyclic extension; the diagonals are zero beyond ``rows`` which
        leaves the result zero-padded without a final mask.
        """
        self._check(p)
        if len(diags) != cols:
            raise ShapeError(f"{len(diags)} diagonals for {cols} columns")
        if p.pad_kind != ZEROS or p.length > cols:
            raise ShapeError("mult_diag input must be zero-padded with payload <= cols")
        n_slots = self.params.slot_count
        n1, n2 = bsgs_split(cols)
        copies = 1
        while copies * cols < rows + cols - 1:
            copies *= 2
        if copies * cols > n_slots or rows + cols > n_slots:
            raise CapacityError(f"{rows}x{cols} product does not fit in {n_slots} slots")
        if p.level < 1:
            raise LevelExhaustedError(
                "ciphertext at level 0 does not accept any more multiplications")

        rep, width = p, cols
        while width < copies * cols:
            rep = self.add(rep, self.rotate(rep, -width))
            width *= 2
        baby = [rep] + [self.rotate(rep, k) for k in range(1, min(n1, cols))]

        total = None
        for j in range(n2):
            inner = None
            for k in range(n1):
                i = j * n1 + k
                if i >= cols:
                    break
                d = diags[i]
                term = (self.mult_ct(d, baby[k]) if isinstance(d, PackedCiphertext)
                        else self.mult_pt(baby[k], d))
                inner = term if inner is None else self.add(inner, term)
            if inner is None:
                continue
            inner = self.rotate(inner, j * n1)
            total = inner if total is None else self.add(total, inner)
        return PackedCiphertext(total.slots, total.level, rows, ZEROS)
