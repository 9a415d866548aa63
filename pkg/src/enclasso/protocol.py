"""Multi-server encrypted ADMM with one collective bootstrap per iteration.

Protocol 1 solves a Lasso whose rows are split homogeneously over ``K``
servers. Protocol 2 is the heterogeneous control variant: server 1 owns the
data-dependent rows, talks to the client and evaluates the soft threshold.

Every iteration follows the same packed schedule. Each server rotates its
local sum ``v_i = x_i + w_i`` to slot offset ``(i-1) n`` and broadcasts it.
All servers add the received pieces into one packed ciphertext and refresh it
with a single ``dboot``. They extract their own block by rotation and
form the global sum by rotate-and-sum. Levels follow a fixed schedule:

    z, w_i at l_B + 1  ->  x-update (mult_diag) at l_B  ->  dboot to L
    ->  soft threshold (l_P levels) back to l_B + 1

so the budget ``L = l_B + l_P + 1`` is tight.

Step numbers carried by :class:`ProtocolAbort` and used in docstrings:

    Protocol 1: 3 x-update, 4-5 rotate and broadcast, 6 dboot,
                7 extract and rotate-and-sum, 8 soft threshold, 9 w-update,
                11 final x-update at server 1
    Protocol 2: 2 assemble f from client data, 5 x-update (with F f at server 1),
                6 dboot, 8 soft threshold at server 1, 15 output u = U_f x_1
"""
from __future__ import annotations

import csv
import io
import threading
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .admm import (AdmmTrace, LassoProblem, _normalize_split, admm_distributed,
                   admm_hetero, even_split, local_inverse)
from .cheb import ChebyshevPoly, SoftThresholdSpec, eval_ps_encrypted, interpolate
from .simd_he import (Evaluator, LevelExhaustedError, OpCounts, PackedCiphertext,
                      ProtocolDesyncError, SchemeParams, CapacityError)


class ProtocolAbort(LevelExhaustedError):
    """A protocol line ran out of levels; ``line`` names the failing step."""

    def __init__(self, line: int, server: int, iteration: int, cause: Exception):
        self.line = line
        self.server = server
        self.iteration = iteration
        super().__init__(f"iteration {iteration}, server {server}, line {line}: {cause}")


# -- transcript ------------------------------------------------------------

EXPORT_COLUMNS = ("iter", "event_type", "server", "level_before", "level_after", "count")


@dataclass(frozen=True)
class Event:
    iter: int
    event_type: str
    server: int = 0
    level_before: int = -1
    level_after: int = -1
    count: int = 1


class ProtocolTranscript:
    """Append-only protocol record; safe to append from several threads.

    Event types: ``round`` (one all-to-all broadcast round), ``message``
    (one sender's broadcast within a round), ``send_z`` (server 1 fans ``z``
    out), ``dboot``, ``client_in``, ``client_out``, ``level:<name>`` (level
    trajectory of a named ciphertext), ``ops:<stage>:<counter>`` (operation
    counts) and ``abort``.
    """

    def __init__(self):
        self.events: list[Event] = []
        self._lock = threading.Lock()

    def record(self, it: int, event_type: str, server: int = 0, level_before: int = -1,
               level_after: int = -1, count: int = 1) -> None:
        with self._lock:
            self.events.append(Event(it, event_type, server, level_before, level_after, count))

    def record_ops(self, it: int, server: int, stage: str, delta: OpCounts) -> None:
        for f in fields(delta):
            value = getattr(delta, f.name)
            if value:
                self.record(it, f"ops:{stage}:{f.name}", server, count=value)

    def record_level(self, it: int, server: int, name: str, before: int, after: int) -> None:
        self.record(it, f"level:{name}", server, before, after)

    def select(self, event_type: str, it: int | None = None, server: int | None = None):
        return [e for e in self.events
                if (e.event_type == event_type or
                    (event_type.endswith(":") and e.event_type.startswith(event_type)))
                and (it is None or e.iter == it)
                and (server is None or e.server == server)]

    def iterations(self) -> list[int]:
        return sorted({e.iter for e in self.events if e.iter > 0})

    def count(self, event_type: str, it: int | None = None, server: int | None = None) -> int:
        """Number of matching events (not the sum of their ``count`` fields)."""
        return len(self.select(event_type, it, server))

    def total(self, event_type: str, it: int | None = None, server: int | None = None) -> int:
        return sum(e.count for e in self.select(event_type, it, server))

    def per_iteration(self, event_type: str) -> dict[int, int]:
        return {k: self.count(event_type, k) for k in self.iterations()}

    def export(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(EXPORT_COLUMNS)
        with self._lock:
            for e in self.events:
                writer.writerow([getattr(e, c) for c in EXPORT_COLUMNS])
        return out.getvalue()

    @classmethod
    def parse(cls, text: str) -> "ProtocolTranscript":
        tr = cls()
        rows = csv.reader(io.StringIO(text))
        header = next(rows)
        if tuple(header) != EXPORT_COLUMNS:
            raise ValueError(f"unexpected transcript header {header}")
        for r in rows:
            tr.events.append(Event(int(r[0]), r[1], int(r[2]), int(r[3]), int(r[4]), int(r[5])))
        return tr

    def summary(self) -> dict:
        its = self.iterations()
        return dict(iterations=len(its), rounds=self.count("round"),
                    messages=self.total("message") + self.total("send_z"),
                    dboots=self.count("dboot"),
                    ct_mults=self._ops_total("ct_mults"),
                    rotations=self._ops_total("rotations"))

    def _ops_total(self, counter: str) -> int:
        return sum(e.count for e in self.events
                   if e.event_type.startswith("ops:") and e.event_type.endswith(":" + counter))


# -- network ---------------------------------------------------------------

class NetworkSim:
    """Deterministic in-order broadcast among ``K`` servers.

    Latency is accounting only: every round (and every point-to-point fan-out)
    adds ``latency_ms`` to :attr:`modeled_latency_s`.
    """

    def __init__(self, K: int, latency_ms: float = 0.0, transcript: ProtocolTranscript | None = None):
        if K < 1:
            raise ValueError("need at least one server")
        self.K = K
        self.latency_ms = float(latency_ms)
        self.transcript = transcript if transcript is not None else ProtocolTranscript()
        self.rounds = 0
        self.messages = 0
        self.modeled_latency_s = 0.0

    def broadcast_round(self, it: int, payloads: dict[int, PackedCiphertext]) -> dict[int, list]:
        """All listed senders broadcast; returns each server's inbox ordered by sender."""
        if sorted(payloads) != list(range(1, self.K + 1)):
            raise ProtocolDesyncError(f"round needs all {self.K} senders, got {sorted(payloads)}")
        self.rounds += 1
        self.modeled_latency_s += self.latency_ms / 1000.0
        self.transcript.record(it, "round", 0, count=len(payloads))
        inbox = {i: [] for i in range(1, self.K + 1)}
        for sender in sorted(payloads):
            ct = payloads[sender]
            self.transcript.record(it, "message", sender, ct.level, ct.level, self.K - 1)
            for peer in inbox:
                if peer != sender:
                    inbox[peer].append((sender, ct))
                    self.messages += 1
        return inbox

    def fan_out(self, it: int, sender: int, ct: PackedCiphertext, kind: str) -> dict[int, PackedCiphertext]:
        """One server sends ``ct`` to every peer (Protocol 2 ``z`` distribution)."""
        self.modeled_latency_s += self.latency_ms / 1000.0
        self.messages += self.K - 1
        self.transcript.record(it, kind, sender, ct.level, ct.level, self.K - 1)
        return {i: ct for i in range(1, self.K + 1) if i != sender}


# -- server state ----------------------------------------------------------

@dataclass
class ServerState:
    server_id: int
    n: int
    K: int
    ev: Evaluator
    cheb: ChebyshevPoly
    M: list
    m: PackedCiphertext | None = None
    F: list | None = None
    U_f: list | None = None
    U_rows: int = 0
    f_len: int = 0
    composite: dict | None = None
    x: PackedCiphertext | None = None
    w: PackedCiphertext | None = None
    z: PackedCiphertext | None = None
    k: int = 0
    history: dict = field(default_factory=dict)

    @property
    def g(self) -> PackedCiphertext | None:
        return self.x


def level_budget(params: SchemeParams, cheb: ChebyshevPoly) -> int:
    """``L = l_B + l_P + 1``."""
    return params.l_boot + cheb.l_p + 1


def _start_level(params: SchemeParams, cheb: ChebyshevPoly) -> int:
    """Level of ``z`` and ``w`` after a soft threshold; the schedule starts there."""
    level = params.max_level - cheb.l_p
    if level < 0:
        raise ProtocolAbort(10, 0, 0, LevelExhaustedError(
            f"soft threshold needs {cheb.l_p} levels, only {params.max_level} available"))
    return level


def _check_packing(params: SchemeParams, K: int, n: int) -> None:
    if K * n > params.slot_count:
        raise CapacityError(f"packing needs K*n = {K * n} slots, have {params.slot_count}")


def _evaluators(params: SchemeParams, K: int, seed: int) -> list[Evaluator]:
    return [Evaluator(params, seed=seed + i) for i in range(1, K + 1)]


def softt_poly(alpha: float, interval, K: int, degree: int) -> ChebyshevPoly:
    """Chebyshev approximation of ``S_alpha / K`` (the ``1/K`` factor folded in)."""
    return interpolate(SoftThresholdSpec(alpha, tuple(interval), 1.0 / K), degree)


# -- Protocol 1 ------------------------------------------------------------

def offline_setup_p1(p: LassoProblem, K: int, params: SchemeParams, cheb: ChebyshevPoly,
                     split=None, seed: int = 0) -> list[ServerState]:
    """Plaintext preprocessing of ``M_i = rho (A_i^T A_i + rho I)^{-1}`` and
    ``m_i = A_i^T b_i / rho``, then encoding at the top level."""
    n = p.n
    _check_packing(params, K, n)
    blocks = _normalize_split(split if split is not None else even_split(p.m, K), p.m)
    if len(blocks) != K:
        raise ValueError(f"split has {len(blocks)} blocks for K={K}")
    start = _start_level(params, cheb)
    states = []
    for i, (blk, ev) in enumerate(zip(blocks, _evaluators(params, K, seed)), start=1):
        Ai, bi = p.A[blk], p.b[blk]
        Mi = p.rho * local_inverse(Ai, p.rho)
        states.append(ServerState(
            i, n, K, ev, cheb, ev.encode_diagonals(Mi),
            m=ev.encode(Ai.T @ bi / p.rho, tag=f"m{i}"),
            z=ev.encode(np.zeros(n), level=start, tag="z"),
            w=ev.encode(np.zeros(n), level=start, tag=f"w{i}")))
    return states


def _sync_check(states) -> int:
    ks = {s.k for s in states}
    if len(ks) != 1:
        raise ProtocolDesyncError(f"servers at different iterations {sorted(ks)}")
    return ks.pop()


def _guard(line: int, server: int, it: int, tr: ProtocolTranscript, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except LevelExhaustedError as exc:
        if isinstance(exc, ProtocolAbort):
            raise
        tr.record(it, "abort", server, count=line)
        raise ProtocolAbort(line, server, it, exc) from exc


def _map(fn, states, parallel: bool):
    if parallel and len(states) > 1:
        with ThreadPoolExecutor(max_workers=len(states)) as pool:
            return list(pool.map(fn, states))
    return [fn(s) for s in states]


def _staged(tr, it, s, stage, fn, *args):
    before = s.ev.counts.snapshot()
    out = fn(*args)
    tr.record_ops(it, s.server_id, stage, s.ev.counts - before)
    return out


def _x_update_p1(s: ServerState, it: int, tr: ProtocolTranscript) -> PackedCiphertext:
    ev = s.ev
    # E(x_i) = MultDiag(M_i, m_i + z - w_i)
    rhs = ev.sub(ev.add(s.m, s.z), s.w)
    x = _guard(3, s.server_id, it, tr, _staged, tr, it, s, "x_update",
               ev.mult_diag, s.M, rhs, s.n, s.n)
    tr.record_level(it, s.server_id, "x", rhs.level, x.level)
    return x


def _exchange_and_boot(states, vs, it, net: NetworkSim, tr: ProtocolTranscript,
                       boot_ev: Evaluator, parallel: bool):
    """Lines 4-8: rotate, broadcast, assemble, one dboot, extract, rotate-and-sum.

    Returns per-server refreshed ``v_i`` and the global sum (per server).
    """
    n, K = states[0].n, states[0].K

    def shifted(args):
        s, v = args
        return _staged(tr, it, s, "pack", s.ev.rotate, v, -(s.server_id - 1) * n)

    outgoing = dict(zip((s.server_id for s in states),
                        _map(shifted, list(zip(states, vs)), parallel)))
    inbox = net.broadcast_round(it, outgoing)
    assembled = []
    for s in states:
        parts = sorted(inbox[s.server_id] + [(s.server_id, outgoing[s.server_id])],
                       key=lambda t: t[0])
        acc = parts[0][1]
        for _, ct in parts[1:]:
            acc = s.ev.add(acc, ct)
        assembled.append(acc)
    # the collective refresh is the second broadcast round
    net.broadcast_round(it, {s.server_id: ct for s, ct in zip(states, assembled)})
    level_before = assembled[0].level
    boot = _guard(6, 0, it, tr, boot_ev.dboot, assembled, parties=K)
    tr.record(it, "dboot", 0, level_before, boot.level, 1)

    def extract(s):
        own = _staged(tr, it, s, "extract", s.ev.rotate, boot, (s.server_id - 1) * n)

        def rot_sum():
            acc = boot
            for j in range(1, K):
                acc = s.ev.add(acc, s.ev.rotate(boot, j * n))
            return acc
        return own, _staged(tr, it, s, "rotsum", rot_sum)

    pairs = _map(extract, states, parallel)
    return [p[0] for p in pairs], [p[1] for p in pairs]


def _soft_threshold(s: ServerState, total: PackedCiphertext, it: int, tr) -> PackedCiphertext:
    z = _guard(8, s.server_id, it, tr, _staged, tr, it, s, "softt",
               eval_ps_encrypted, s.cheb, total, s.ev, s.n)
    tr.record_level(it, s.server_id, "z", total.level, z.level)
    return z


def _w_update(s: ServerState, own: PackedCiphertext, z: PackedCiphertext, it: int, tr):
    def masked():
        return s.ev.sub(s.ev.mult_pt(own, s.ev.mask(s.n), length=s.n), z)
    w = _guard(9, s.server_id, it, tr, _staged, tr, it, s, "w_update", masked)
    tr.record_level(it, s.server_id, "w", own.level, w.level)
    return w


def iterate_p1(states: list[ServerState], net: NetworkSim, transcript: ProtocolTranscript,
               boot_ev: Evaluator | None = None, parallel: bool = False,
               monitor: AdmmTrace | None = None) -> list[ServerState]:
    """One Protocol 1 iteration (lines 3-9). ``monitor`` receives decoded iterates."""
    k = _sync_check(states)
    it = k + 1
    tr = transcript
    boot_ev = boot_ev or states[0].ev

    def local(s):
        s.x = _x_update_p1(s, it, tr)
        return s.ev.add(s.x, s.w)
    vs = _map(local, states, parallel)
    owns, totals = _exchange_and_boot(states, vs, it, net, tr, boot_ev, parallel)

    def finish(args):
        s, own, total = args
        s.z = _soft_threshold(s, total, it, tr)
        s.w = _w_update(s, own, s.z, it, tr)
        s.k = it
    _map(finish, list(zip(states, owns, totals)), parallel)
    if monitor is not None:
        dec = Evaluator.decode
        monitor.append(x=np.array([dec(s.x) for s in states]), z=dec(states[0].z),
                       w=np.array([dec(s.w) for s in states]),
                       y=dec(totals[0], states[0].n))
    return states


@dataclass
class RunResult:
    x: np.ndarray
    transcript: ProtocolTranscript
    trace: AdmmTrace
    network: NetworkSim
    states: list


def prior_interval_p1(p: LassoProblem, K: int, iters: int, margin: float = 1.2,
                      split=None) -> tuple[float, float]:
    """Interval from a plaintext dry run with the exact soft threshold."""
    _, trace = admm_distributed(p, split if split is not None else even_split(p.m, K), iters)
    bound = margin * max(float(np.abs(np.asarray(trace.y)).max()), p.lam / p.rho)
    return (-bound, bound)


def run_p1(p: LassoProblem, K: int, iters: int, params: SchemeParams | None = None,
           degree: int = 11, interval=None, cheb: ChebyshevPoly | None = None,
           split=None, parallel: bool = False, latency_ms: float = 0.0,
           seed: int = 0) -> RunResult:
    """Offline setup, ``iters`` iterations, then server 1's final x-update (line 11)."""
    params = params or SchemeParams()
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if cheb is None:
        interval = interval or prior_interval_p1(p, K, iters, split=split)
        cheb = softt_poly(p.lam / p.rho, interval, K, degree)
    states = offline_setup_p1(p, K, params, cheb, split, seed)
    tr = ProtocolTranscript()
    net = NetworkSim(K, latency_ms, tr)
    boot_ev = Evaluator(params, seed=seed)
    trace = AdmmTrace()
    for _ in range(iters):
        iterate_p1(states, net, tr, boot_ev, parallel, trace)
    s1 = states[0]
    x = _x_update_p1(s1, iters + 1, tr)
    tr.record(iters + 1, "client_out", 1, x.level, x.level, 1)
    return RunResult(Evaluator.decode(x), tr, trace, net, states)


# -- Protocol 2 ------------------------------------------------------------

def composite_matrices(M1: np.ndarray, F1: np.ndarray, local_updates: int) -> dict:
    """Affine maps for ``local_updates`` repeats of server 1's update at fixed ``z``.

    Writes ``x = X_f f + X_z z + X_w w`` and ``v = x + w' = V_f f + V_z z + V_w w``
    where ``w'`` is ``w`` after the intermediate local dual updates.
    """
    S = M1.shape[0]
    eye = np.eye(S)
    Wc, Wz, Ww = np.zeros((S, S)), np.zeros((S, S)), eye.copy()
    for r in range(local_updates):
        Xc, Xz, Xw = eye - M1 @ Wc, M1 - M1 @ Wz, -M1 @ Ww
        if r < local_updates - 1:
            Wc, Wz, Ww = Wc + Xc, Wz + Xz - eye, Ww + Xw
    return dict(X_f=Xc @ F1, X_z=Xz, X_w=Xw, V_f=(Xc + Wc) @ F1, V_z=Xz + Wz, V_w=Xw + Ww)


def offline_setup_p2(h, K: int, params: SchemeParams, cheb: ChebyshevPoly, rho: float,
                     local_updates: int = 1, split=None, first_m: bool = False,
                     seed: int = 0) -> list[ServerState]:
    """Server 1 gets ``M_1``, ``F_1 = M_1 H_1^T J_1 / rho`` and ``U_f``; the others only ``M_i``."""
    from .deepc import hetero_split
    if K < 2:
        raise ValueError("Protocol 2 needs K >= 2")
    S = h.S
    _check_packing(params, K, S)
    sizes = list(split) if split is not None else hetero_split(h, K)
    blocks = _normalize_split(sizes, h.rows)
    if len(blocks) != K:
        raise ValueError(f"split has {len(blocks)} blocks for K={K}")
    H = h.H
    n_f = blocks[0].size
    start = _start_level(params, cheb)
    U = h.U_f[: h.m] if first_m else h.U_f
    states = []
    for i, (blk, ev) in enumerate(zip(blocks, _evaluators(params, K, seed)), start=1):
        Hi = H[blk]
        Mi = rho * local_inverse(Hi, rho)
        st = ServerState(i, S, K, ev, cheb, ev.encode_diagonals(Mi),
                         z=ev.encode(np.zeros(S), level=start, tag="z"),
                         w=ev.encode(np.zeros(S), level=start, tag=f"w{i}"))
        if i == 1:
            J1 = h.J[:n_f, :n_f]
            F1 = Mi @ Hi.T @ J1 / rho
            st.F = ev.encode_diagonals(F1)
            st.f_len = n_f
            st.U_f = ev.encode_diagonals(U)
            st.U_rows = U.shape[0]
            if local_updates > 1:
                comp = composite_matrices(Mi, F1, local_updates)
                st.composite = {name: (ev.encode_diagonals(mat), mat.shape)
                                for name, mat in comp.items()}
            st.history = dict(y=deque(maxlen=h.M), u=deque(maxlen=h.M), layout=(h.p, h.m, h.M, h.N))
        states.append(st)
    return states


class Client:
    """Holds the key; encrypts measurements and decrypts the computed input."""

    def __init__(self, params: SchemeParams, seed: int = 99):
        self.params = params
        self.ev = Evaluator(params, seed=seed)

    @property
    def input_level(self) -> int:
        return self.params.l_boot + 2

    def encrypt(self, values, tag: str = "") -> PackedCiphertext:
        return self.ev.encode(values, level=self.input_level, tag=tag)

    def measurement(self, y, u) -> dict:
        return dict(y=self.encrypt(y, "y"), u=self.encrypt(u, "u"))

    def decrypt(self, ct: PackedCiphertext) -> np.ndarray:
        return Evaluator.decode(ct)


def push_measurement(s1: ServerState, msg: dict, transcript: ProtocolTranscript | None = None,
                     it: int = 0) -> None:
    """Server 1 keeps the last ``M`` encrypted outputs and inputs."""
    for key in ("y", "u"):
        ct = msg[key]
        if ct.level < s1.ev.params.l_boot + 2:
            raise LevelExhaustedError(
                f"client input {key} at level {ct.level}, need {s1.ev.params.l_boot + 2}")
        s1.history[key].append(ct)
        if transcript is not None:
            transcript.record(it, "client_in", 1, ct.level, ct.level, 1)


def assemble_f(s1: ServerState, r_ct: PackedCiphertext, it: int, tr) -> PackedCiphertext:
    """``E(f_1) = E([ybar; r; ubar])`` from the history by rotations and one mask."""
    ev = s1.ev
    p, m, M, N = s1.history["layout"]
    ys, us = s1.history["y"], s1.history["u"]
    if len(ys) != M or len(us) != M:
        raise ProtocolDesyncError(f"server 1 holds {len(ys)} past samples, needs {M}")
    if r_ct.level < ev.params.l_boot + 2:
        raise LevelExhaustedError(f"client reference at level {r_ct.level}")
    acc = ys[0]
    pieces = [(ys[j], j * p) for j in range(1, M)] + [(r_ct, p * M)]
    pieces += [(us[j], p * M + p * N + j * m) for j in range(M)]
    for ct, off in pieces:
        acc = ev.add(acc, ev.rotate(ct, -off))
    f = ev.mult_pt(acc, ev.mask(s1.f_len), length=s1.f_len)
    tr.record_level(it, 1, "f", acc.level, f.level)
    return f


def step_p2(states: list[ServerState], r_ct: PackedCiphertext, iters: int, net: NetworkSim,
            transcript: ProtocolTranscript, boot_ev: Evaluator | None = None,
            parallel: bool = False, monitor: AdmmTrace | None = None) -> PackedCiphertext:
    """One control time step: ``iters`` heterogeneous ADMM rounds, then ``u* = U_f g_1``.

    Server 1's history must already hold the latest ``M`` measurements.
    Iterates restart from ``z = w = 0`` every time step.
    """
    tr = transcript
    s1 = states[0]
    ev1 = s1.ev
    boot_ev = boot_ev or ev1
    params = ev1.params
    S = s1.n
    start = _start_level(params, s1.cheb)
    for s in states:
        s.k = 0
        s.z = s.ev.encode(np.zeros(S), level=start, tag="z")
        s.w = s.ev.encode(np.zeros(S), level=start, tag=f"w{s.server_id}")
    tr.record(1, "client_in", 1, r_ct.level, r_ct.level, 1)
    f = _guard(2, 1, 1, tr, assemble_f, s1, r_ct, 1, tr)
    comp = s1.composite
    if comp is None:
        fterm = _guard(5, 1, 1, tr, _staged, tr, 1, s1, "f_term",
                       ev1.mult_diag, s1.F, f, S, s1.f_len)
    else:
        def md(name, ct):
            diags, (rows, cols) = comp[name]
            return ev1.mult_diag(diags, ct, rows, cols)
        v_f = _guard(5, 1, 1, tr, _staged, tr, 1, s1, "f_term", md, "V_f", f)
        x_f = _guard(5, 1, 1, tr, _staged, tr, 1, s1, "f_term", md, "X_f", f)

    for k in range(iters):
        it = k + 1
        _sync_check(states)

        def local(s, it=it):
            ev = s.ev
            if s.server_id == 1 and comp is not None:
                def upd():
                    v = ev.add(ev.add(v_f, md("V_z", s.z)), md("V_w", s.w))
                    x = ev.add(ev.add(x_f, md("X_z", s.z)), md("X_w", s.w))
                    return x, v
                s.x, v = _guard(5, 1, it, tr, _staged, tr, it, s, "x_update", upd)
                tr.record_level(it, 1, "x", s.z.level, v.level)
                return v
            rhs = ev.sub(s.z, s.w)
            x = _guard(5, s.server_id, it, tr, _staged, tr, it, s, "x_update",
                       ev.mult_diag, s.M, rhs, S, S)
            if s.server_id == 1:
                x = ev.add(x, fterm)
            tr.record_level(it, s.server_id, "x", rhs.level, x.level)
            s.x = x
            return ev.add(x, s.w)

        vs = _map(local, states, parallel)
        owns, totals = _exchange_and_boot(states, vs, it, net, tr, boot_ev, parallel)
        z = _soft_threshold(s1, totals[0], it, tr)
        received = net.fan_out(it, 1, z, "send_z")
        for s in states:
            s.z = z if s.server_id == 1 else received[s.server_id]
        for s, own in zip(states, owns):
            s.w = _w_update(s, own, s.z, it, tr)
            s.k = it
        if monitor is not None:
            dec = Evaluator.decode
            monitor.append(x=np.array([dec(s.x) for s in states]), z=dec(z),
                           w=np.array([dec(s.w) for s in states]), y=dec(totals[0], S))
    u = _guard(15, 1, iters, tr, _staged, tr, iters, s1, "output",
               ev1.mult_diag, s1.U_f, s1.x, s1.U_rows, S)
    tr.record(iters, "client_out", 1, s1.x.level, u.level, 1)
    return u


def prior_interval_p2(h, Jf_samples, lam: float, rho: float, iters: int, K: int = 3,
                      margin: float = 1.2, split=None) -> tuple[float, float]:
    """Interval from plaintext exact-shrink dry runs on representative right-hand sides."""
    from .deepc import hetero_split
    sizes = list(split) if split is not None else hetero_split(h, K)
    peak = lam / rho
    for Jf in Jf_samples:
        _, trace = admm_hetero(h.H, Jf, sizes, lam, rho, iters)
        peak = max(peak, float(np.abs(np.asarray(trace.y)).max()))
    return (-margin * peak, margin * peak)


@dataclass
class ProtocolController:
    """Closed-loop adapter: encrypted Protocol 2 as a ``closed_loop`` solver."""

    h: object
    K: int
    lam: float
    rho: float
    iters: int
    interval: tuple
    params: SchemeParams = field(default_factory=SchemeParams)
    degree: int = 11
    local_updates: int = 1
    latency_ms: float = 0.0
    parallel: bool = False
    seed: int = 0

    def __post_init__(self):
        self.cheb = softt_poly(self.lam / self.rho, self.interval, self.K, self.degree)
        self.states = offline_setup_p2(self.h, self.K, self.params, self.cheb, self.rho,
                                       self.local_updates, first_m=True, seed=self.seed)
        self.client = Client(self.params, seed=self.seed + 1000)
        self.boot_ev = Evaluator(self.params, seed=self.seed)
        self.transcripts: list[ProtocolTranscript] = []
        self.net = NetworkSim(self.K, self.latency_ms)

    needs_signals = True

    def __call__(self, h, Jf, t, ybar, r, ubar):
        from .deepc import SolverResult
        p, m, M, _ = self.states[0].history["layout"]
        s1 = self.states[0]
        tr = ProtocolTranscript()
        self.net.transcript = tr
        yb, ub = np.reshape(ybar, (M, p)), np.reshape(ubar, (M, m))
        # the first step ships the whole window, later steps only the newest sample
        fresh = range(M) if len(s1.history["y"]) < M else [M - 1]
        for j in fresh:
            push_measurement(s1, self.client.measurement(yb[j], ub[j]), tr, 1)
        u_ct = step_p2(self.states, self.client.encrypt(r, "r"), self.iters, self.net, tr,
                       self.boot_ev, self.parallel)
        self.transcripts.append(tr)
        s = tr.summary()
        return SolverResult(u=self.client.decrypt(u_ct), iterations=self.iters,
                            summary=f"rounds={s['rounds']};dboots={s['dboots']}")


def prior_interval_closed_loop(plant_factory, w, seed: int, steps: int, rho: float, iters: int,
                               K: int = 3, margin: float = 1.2, M: int = 4, N: int = 8,
                               T: int = 84) -> tuple[float, float]:
    """Plaintext exact-shrink closed-loop dry run; widest soft-threshold input times ``margin``."""
    from .deepc import closed_loop, hetero_split
    peak = [w.lambda_g / rho]

    def solver(h, Jf, t):
        _, trace = admm_hetero(h.H, Jf, hetero_split(h, K), w.lambda_g, rho, iters)
        peak.append(float(np.abs(np.asarray(trace.y)).max()))
        return trace.x[-1][0]
    closed_loop(plant_factory(), w, solver, steps, seed, M, N, T)
    bound = margin * max(peak)
    return (-bound, bound)
