"""Experiment runner: single Lasso runs, closed-loop control, dimension sweeps.

Every mode writes into ``--out``:

* ``results.csv``  mode-specific table (see README)
* ``transcript.csv`` (or ``transcripts/step_XXXX.csv``) protocol event log
* ``summary.json`` totals, oracle comparison and modeled latency
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .admm import (LassoProblem, admm_distributed, even_split, fista_oracle, load_problem,
                   random_problem)
from .cheb import interpolate, SoftThresholdSpec
from .deepc import (ControlWeights, build_hankel, building_plant, closed_loop, collect_offline,
                    exact_solver)
from .protocol import (ProtocolController, ProtocolTranscript,
                       prior_interval_closed_loop, prior_interval_p1, run_p1, softt_poly)
from .simd_he import HEError, SchemeParams, bsgs_split

MODES = ("lasso-p1", "deepc-p2", "sweep")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str = ""
    seed: int | None = None
    problem: str = "random"
    m: int = 20
    n: int = 8
    lam: float | None = None
    rho: float | None = None
    K: int = 3
    iters: int = 20
    degree: int = 11
    interval: tuple[float, float] | None = None
    margin: float = 1.2
    scale_bits: int = 40
    slot_count: int = 2 ** 14
    l_B: int = 3
    L: int | None = None
    local_updates: int = 1
    noise_std: float = 0.0
    latency_ms: float = 0.0
    steps: int = 40
    dims: tuple[int, ...] = (8, 16, 32, 64)
    parallel: bool = False
    out: str = "out"

    def validate(self) -> None:
        bad = []
        if self.mode not in MODES:
            bad.append(f"mode (one of {', '.join(MODES)})")
        if self.seed is None:
            bad.append("seed (required for determinism)")
        for name in ("K", "iters", "degree", "m", "n", "steps", "local_updates", "slot_count"):
            if getattr(self, name) < 1:
                bad.append(f"{name} (must be >= 1)")
        if self.mode == "deepc-p2" and self.K < 2:
            bad.append("K (deepc-p2 needs K >= 2)")
        if self.interval is not None and not self.interval[0] < self.interval[1]:
            bad.append("interval (need a < b)")
        if self.margin < 1:
            bad.append("margin (must be >= 1)")
        if not self.dims or min(self.dims) < 1:
            bad.append("dims")
        if bad:
            raise ConfigError("invalid config field(s): " + "; ".join(bad))

    def params(self, degree: int | None = None) -> SchemeParams:
        l_p = interpolate(SoftThresholdSpec(1.0, (-2.0, 2.0)), degree or self.degree).l_p
        top = self.L if self.L is not None else self.l_B + l_p + 1
        return SchemeParams(slot_count=self.slot_count, max_level=top,
                            scale_bits=self.scale_bits, l_boot=self.l_B,
                            noise_std=self.noise_std)


_ALIASES = {"k": "K", "l_b": "l_B", "lb": "l_B", "l": "L", "scale-bits": "scale_bits",
            "local-updates": "local_updates", "noise-std": "noise_std",
            "latency-ms": "latency_ms", "slot-count": "slot_count"}


def _coerce(name: str, raw):
    if raw is None:
        return None
    kinds = {f.name: f.type for f in fields(RunConfig)}
    kind = kinds[name]
    text = str(raw).strip()
    if name == "interval":
        a, b = (float(v) for v in text.split(","))
        return (a, b)
    if name == "dims":
        return tuple(int(v) for v in text.split(","))
    if name == "parallel":
        return text.lower() in ("1", "true", "yes", "on")
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text


def parse_config_text(text: str) -> dict:
    """``key=value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key.lower(), key)
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown field {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="enclasso", description=__doc__.splitlines()[0])
    ap.add_argument("--mode", choices=MODES)
    ap.add_argument("--config", help="key=value file; its entries override flags")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--problem", help="'random', 'building' or a problem CSV file")
    ap.add_argument("--m", type=int)
    ap.add_argument("--n", type=int)
    ap.add_argument("--lam", type=float)
    ap.add_argument("--rho", type=float)
    ap.add_argument("--k", dest="K", type=int)
    ap.add_argument("--iters", type=int)
    ap.add_argument("--degree", type=int)
    ap.add_argument("--interval", help="a,b (default: prior plaintext simulation)")
    ap.add_argument("--margin", type=float)
    ap.add_argument("--scale-bits", dest="scale_bits", type=int)
    ap.add_argument("--slot-count", dest="slot_count", type=int)
    ap.add_argument("--l-b", dest="l_B", type=int)
    ap.add_argument("--levels", dest="L", type=int, help="top level L (default l_B + l_P + 1)")
    ap.add_argument("--local-updates", dest="local_updates", type=int)
    ap.add_argument("--noise-std", dest="noise_std", type=float)
    ap.add_argument("--latency-ms", dest="latency_ms", type=float)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--dims", help="comma-separated dimensions for sweep")
    ap.add_argument("--parallel", action="store_true", default=None)
    ap.add_argument("--out")
    return ap


def config_from_args(argv=None) -> RunConfig:
    args = build_parser().parse_args(argv)
    values = {}
    for f in fields(RunConfig):
        raw = getattr(args, f.name, None)
        if raw is not None:
            values[f.name] = _coerce(f.name, raw)
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text()))
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# -- modes ---------------------------------------------------------------------

def _load_lasso(cfg: RunConfig) -> tuple[LassoProblem, list | None]:
    if cfg.problem == "random":
        p = random_problem(cfg.m, cfg.n, cfg.seed, lam=cfg.lam, rho=cfg.rho or 1.0)
        return p, None
    path = Path(cfg.problem)
    if not path.exists():
        raise ConfigError(f"problem (no such file {cfg.problem!r})")
    p, split = load_problem(path.read_text())
    if cfg.lam is not None or cfg.rho is not None:
        p = LassoProblem(p.A, p.b, cfg.lam if cfg.lam is not None else p.lam,
                         cfg.rho if cfg.rho is not None else p.rho)
    return p, split


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _ops_per_iteration(tr: ProtocolTranscript) -> list[dict]:
    rows = []
    for k in tr.iterations():
        def tot(counter, k=k):
            return sum(e.count for e in tr.events if e.iter == k and e.event_type.startswith("ops:")
                       and e.event_type.endswith(":" + counter))
        rows.append(dict(iter=k, rounds=tr.count("round", k), dboots=tr.count("dboot", k),
                         ct_mults=tot("ct_mults"), pt_mults=tot("pt_mults"),
                         const_mults=tot("const_mults"), rotations=tot("rotations")))
    return rows


def run_lasso_p1(cfg: RunConfig) -> dict:
    p, split = _load_lasso(cfg)
    split = split or even_split(p.m, cfg.K)
    interval = cfg.interval or prior_interval_p1(p, cfg.K, cfg.iters, cfg.margin, split)
    cheb = softt_poly(p.lam / p.rho, interval, cfg.K, cfg.degree)
    params = cfg.params()
    res = run_p1(p, cfg.K, cfg.iters, params, cheb=cheb, split=split, parallel=cfg.parallel,
                 latency_ms=cfg.latency_ms, seed=cfg.seed)
    x_opt = fista_oracle(p)
    f_opt = p.objective(x_opt)
    _, plain = admm_distributed(p, split, cfg.iters)
    ops = _ops_per_iteration(res.transcript)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["iter", "objective", "oracle_objective", "rel_gap", "max_dev_plain_admm",
                "rounds", "dboots", "ct_mults", "pt_mults", "const_mults", "rotations"])
    for k, (z, zp) in enumerate(zip(res.trace.z, plain.z), 1):
        obj = p.objective(z)
        row = ops[k - 1]
        w.writerow([k, f"{obj:.12g}", f"{f_opt:.12g}", f"{(obj - f_opt) / max(abs(f_opt), 1e-300):.6e}",
                    f"{np.abs(z - zp).max():.6e}", row["rounds"], row["dboots"], row["ct_mults"],
                    row["pt_mults"], row["const_mults"], row["rotations"]])
    root = Path(cfg.out)
    _write(root / "results.csv", out.getvalue())
    _write(root / "transcript.csv", res.transcript.export())
    obj = p.objective(res.x)
    return dict(objective=obj, oracle_objective=f_opt,
                rel_gap=(obj - f_opt) / max(abs(f_opt), 1e-300),
                max_dev_oracle=float(np.abs(res.x - x_opt).max()),
                x=[float(v) for v in res.x], interval=list(interval),
                level_budget=params.max_level, **_net_summary(res.transcript, res.network, cfg))


def _net_summary(tr: ProtocolTranscript, net, cfg: RunConfig) -> dict:
    s = tr.summary()
    return dict(dboots=s["dboots"], rounds=s["rounds"], messages=net.messages,
                modeled_latency_s=net.modeled_latency_s, latency_ms=cfg.latency_ms)


def run_deepc_p2(cfg: RunConfig) -> dict:
    if cfg.problem not in ("random", "building"):
        raise ConfigError("problem (deepc-p2 supports only the building example)")
    w = ControlWeights.building_example()
    rho = cfg.rho or 1200.0
    seed = cfg.seed
    interval = cfg.interval or prior_interval_closed_loop(
        lambda: building_plant(seed), w, seed, cfg.steps, rho, cfg.iters, cfg.K, cfg.margin)
    traj = collect_offline(building_plant(seed), 84, seed)
    h = build_hankel(traj, w, 4, 8)
    params = cfg.params()
    ctl = ProtocolController(h, cfg.K, w.lambda_g, rho, cfg.iters, interval, params,
                             cfg.degree, cfg.local_updates, cfg.latency_ms, cfg.parallel, seed)
    log = closed_loop(building_plant(seed), w, ctl, cfg.steps, seed)
    ref = closed_loop(building_plant(seed), w,
                      lambda hh, Jf, t: exact_solver(hh, Jf, t, w.lambda_g), cfg.steps, seed)
    root = Path(cfg.out)
    _write(root / "results.csv", log.to_csv())
    for i, tr in enumerate(ctl.transcripts):
        _write(root / "transcripts" / f"step_{i + 4:04d}.csv", tr.export())
    dboots = sum(tr.count("dboot") for tr in ctl.transcripts)
    rounds = sum(tr.count("round") for tr in ctl.transcripts)
    return dict(tracking_cost=log.tracking_cost, exact_tracking_cost=ref.tracking_cost,
                cost_ratio=log.tracking_cost / ref.tracking_cost, interval=list(interval),
                control_steps=cfg.steps, offline_steps=4, dboots=dboots, rounds=rounds,
                messages=ctl.net.messages, modeled_latency_s=ctl.net.modeled_latency_s,
                latency_ms=cfg.latency_ms, level_budget=params.max_level)


def run_sweep(cfg: RunConfig) -> dict:
    rows = []
    for n in cfg.dims:
        p = random_problem(max(cfg.m, 2 * n), n, cfg.seed, lam=cfg.lam)
        iters = max(2, min(cfg.iters, 3))
        res = run_p1(p, cfg.K, iters, cfg.params(), degree=cfg.degree, seed=cfg.seed)
        tr = res.transcript

        def stage(name, counter, k=2):
            return tr.total(f"ops:{name}:{counter}", k, 1)
        n1, n2 = bsgs_split(n)
        rows.append(dict(n=n, dboots=tr.count("dboot", 2), rounds=tr.count("round", 2),
                         softt_ct_mults=stage("softt", "ct_mults"),
                         softt_const_mults=stage("softt", "const_mults"),
                         multdiag_rotations=stage("x_update", "rotations"),
                         multdiag_mults=stage("x_update", "ct_mults"),
                         rotsum_rotations=stage("rotsum", "rotations"),
                         rotation_bound=2 * (n1 + n2)))
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write(Path(cfg.out) / "results.csv", out.getvalue())
    return dict(rows=rows, dboots_constant=len({r["dboots"] for r in rows}) == 1,
                softt_constant=len({r["softt_ct_mults"] for r in rows}) == 1)


RUNNERS = {"lasso-p1": run_lasso_p1, "deepc-p2": run_deepc_p2, "sweep": run_sweep}


def run(cfg: RunConfig) -> int:
    cfg.validate()
    try:
        summary = RUNNERS[cfg.mode](cfg)
    except (HEError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    cfg_dict = asdict(cfg)
    summary = dict(mode=cfg.mode, config=cfg_dict, **summary)
    _write(Path(cfg.out) / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: v for k, v in summary.items() if k not in ("config", "rows", "x")},
                     sort_keys=True))
    return 0


def main(argv=None) -> int:
    try:
        cfg = config_from_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
