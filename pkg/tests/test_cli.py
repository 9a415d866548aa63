import csv
import json

import pytest

from enclasso.cli import ConfigError, RunConfig, config_from_args, main, parse_config_text


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_cli(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr()


def test_lasso_p1_example(tmp_path, capsys):
    out = tmp_path / "p1"
    code, _ = run_cli(["--mode", "lasso-p1", "--k", "3", "--iters", "50", "--degree", "11",
                       "--seed", "7", "--out", str(out)], capsys)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["dboots"] == 50
    res = rows(out / "results.csv")
    assert len(res) == 50 and all(r["dboots"] == "1" for r in res)
    assert (out / "transcript.csv").read_text().startswith(
        "iter,event_type,server,level_before,level_after,count")


def test_deepc_p2_example(tmp_path, capsys):
    out = tmp_path / "p2"
    code, _ = run_cli(["--mode", "deepc-p2", "--problem", "building", "--iters", "20",
                       "--latency-ms", "150", "--seed", "0", "--out", str(out)], capsys)
    assert code == 0
    res = rows(out / "results.csv")
    assert len(res) == 40
    offline = [r["offline"] for r in res]
    assert offline[:4] == ["1"] * 4 and set(offline[4:]) == {"0"}
    summary = json.loads((out / "summary.json").read_text())
    # 36 online steps, 20 iterations, two rounds plus one z fan-out each
    assert summary["modeled_latency_s"] == pytest.approx(36 * 20 * 0.450)


def test_sweep_example(tmp_path, capsys):
    out = tmp_path / "sw"
    code, _ = run_cli(["--mode", "sweep", "--dims", "8,16,32,64", "--seed", "0",
                       "--out", str(out)], capsys)
    assert code == 0
    res = rows(out / "results.csv")
    assert [int(r["n"]) for r in res] == [8, 16, 32, 64]
    for col in ("dboots", "rounds", "softt_ct_mults", "softt_const_mults"):
        assert len({r[col] for r in res}) == 1
    rot = [int(r["multdiag_rotations"]) for r in res]
    assert rot == sorted(rot) and rot[0] < rot[-1]
    assert all(int(r["multdiag_rotations"]) <= int(r["rotation_bound"]) for r in res)


def test_deterministic_outputs(tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["--mode", "lasso-p1", "--iters", "5", "--seed", "3", "--out", str(out)]) == 0
        outs.append(out)
    capsys.readouterr()
    for f in ("results.csv", "transcript.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_config_file_overrides_flags(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nk = 4\niters=7\ninterval = -2,2\n")
    cfg = config_from_args(["--mode", "lasso-p1", "--seed", "1", "--k", "2", "--iters", "3",
                            "--config", str(cfg_file)])
    assert (cfg.K, cfg.iters, cfg.interval) == (4, 7, (-2.0, 2.0))


def test_seed_required():
    with pytest.raises(ConfigError, match="seed"):
        RunConfig(mode="lasso-p1").validate()


def test_validation_names_fields(capsys):
    code = main(["--mode", "deepc-p2", "--seed", "0", "--k", "1", "--interval", "2,1"])
    err = capsys.readouterr().err
    assert code == 2 and "K" in err and "interval" in err


def test_bad_config_lines():
    with pytest.raises(ConfigError, match="unknown field"):
        parse_config_text("colour=blue")
    with pytest.raises(ConfigError, match="key=value"):
        parse_config_text("iters")
    with pytest.raises(ConfigError, match="iters"):
        parse_config_text("iters=many")


def test_protocol_error_exit_code(tmp_path, capsys):
    code, cap = run_cli(["--mode", "lasso-p1", "--seed", "0", "--levels", "8", "--iters", "2",
                         "--out", str(tmp_path)], capsys)
    assert code == 2 and "line 6" in cap.err
