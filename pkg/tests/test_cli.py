import json

import pytest

from satfeel.cli import (
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_STALL,
    ConfigError,
    ExperimentConfig,
    config_from_dict,
    config_to_dict,
    main,
    parse_config,
    parse_elevations,
)

TINY = {
    "constellation": {"num_planes": 2, "sats_per_plane": 3},
    "train": {"rounds": 2, "intra_rounds": 2, "local_steps": 1},
    "timing": {"measure_transfers": False},
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_defaults():
    cfg = config_from_dict({})
    c = cfg.constellation
    assert (c.num_sats, c.num_planes, c.phasing) == (80, 4, 1)
    assert cfg.link.min_elevation_deg == 45.0
    assert cfg.seed == 0
    assert parse_config(None) == cfg


def test_round_trip():
    cfg = config_from_dict({**TINY, "seed": 7, "algorithm": "hlsgd", "sweep": {"T_values": [1, 2]}})
    again = config_from_dict(json.loads(json.dumps(config_to_dict(cfg))))
    assert again == cfg
    assert config_from_dict(config_to_dict(ExperimentConfig())) == ExperimentConfig()


@pytest.mark.parametrize(
    "raw,key",
    [
        ({"constellation": {"altitude_km": -500}}, "altitude_km"),
        ({"bogus": 1}, "bogus"),
        ({"train": {"rounds": 3, "epochs": 2}}, "train.epochs"),
        ({"algorithm": "fedprox"}, "algorithm"),
        ({"train": {"rounds": "many"}}, "train.rounds"),
        ({"stations": [{"name": "x", "latitude_deg": 100, "longitude_deg": 0}]}, "latitude_deg"),
        ({"timing": {"wait_mode": "sometimes"}}, "wait_mode"),
    ],
)
def test_rejections_name_the_key(raw, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        config_from_dict(raw)


def test_bad_config_exit_code(tmp_path, capsys):
    path = write_cfg(tmp_path, {"constellation": {"altitude_km": -1}})
    assert main(["simulate", "--config", path, "--quiet"]) == EXIT_CONFIG
    assert "altitude_km" in capsys.readouterr().err


def test_simulate_writes_deterministic_outputs(tmp_path, capsys):
    path = write_cfg(tmp_path, TINY)
    for d in ("a", "b"):
        assert main(["simulate", "--config", path, "--out", str(tmp_path / d), "--quiet"]) == EXIT_OK
    for name in ("metrics.csv", "ledger.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        assert a.startswith(b"# schema_version: 1\n")
    rows = (tmp_path / "a" / "metrics.csv").read_text().splitlines()
    assert rows[2].startswith("fedmega,0,0,")
    assert "fedmega" in capsys.readouterr().out


def test_algorithm_dispatch(tmp_path):
    path = write_cfg(tmp_path, {**TINY, "algorithm": "fedisl"})
    assert main(["simulate", "--config", path, "--out", str(tmp_path), "--quiet"]) == EXIT_OK
    assert (tmp_path / "metrics.csv").read_text().splitlines()[2].startswith("fedisl,")
    assert main(["simulate", "--config", path, "--out", str(tmp_path), "--algorithm", "hlsgd", "--quiet"]) == EXIT_OK
    assert (tmp_path / "metrics.csv").read_text().splitlines()[2].startswith("hlsgd,")


def test_seed_override_changes_output(tmp_path):
    path = write_cfg(tmp_path, TINY)
    main(["simulate", "--config", path, "--out", str(tmp_path / "s0"), "--quiet"])
    main(["simulate", "--config", path, "--out", str(tmp_path / "s1"), "--seed", "1", "--quiet"])
    assert (tmp_path / "s0" / "metrics.csv").read_bytes() != (tmp_path / "s1" / "metrics.csv").read_bytes()


def test_sweep_row_groups(tmp_path):
    cfg = {
        **TINY,
        "train": {"rounds": 1, "local_steps": 1},
        "timing": {"measure_transfers": False, "wait_mode": "none"},
        "sweep": {"T_values": [1, 5, 10, 30, 100], "targets": [0.2, 0.5]},
    }
    path = write_cfg(tmp_path, cfg)
    assert main(["sweep", "--config", path, "--out", str(tmp_path), "--quiet"]) == EXIT_OK
    lines = (tmp_path / "sweep.csv").read_text().splitlines()[2:]
    assert [int(l.split(",")[0]) for l in lines] == [1, 1, 5, 5, 10, 10, 30, 30, 100, 100]


def test_rate_calc_monotone(capsys):
    assert main(["rate-calc", "--elevations", "10..90", "--quiet"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[1] == "elevation_deg,slant_range_km,rate_bps"
    rates = [float(l.split(",")[2]) for l in lines[2:]]
    assert len(rates) == 9 and all(a < b for a, b in zip(rates, rates[1:]))


def test_parse_elevations():
    assert parse_elevations("10..30:10") == [10.0, 20.0, 30.0]
    assert parse_elevations("15,45") == [15.0, 45.0]
    with pytest.raises(ConfigError):
        parse_elevations("ten..ninety")


def test_rar_trace(capsys):
    assert main(["rar-trace", "--K", "3", "--d", "12", "--quiet"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[1] == "iteration,sender,receiver,direction,chunk,phase"
    assert len(lines) == 2 + 2 * 3 * 4


def test_flow_debug_json_lines(tmp_path):
    path = write_cfg(tmp_path, {"constellation": {"num_planes": 2, "sats_per_plane": 10}})
    assert main(["flow-debug", "--config", path, "--out", str(tmp_path), "--out-file", "flow.jsonl", "--quiet"]) == 0
    recs = [json.loads(l) for l in (tmp_path / "flow.jsonl").read_text().splitlines()]
    assert recs and all({"slot", "edges", "total_flow"} <= set(r) for r in recs)
    slots = [r["slot"] for r in recs]
    assert slots == sorted(slots)


def test_bound_report(tmp_path):
    path = write_cfg(tmp_path, {**TINY, "train": {"rounds": 50, "eta": 1e-5}})
    assert main(["bound-report", "--config", path, "--out", str(tmp_path), "--quiet"]) == EXIT_OK
    rep = json.loads((tmp_path / "bound.json").read_text())
    assert rep["schema_version"] == 1 and rep["constants_are_estimates"] is True
    assert rep["bound"] == pytest.approx(sum(rep["terms"].values()))


def test_stall_exit_code(tmp_path, capsys):
    cfg = {**TINY, "link": {"min_elevation_deg": 90.0}, "timing": {"horizon_s": 300.0}}
    path = write_cfg(tmp_path, cfg)
    assert main(["simulate", "--config", path, "--out", str(tmp_path), "--quiet"]) == EXIT_STALL
    assert "round 0" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_exit_code(tmp_path):
    path = write_cfg(tmp_path, {**TINY, "train": {"rounds": 3, "eta": 1e308}, "timing": {"wait_mode": "none", "measure_transfers": False}})
    assert main(["simulate", "--config", path, "--out", str(tmp_path), "--quiet"]) == EXIT_NUMERIC


def test_skew_task(tmp_path):
    path = write_cfg(tmp_path, {**TINY, "task": "synthetic-skew"})
    assert main(["simulate", "--config", path, "--out", str(tmp_path), "--quiet"]) == EXIT_OK
