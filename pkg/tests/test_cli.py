import json
from pathlib import Path

import numpy as np
import pytest

from flexcap.cli import main

from conftest import make_scenarios


def write_toy_workspace(root: Path, *, T=2, soe_max=200.0, soe_0=None,
                        fcr_scale=1.0, with_prosumption=True, uncertainty=True,
                        baseload_mode="uncontrolled", name="feeder",
                        services=("afrr_up",), seed=3):
    net_dir = root / "net"
    net_dir.mkdir(parents=True, exist_ok=True)
    (net_dir / "buses.csv").write_text(
        "id,type,vmin,vmax\n1,slack,0.8,1.2\n2,pq,0.8,1.2\n")
    (net_dir / "branches.csv").write_text(
        "id,from,to,r_pu,x_pu,imax_pu\nL1,1,2,0.001,0.001,5.0\n")
    (net_dir / "base.json").write_text(json.dumps(
        {"base_kva": 1000.0, "base_kv": 10.0}))

    scen = make_scenarios(drivers=("load", "pv"), T=T, n=220, n_in=180,
                          seed=seed, load_sd=0.03, pv_sd=0.05)
    header = ",".join(f"{d}_{t:02d}" for d in scen.drivers for t in range(T))
    np.savetxt(root / "scenarios.csv", scen.samples, delimiter=",",
               header=header, comments="")

    fleet = [{
        "kind": "bess", "name": "b2", "bus": 2,
        "p_min_kw": -1000.0, "p_max_kw": 1000.0,
        "q_min_kvar": -200.0, "q_max_kvar": 200.0,
        "soe_min_kwh": 0.0, "soe_max_kwh": soe_max,
        "soe_0_kwh": soe_max / 2 if soe_0 is None else soe_0,
        "c_inv": 60000.0, "n_cycles": 6000.0,
    }]
    (root / "fleet.json").write_text(json.dumps(fleet))

    price_lines = ["# dt_hours=1.0", "t,service,price"]
    for t in range(T):
        price_lines.append(f"{t},afrr_up,10.0")
        price_lines.append(f"{t},fcr,{12.0 * fcr_scale}")
    (root / "prices.csv").write_text("\n".join(price_lines) + "\n")

    svc_docs = []
    if "afrr_up" in services:
        svc_docs.append({"name": "afrr_up", "kind": "up"})
    if "fcr" in services:
        svc_docs.append({"name": "fcr", "kind": "symmetric",
                         "energy_coupling": 0.25, "throughput_factor": 0.5})
    doc = {
        "name": name,
        "network": "net",
        "fleet": "fleet.json",
        "scenarios": "scenarios.csv",
        "prices": "prices.csv",
        "horizon": T,
        "dt_hours": 1.0,
        "in_sample": 180,
        "services": svc_docs,
        "baseload": ({"mode": "uncontrolled"} if baseload_mode == "uncontrolled"
                     else {"mode": "controlled",
                           "energy_prices": [5.0] * T}),
        "prosumption": ([{"bus": 2, "kind": "load", "driver": "load",
                          "rating_kw": 200.0, "power_factor": 0.95}]
                        if with_prosumption else []),
        "seed": 42,
        "out": "out",
    }
    if uncertainty:
        doc["uncertainty"] = {"kind": "hyperbox", "eps": 0.1}
    cfg = root / "config.json"
    cfg.write_text(json.dumps(doc, indent=1))
    return cfg


class TestUncset:
    def test_minmax_box_written(self, tmp_path, capsys):
        cfg = write_toy_workspace(tmp_path)
        rc = main(["uncset", "--config", str(cfg), "--kind", "hyperbox",
                   "--eps", "0"])
        assert rc == 0
        doc = json.loads((tmp_path / "out" / "uncertainty_set.json").read_text())
        assert doc["kind"] == "hyperbox"
        assert doc["achieved_coverage"] == 1.0

    def test_coverage_reports_achieved(self, tmp_path, capsys):
        cfg = write_toy_workspace(tmp_path)
        rc = main(["uncset", "--config", str(cfg), "--kind", "coverage",
                   "--eps", "0.1"])
        assert rc == 0
        out = capsys.readouterr().out
        doc = json.loads((tmp_path / "out" / "uncertainty_set.json").read_text())
        assert doc["achieved_coverage"] >= 0.9
        assert "achieved_coverage" in out

    def test_missing_csv_exit_code_two(self, tmp_path, capsys):
        cfg = write_toy_workspace(tmp_path)
        (tmp_path / "scenarios.csv").unlink()
        rc = main(["uncset", "--config", str(cfg), "--kind", "hyperbox"])
        assert rc == 2
        assert "scenarios.csv" in capsys.readouterr().err


class TestAggregate:
    def test_toy_analytic_capacity(self, tmp_path, capsys):
        # near-lossless 2-bus line: the offered capacity splits the energy
        # budget as B/sqrt(2) per step
        cfg = write_toy_workspace(tmp_path, with_prosumption=False,
                                  uncertainty=False, soe_0=200.0)
        rc = main(["aggregate", "--config", str(cfg)])
        assert rc == 0
        doc = json.loads((tmp_path / "out" / "result.json").read_text())
        E = np.array(doc["services"]["afrr_up"]["E_kw"])
        assert E == pytest.approx(np.full(2, 200 / np.sqrt(2)), rel=1e-2)
        assert doc["status"] == "optimal"
        assert doc["fingerprint"]
        out = capsys.readouterr().out
        assert "cones=" in out and "expected=" in out

    def test_empty_services_uncontrolled(self, tmp_path):
        cfg = write_toy_workspace(tmp_path, services=())
        rc = main(["aggregate", "--config", str(cfg)])
        assert rc == 0
        doc = json.loads((tmp_path / "out" / "result.json").read_text())
        assert doc["objective"] == 0.0

    def test_reproducible_output(self, tmp_path):
        cfg = write_toy_workspace(tmp_path)
        assert main(["aggregate", "--config", str(cfg), "--seed", "7"]) == 0
        first = (tmp_path / "out" / "result.json").read_text()
        assert main(["aggregate", "--config", str(cfg), "--seed", "7"]) == 0
        second = (tmp_path / "out" / "result.json").read_text()
        d1, d2 = json.loads(first), json.loads(second)
        d1.pop("created"), d2.pop("created")
        assert json.dumps(d1, sort_keys=True) == json.dumps(d2, sort_keys=True)

    def test_infeasible_exit_code_three(self, tmp_path):
        cfg = write_toy_workspace(tmp_path)
        doc = json.loads(cfg.read_text())
        doc["baseload"] = {"mode": "self_dispatch", "E0": [1e7, 1e7]}
        cfg.write_text(json.dumps(doc))
        assert main(["aggregate", "--config", str(cfg)]) == 3

    def test_grid_unaware_flag(self, tmp_path):
        cfg = write_toy_workspace(tmp_path)
        assert main(["aggregate", "--config", str(cfg)]) == 0
        with_grid = json.loads((tmp_path / "out" / "result.json").read_text())
        assert main(["aggregate", "--config", str(cfg), "--no-network"]) == 0
        without = json.loads((tmp_path / "out" / "result.json").read_text())
        slack = 1e-6 * max(1.0, abs(with_grid["objective"]))
        assert without["objective"] >= with_grid["objective"] - slack


class TestValidateCommand:
    def test_toy_validation_passes(self, tmp_path, capsys):
        cfg = write_toy_workspace(tmp_path, baseload_mode="controlled")
        rc = main(["validate", "--config", str(cfg), "--strategy", "max_flex"])
        assert rc == 0
        doc = json.loads((tmp_path / "out" / "validation.json").read_text())
        assert doc["scenarios"] == 40
        assert (tmp_path / "out" / "validation.csv").exists()


class TestMultifeederCommand:
    def test_two_feeder_bundle(self, tmp_path, capsys):
        f1 = write_toy_workspace(tmp_path / "f1", name="f1", seed=3,
                                 baseload_mode="controlled",
                                 services=("afrr_up", "fcr"))
        f2 = write_toy_workspace(tmp_path / "f2", name="f2", seed=4,
                                 baseload_mode="controlled",
                                 services=("afrr_up", "fcr"))
        bundle = tmp_path / "bundle.json"
        bundle.write_text(json.dumps({
            "feeders": [str(f1), str(f2)],
            "delta": 0.01,
            "p_max_transfo_kw": 3000.0,
            "p_min_transfo_kw": -3000.0,
            "out": "out",
        }))
        rc = main(["multifeeder", "--config", str(bundle), "--jobs", "2"])
        assert rc == 0
        doc = json.loads((tmp_path / "out" / "combined.json").read_text())
        assert len(doc["feeders"]) == 2
        assert "afrr_up" in doc["E_kw"]

    def test_doubled_fcr_price_brings_fcr_into_the_mix(self, tmp_path):
        f1 = write_toy_workspace(tmp_path / "f1", name="f1", seed=5,
                                 baseload_mode="controlled", fcr_scale=2.0,
                                 services=("afrr_up", "fcr"), soe_max=2000.0)
        f2 = write_toy_workspace(tmp_path / "f2", name="f2", seed=6,
                                 baseload_mode="controlled", fcr_scale=2.0,
                                 services=("afrr_up", "fcr"), soe_max=2000.0)
        bundle = tmp_path / "bundle.json"
        bundle.write_text(json.dumps({
            "feeders": [str(f1), str(f2)], "delta": 0.0, "out": "out"}))
        assert main(["multifeeder", "--config", str(bundle)]) == 0
        doc = json.loads((tmp_path / "out" / "combined.json").read_text())
        assert sum(doc["E_kw"]["fcr"]) > 1.0


class TestCompareCommand:
    def test_four_row_table(self, tmp_path, capsys):
        cfg = write_toy_workspace(tmp_path, baseload_mode="controlled")
        rc = main(["compare", "--config", str(cfg), "--eps", "0.1"])
        assert rc == 0
        lines = (tmp_path / "out" / "comparison.csv").read_text().strip().splitlines()
        assert len(lines) == 5  # header + 4 uncertainty-set kinds
        out = capsys.readouterr().out
        assert "hyperbox" in out and "gaussian" in out
