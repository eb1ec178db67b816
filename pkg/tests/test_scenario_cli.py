import json
import math

import pytest

from drmpc import cli, scenario
from drmpc.scenario import ScenarioError

BASE = """
name: tiny
seed: 2
sim: {max_time: 0.3}
track: {straight: 4.0, radius: 3.0, v_ref: 5.0}
mpc: {K: 3, M: 5, P: [[10000.0, 0.0], [0.0, 10000.0]]}
risk: {alpha: 0.95, delta: 0.01, theta: 5.0e-5, N: 10}
obstacles:
  - name: box
    half_length: 0.8
    waypoints: [[0.0, 8.0, 8.0, 0.0], [5.0, 9.0, 8.0, 0.0]]
"""


class TestScenario:
    def test_round_trip(self, tmp_path):
        sc = scenario.loads_scenario(BASE)
        path = tmp_path / "a.scenario"
        scenario.write_scenario(sc, path)
        again = scenario.load_scenario(path)
        assert again == sc
        assert again.digest() == sc.digest()

    def test_defaults_fill_in(self):
        sc = scenario.loads_scenario(BASE)
        assert sc.T_s == 0.01 and sc.mpc["T_o"] == 0.01
        assert sc.obstacles[0].geometry.half_width == 0.5
        assert sc.vehicle.steer_bounds == pytest.approx((-math.pi / 6, math.pi / 6))

    def test_missing_alpha_names_the_field(self):
        with pytest.raises(ScenarioError, match=r"risk\.alpha"):
            scenario.loads_scenario(BASE.replace("alpha: 0.95, ", ""))

    def test_unknown_key_warns(self):
        with pytest.warns(UserWarning, match="colour"):
            sc = scenario.loads_scenario(BASE + "colour: red\n")
        assert sc.name == "tiny"

    @pytest.mark.parametrize("bad", ["alpha: 0.95", "alpha: 1.5", "alpha: zero"])
    def test_invalid_values(self, bad):
        text = BASE.replace("alpha: 0.95", bad.replace("0.95", "-0.1") if bad == "alpha: 0.95" else bad)
        with pytest.raises(ScenarioError):
            scenario.loads_scenario(text)

    def test_bad_waypoints(self):
        with pytest.raises(ScenarioError, match="obstacles"):
            scenario.loads_scenario(BASE.replace("[5.0, 9.0, 8.0, 0.0]", "[5.0, 9.0]"))

    def test_empty_and_unparsable(self):
        with pytest.raises(ScenarioError):
            scenario.loads_scenario("")
        with pytest.raises(ScenarioError):
            scenario.loads_scenario("a: [1, 2")

    def test_overrides(self):
        sc = scenario.loads_scenario(BASE)
        o = sc.with_overrides(controller_kind="saa", seed=9, theta=1e-4, strict=True)
        assert o.mpc["controller"] == "saa" and o.seed == 9 and o.risk.theta == 1e-4
        assert o.mpc["fallback"] == "strict"
        assert sc.risk.theta == 5e-5  # original untouched
        assert o.digest() != sc.digest()

    @pytest.mark.parametrize("name", ["regression", "heading_change", "paper_like"])
    def test_bundled_scenarios_load(self, name):
        sc = scenario.load_scenario(name)
        assert sc.mpc_config().K == 5 and sc.risk.N == 50


@pytest.fixture
def scen_file(tmp_path):
    p = tmp_path / "tiny.scenario"
    p.write_text(BASE)
    return p


class TestCli:
    def test_run_writes_outputs(self, scen_file, tmp_path, capsys):
        out = tmp_path / "out"
        code = cli.main(["run", str(scen_file), "--out", str(out)])
        assert code == cli.EXIT_INCOMPLETE  # 0.3 s is too short for a lap
        summary = json.loads((out / "summary.json").read_text())
        assert summary["status"] == "timeout" and summary["stages"] == 30
        assert (out / "trace.csv").exists() and (out / "timing.csv").exists()
        assert scenario.load_scenario(out / "scenario.resolved.scenario").name == "tiny"
        assert json.loads(capsys.readouterr().out)["scenario_hash"] == summary["scenario_hash"]

    def test_missing_file_is_io_error(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "nope.scenario")]) == cli.EXIT_IO

    def test_invalid_scenario_code(self, tmp_path):
        p = tmp_path / "bad.scenario"
        p.write_text(BASE.replace("alpha: 0.95, ", ""))
        assert cli.main(["run", str(p)]) == cli.EXIT_SCENARIO

    def test_usage_errors(self, scen_file):
        assert cli.main([]) == cli.EXIT_USAGE
        assert cli.main(["run", str(scen_file), "--theta", "abc"]) == cli.EXIT_USAGE
        assert cli.main(["sweep", str(scen_file), "--thetas", ""]) == cli.EXIT_USAGE
        assert cli.main(["sweep", str(scen_file), "--thetas", "1e-5", "--jobs", "0"]) == cli.EXIT_USAGE

    def test_unwritable_output(self, scen_file, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert cli.main(["run", str(scen_file), "--out", str(blocker / "sub")]) == cli.EXIT_IO

    def test_sweep_table(self, scen_file, tmp_path, capsys):
        out = tmp_path / "sw"
        code = cli.main(["sweep", str(scen_file), "--thetas", "1e-5,5e-5", "--seeds", "1,2", "--out", str(out)])
        assert code == cli.EXIT_OK
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0].split(",") == list(cli.SWEEP_COLUMNS)
        assert len(lines) == 5
        rows = [dict(zip(cli.SWEEP_COLUMNS, ln.split(","))) for ln in lines[1:]]
        assert [(float(r["theta"]), int(r["seed"])) for r in rows] == [(1e-5, 1), (1e-5, 2), (5e-5, 1), (5e-5, 2)]
        assert len({r["scenario_hash"] for r in rows}) == 1
        assert capsys.readouterr().out.splitlines()[0] == lines[0]

    def test_sweep_seeds_share_hash(self, scen_file):
        rows = cli.sweep(scenario.load_scenario(scen_file), [5e-5], [1, 2, 3])
        assert len(rows) == 3
        assert len({r["scenario_hash"] for r in rows}) == 1
        assert [r["seed"] for r in rows] == [1, 2, 3]
