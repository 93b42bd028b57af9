"""CLI command surface: networks, outputs, exit codes, determinism."""

import json

import numpy as np
import pytest

from tolldag import cli
from tolldag.errors import NonConvergence, ParseError
from tolldag.network import build_codag, network_from_json, network_to_json


class TestLoadNetwork:
    def test_single_arc_builtin(self):
        net = cli.load_network("single_arc")
        assert len(net.nodes) == 2
        assert len(net.arcs) == 1
        fn = net.latency["a1"]
        assert (fn.theta1, fn.theta0) == (2.0, 1.0)

    def test_paper9_table_parameters(self):
        net = cli.load_network("paper9")
        assert len(net.arcs) == 9
        theta0 = [net.latency[f"a{k}"].theta0 for k in range(1, 10)]
        theta1 = [net.latency[f"a{k}"].theta1 for k in range(1, 10)]
        assert theta0 == [0, 1, 0, 1, 1, 0, 1, 1, 1]
        assert theta1 == [2, 1, 1, 1, 1, 1, 2, 2, 2]
        assert net.demand == 1.0

    def test_unknown_name_raises(self):
        with pytest.raises(ParseError):
            cli.load_network("no_such_network")

    def test_file_round_trip(self, tmp_path):
        doc = network_to_json(cli.load_network("diamond"))
        path = tmp_path / "net.json"
        path.write_text(json.dumps(doc))
        net = cli.load_network(str(path))
        assert network_to_json(net) == doc

    def test_malformed_file_names_missing_field(self, tmp_path):
        doc = network_to_json(cli.load_network("single_arc"))
        del doc["demand"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ParseError) as exc:
            cli.load_network(str(path))
        assert "demand" in str(exc.value)


class TestCommands:
    def test_equilibrium_single_arc(self, tmp_path):
        code = cli.main(
            ["equilibrium", "--network", "single_arc", "-o", str(tmp_path)]
        )
        assert code == 0
        doc = json.loads((tmp_path / "result.json").read_text())
        assert doc["command"] == "equilibrium"
        assert doc["w_orig"]["a1"] == pytest.approx(1.0)
        assert doc["vi_residual"] <= 1e-6

    def test_optimal_toll_single_arc(self, tmp_path):
        code = cli.main(
            ["optimal_toll", "--network", "single_arc", "-o", str(tmp_path)]
        )
        assert code == 0
        doc = json.loads((tmp_path / "result.json").read_text())
        assert doc["p_bar"]["a1"] == pytest.approx(2.0, abs=1e-10)
        assert doc["social_gap"] <= 1e-6

    def test_social_opt_writes_result(self, tmp_path):
        code = cli.main(["social_opt", "--network", "parallel2", "-o", str(tmp_path)])
        assert code == 0
        doc = json.loads((tmp_path / "result.json").read_text())
        assert doc["w_orig"]["a1"] == pytest.approx(0.5, abs=1e-8)

    def test_simulate_outputs_and_determinism(self, tmp_path):
        args = [
            "simulate",
            "--network",
            "paper9",
            "--gamma",
            "0.02",
            "--beta",
            "10",
            "--eta",
            "0,0.1",
            "--horizon",
            "200",
            "--seed",
            "7",
        ]
        out1 = tmp_path / "run1"
        out2 = tmp_path / "run2"
        assert cli.main(args + ["-o", str(out1)]) == 0
        assert cli.main(args + ["-o", str(out2)]) == 0
        assert (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()
        config = json.loads((out1 / "config.json").read_text())
        assert config["seed"] == 7
        assert "reference" in config
        result = json.loads((out1 / "result.json").read_text())
        assert set(result["p_bar"]) == {f"a{k}" for k in range(1, 10)}

    def test_ode_flow_runs(self, tmp_path):
        code = cli.main(
            ["ode_flow", "--network", "parallel2", "--t-end", "10", "--dt", "0.01", "-o", str(tmp_path)]
        )
        assert code == 0
        doc = json.loads((tmp_path / "result.json").read_text())
        assert doc["lyapunov"]["passed"]
        assert doc["terminal_gap"] <= 1e-6

    def test_ode_toll_runs(self, tmp_path):
        code = cli.main(
            ["ode_toll", "--network", "single_arc", "--t-end", "3", "-o", str(tmp_path)]
        )
        assert code == 0
        doc = json.loads((tmp_path / "result.json").read_text())
        assert doc["lyapunov"]["passed"]
        assert doc["p_final"]["a1"] == pytest.approx(2.0 * (1 - np.exp(-3.0)), abs=1e-4)

    def test_verify_passes_on_parallel2(self, tmp_path):
        code = cli.main(
            ["verify", "--network", "parallel2", "--trials", "20", "-o", str(tmp_path)]
        )
        assert code == 0
        doc = json.loads((tmp_path / "result.json").read_text())
        assert doc["passed"]
        assert set(doc["verdicts"]) == {
            "monotonicity",
            "toll_uniqueness",
            "lyapunov_flow",
            "lyapunov_toll",
            "bounds",
        }


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path):
        assert cli.main(["equilibrium", "--network", "missing.json", "-o", str(tmp_path)]) == 2

    def test_bad_toll_length_is_2(self, tmp_path):
        assert (
            cli.main(
                ["equilibrium", "--network", "parallel2", "--toll", "1.0", "-o", str(tmp_path)]
            )
            == 2
        )

    def test_nonconvergence_is_3(self, tmp_path, monkeypatch):
        def explode(*args, **kwargs):
            raise NonConvergence(1, 1.0)

        monkeypatch.setattr(cli.tolling, "solve_optimal_toll", explode)
        assert cli.main(["optimal_toll", "--network", "single_arc", "-o", str(tmp_path)]) == 3

    def test_unknown_command_is_error(self):
        spec = cli.ExperimentSpec(network="single_arc", command="nope")
        assert cli.run(spec) == 2


class TestSchemaRoundTrip:
    def test_all_builtins(self):
        for name in cli.BUILTIN_NETWORKS:
            net = cli.load_network(name)
            doc = network_to_json(net)
            again = network_from_json(doc)
            assert network_to_json(again) == doc
            codag = build_codag(net)
            assert codag.n_arcs >= len(net.arcs)
