import json

import numpy as np
import pytest

from lnflow import cli
from lnflow.experiments import REGISTRY, list_experiments


def write_config(path, cfg, raw=None):
    path.write_text(raw if raw is not None else json.dumps(cfg, indent=2))
    return str(path)


def report(directory):
    return json.loads((directory / "report.json").read_text())


@pytest.fixture
def slab_eigen(tmp_path):
    cfg = {"task": "eigen", "geometry": {"kind": "slab", "n": 3, "length": 10.0, "kappa": -2.0},
           "mesh": {"M": 400}, "output": "out"}
    return write_config(tmp_path / "eigen.json", cfg), tmp_path / "out"


def test_eigen_task_reports_negative_eigenvalue(slab_eigen):
    path, out = slab_eigen
    assert cli.main(["run", path]) == cli.EXIT_OK
    rep = report(out)
    assert rep["status"] == "pass"
    assert rep["result"]["lambda1"] == pytest.approx(-1.21, abs=5e-3)
    assert {v["name"] for v in rep["verdicts"]} == {"eigenfunction-positive", "eigen-oracle"}
    assert (out / "phi1.csv").is_file() and (out / "timing.json").is_file()


def test_resolved_config_has_every_default(slab_eigen):
    path, out = slab_eigen
    cli.main(["run", path])
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["mesh"] == {"M": 400, "grading": "graded", "strength": 7.0}
    assert resolved["geometry"]["cross_volume"] == 1.0
    assert resolved["seed"] == 0 and resolved["workers"] == 1


def test_report_is_deterministic_and_round_trips(slab_eigen, tmp_path):
    path, out = slab_eigen
    cli.main(["run", path])
    first = (out / "report.json").read_bytes()
    cli.main(["run", path])
    assert (out / "report.json").read_bytes() == first
    resolved = json.loads((out / "resolved_config.json").read_text())
    resolved["output"] = str(tmp_path / "again")
    again = write_config(tmp_path / "resolved.json", resolved)
    assert cli.main(["run", again]) == cli.EXIT_OK
    assert report(tmp_path / "again")["verdicts"] == json.loads(first)["verdicts"]


def test_unknown_key_reports_position(tmp_path, capsys):
    raw = '{\n  "task": "eigen",\n  "geometry": {"kind": "slab",\n    "kapa": -2.0}\n}\n'
    path = write_config(tmp_path / "bad.json", None, raw)
    assert cli.main(["run", path]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "line 4, column 5" in err and "unknown key 'kapa'" in err


@pytest.mark.parametrize("raw,needle", [
    ('{"task": "eigen",}', "line 1"),
    ('{"task": "dance"}', "task must be one of"),
    ('{"task": "eigen", "geometry": {"kind": "torus"}}', "geometry.kind"),
    ('{"task": "eigen", "geometry": {"kind": "ball"}, "flow": {}}', "only applies to run-flow"),
    ('{"task": "run-flow", "geometry": {"kind": "ball"}, "flow": {"monitors": ["x"]}}',
     "unknown monitors"),
    ('{"task": "verify-all", "experiments": ["nope"]}', "lnflow list"),
    ('{"task": "eigen", "geometry": {"kind": "ball", "n": 2}}', "line 1"),
])
def test_config_errors_exit_two(tmp_path, capsys, raw, needle):
    path = write_config(tmp_path / "bad.json", None, raw)
    assert cli.main(["run", path]) == cli.EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_list_matches_registry(capsys):
    assert cli.main(["list"]) == cli.EXIT_OK
    text = capsys.readouterr().out
    for name in ("ball-ln-exact", "slab-v0-positive", "hamilton-decay"):
        assert name in text
    rows = [ln for ln in text.splitlines()[1:] if ln.strip() and not set(ln) <= set("-= ")]
    assert len(rows) == len(REGISTRY) == 13
    tags = [e.tag for e in REGISTRY.values()]
    assert len(set(tags)) == 13
    for row, exp in zip(rows, REGISTRY.values()):
        assert row.split()[0] == exp.name and exp.tag in row
    assert list_experiments() == text


def test_flow_run_and_plots(tmp_path):
    cfg = {"task": "run-flow", "geometry": {"kind": "ball"}, "mesh": {"M": 200},
           "flow": {"t_end": 2.0}, "output": "flow"}
    path = write_config(tmp_path / "flow.json", cfg)
    assert cli.main(["run", path]) == cli.EXIT_OK
    out = tmp_path / "flow"
    rep = report(out)
    assert {v["name"] for v in rep["verdicts"]} == {"monotone", "global_bounds"}
    assert (out / "trace.csv").is_file() and (out / "eta.csv").is_file()
    assert cli.main(["plots", str(out)]) == cli.EXIT_OK
    eta = np.loadtxt(out / "eta_vs_t.tsv", skiprows=1)
    assert np.all(np.diff(eta[:, 0]) > 0)
    with open(out / "u_vs_x.tsv") as fh:
        header = fh.readline().rstrip("\n").split("\t")
    assert header[0] == "x" and len(header) >= 3


def test_q_energy_plots(tmp_path):
    cfg = {"task": "q-energy", "geometry": {"kind": "slab", "length": 10.0, "kappa": -2.0},
           "mesh": {"M": 400}, "output": "q"}
    assert cli.main(["run", write_config(tmp_path / "q.json", cfg)]) == cli.EXIT_OK
    cli.main(["plots", str(tmp_path / "q")])
    data = np.loadtxt(tmp_path / "q" / "q_vs_eps.tsv", skiprows=1)
    assert data.shape[1] == 2


def test_plots_on_empty_directory(tmp_path, capsys):
    assert cli.main(["plots", str(tmp_path)]) == cli.EXIT_CHECK
    assert "no trace found" in capsys.readouterr().err


def test_failed_check_exits_one(tmp_path):
    # the supersolution start breaks monotonicity, which is reported but not fatal
    cfg = {"task": "run-flow", "geometry": {"kind": "ball"}, "mesh": {"M": 200},
           "initial": {"boundary": 1.0, "scale": 2.0}, "flow": {"t_end": 0.5},
           "output": "bad"}
    assert cli.main(["run", write_config(tmp_path / "f.json", cfg)]) == cli.EXIT_CHECK
    assert report(tmp_path / "bad")["status"] == "fail"


def test_solver_abort_exits_three(tmp_path):
    cfg = {"task": "run-flow", "geometry": {"kind": "ball"}, "mesh": {"M": 200},
           "flow": {"t_end": 1.0, "dt_init": 0.01, "dt_min": 0.01, "step_rtol": 1e-14,
                    "step_atol": 1e-16}, "output": "abort"}
    assert cli.main(["run", write_config(tmp_path / "a.json", cfg)]) == cli.EXIT_ABORT
    assert report(tmp_path / "abort")["status"] == "aborted"


def test_flatten_task(tmp_path):
    cfg = {"task": "flatten", "geometry": {"kind": "ball", "warp": "spherical"},
           "mesh": {"M": 400, "grading": "uniform"}, "flatten": {"augment": True}, "output": "fl"}
    assert cli.main(["run", write_config(tmp_path / "fl.json", cfg)]) == cli.EXIT_OK
    assert report(tmp_path / "fl")["result"]["augmented_R_min"] >= -1e-8


def test_verify_all_subset_with_env_workers(tmp_path, monkeypatch):
    monkeypatch.setenv("LNFLOW_WORKERS", "2")
    names = ["slab-eigen-oracle", "q-dichotomy"]
    cfg = {"task": "verify-all", "experiments": names, "output": "va"}
    assert cli.main(["run", write_config(tmp_path / "va.json", cfg)]) == cli.EXIT_OK
    rep = report(tmp_path / "va")
    assert [v["name"] for v in rep["verdicts"]] == names
    for name in names:
        verdict = json.loads((tmp_path / "va" / name / "verdict.json").read_text())
        assert verdict["status"] == "pass" and verdict["tag"] == REGISTRY[name].tag
    assert cli.worker_count({"workers": 1}) == 2
    monkeypatch.setenv("LNFLOW_WORKERS", "zero")
    with pytest.raises(cli.ConfigError):
        cli.worker_count({"workers": 1})
