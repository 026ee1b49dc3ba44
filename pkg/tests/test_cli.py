import csv
import io
import json

import pytest
import yaml

from pipeforge import cli
from helpers import config_tree


@pytest.fixture
def config_file(tmp_path, biased_csv):
    def write(**overrides):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump(config_tree(biased_csv, **overrides)))
        return str(path)
    return write


def _run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_run_report_and_resume(tmp_path, config_file, capsys):
    cfg = config_file(max_total_pipelines_num=6, n_estimators=2)
    out_dir = str(tmp_path / "run")
    code, out, _ = _run(["run", "--config", cfg, "--out", out_dir, "--workers", "1"], capsys)
    assert code == 0
    summary = json.loads(out)
    assert summary["status"] == "complete" and summary["completed"] == 6

    code, out, _ = _run(["report", "--run", out_dir], capsys)
    report = json.loads(out)
    assert code == 0 and report["completed"] == 6 and report["best"]["weighted_error"] <= 1.0

    code, out, _ = _run(["report", "--run", out_dir, "--pareto"], capsys)
    front = json.loads(out)["pareto_front"]
    assert code == 0 and 1 <= len(front) <= 6

    code, out, _ = _run(["report", "--run", out_dir, "--progress"], capsys)
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [int(r["completed"]) for r in rows] == list(range(1, 7))
    errors = [float(r["global_best_error"]) for r in rows]
    assert errors == sorted(errors, reverse=True)

    code, out, _ = _run(["resume", "--out", out_dir, "--workers", "1"], capsys)
    assert code == 0 and json.loads(out)["completed"] == 6


def test_invalid_config_exits_2(tmp_path, config_file, capsys):
    code, _, err = _run(["run", "--config", config_file(exploration_factor=1.5), "--out", str(tmp_path / "x")],
                        capsys)
    assert code == 2 and "exploration_factor" in err
    bad = tmp_path / "bad.yaml"
    bad.write_text("pipeline_args: [unclosed\n")
    assert _run(["run", "--config", str(bad)], capsys)[0] == 2
    code, _, _ = _run(["run", "--config", config_file(), "--seed", "-1", "--out", str(tmp_path / "y")], capsys)
    assert code == 2


def test_store_failure_exits_4(tmp_path, capsys):
    code, _, err = _run(["report", "--run", str(tmp_path / "missing")], capsys)
    assert code == 4 and "store error" in err
    code, _, _ = _run(["resume", "--out", str(tmp_path / "missing")], capsys)
    assert code == 4


def test_runtime_failure_exits_3(tmp_path, config_file, capsys, monkeypatch):
    import pipeforge.coordinator

    def explode(*args, **kwargs):
        raise RuntimeError("worker pool died")

    monkeypatch.setattr(pipeforge.coordinator, "run_experiment", explode)
    code, _, err = _run(["run", "--config", config_file(), "--out", str(tmp_path / "r")], capsys)
    assert code == 3 and "worker pool died" in err


def test_unknown_flags_are_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--config", "x.yaml", "--frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        cli.main([])


def test_bench_single_worker(tmp_path, config_file, capsys):
    cfg = config_file(n_estimators=2)
    code, out, _ = _run(["bench", "--config", cfg, "--workers-list", "1", "--pipelines", "4",
                         "--out", str(tmp_path / "bench")], capsys)
    assert code == 0
    result = json.loads(out)["results"]
    assert len(result) == 1 and result[0]["workers"] == 1 and result[0]["speedup"] == 1.0
    assert _run(["bench", "--config", cfg, "--workers-list", "0"], capsys)[0] == 2
