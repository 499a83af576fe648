import json
import os
import socket
import subprocess
import sys

import numpy as np
import pytest

from afldp import cli
from afldp.data import write_idx
from afldp.record import RunRecord

QUAD = ["--dataset", "quadratic", "--dim", "4", "--x0-norm", "2", "--iters", "60",
        "--edges", "2", "--eval-stride", "0"]


def _free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def test_run_writes_csv_and_json(tmp_path, capsys):
    out = tmp_path / "r" / "run.csv"
    assert cli.main(["run", "--algo", "audp", "--epsilon", "0.5", *QUAD, "--out", str(out)]) == 0
    rec = RunRecord.from_csv(out)
    assert len(rec) == 60 and rec.metadata["config"]["model"] == "quadratic"
    meta = json.loads(out.with_suffix(".json").read_text())
    summary = json.loads(capsys.readouterr().out)
    assert summary["config_hash"] == meta["config_hash"] == rec.metadata["config_hash"]
    assert summary["ledger_total"] == pytest.approx(30.0)


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"algorithm": "asgd", "T": 10, "model": "quadratic",
                               "dataset": {"kind": "quadratic", "dim": 3}}))
    args = cli.build_parser().parse_args(["run", "--config", str(cfg), "--iters", "25",
                                          "--sigma", "auto", "--gamma", "0.1"])
    c = cli.config_from_args(args)
    assert (c.algorithm, c.T, c.sigma, c.gamma, c.dataset.dim) == ("asgd", 25, "auto", 0.1, 3)


def test_model_and_dataset_coupling():
    parse = lambda *a: cli.config_from_args(cli.build_parser().parse_args(["run", *a]))
    assert parse("--model", "quadratic").dataset.kind == "quadratic"
    assert parse("--dataset", "gaussians").model == "logistic"
    assert parse("--dataset", "quadratic").model == "quadratic"


def test_trace_file(tmp_path):
    trace = tmp_path / "trace.txt"
    trace.write_text("0 1 1 0 1 0 0 1\n")
    args = cli.build_parser().parse_args(["run", *QUAD, "--iters", "8", "--trace", str(trace)])
    cfg = cli.config_from_args(args)
    assert cfg.delay == "trace" and cfg.trace == (0, 1, 1, 0, 1, 0, 0, 1)


def test_error_exit(capsys):
    assert cli.main(["run", "--algo", "mapa", "--theta", "2", *QUAD]) == 1
    assert "afldp: error:" in capsys.readouterr().err


def test_plan(tmp_path, capsys):
    code = cli.main(["plan", "--algos", "audp", "--values", "0.2,0.5", "--seeds", "0,1",
                     "--threshold", "1.0", *QUAD, "--out", str(tmp_path)])
    assert code == 0
    agg = json.loads(capsys.readouterr().out)
    assert [a["value"] for a in agg] == [0.2, 0.5] and all(a["runs"] == 2 for a in agg)
    assert (tmp_path / "rows.csv").exists()


def test_invert(tmp_path, capsys):
    out = tmp_path / "inv.json"
    code = cli.main(["invert", "--dataset", "gaussians", "--dim", "16", "--budgets", "1e12,0.01",
                     "--trials", "30", "--out", str(out)])
    assert code == 0
    table = json.loads(capsys.readouterr().out)["median_cosine"]
    assert table["1000000000000.0"] > 0.999 > table["0.01"]
    assert len(json.loads(out.read_text())["by_epsilon"]["0.01"]["cosines"]) == 30


def test_idx_info(tmp_path, capsys):
    p = tmp_path / "a-labels-idx1-ubyte"
    write_idx(p, np.array([1, 1, 3], dtype=np.uint8))
    assert cli.main(["idx-info", str(p)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["shape"] == [3] and info["label_counts"] == [0, 2, 0, 1]


def test_serve_and_edges_as_processes(tmp_path):
    port = _free_port()
    common = ["--algo", "audp", "--epsilon", "0.5", *QUAD]
    env = dict(os.environ)
    out = tmp_path / "net.csv"
    cmd = [sys.executable, "-m", "afldp.cli"]
    cloud = subprocess.Popen(cmd + ["serve", "--listen", f"127.0.0.1:{port}", "--out", str(out),
                                    "--register-timeout", "30", *common],
                             env=env, stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    edges = [subprocess.Popen(cmd + ["edge", "--connect", f"127.0.0.1:{port}", "--edge-id", str(k),
                                     "--inject-delay-ms", "0:2", *common], env=env)
             for k in range(2)]
    assert [e.wait(timeout=60) for e in edges] == [0, 0]
    assert cloud.wait(timeout=60) == 0
    rec = RunRecord.from_csv(out)
    assert len(rec) == 60 and rec.metadata["mode"] == "net"


def test_edge_unreachable_exit_code():
    port = _free_port()
    code = cli.main(["edge", "--connect", f"127.0.0.1:{port}", "--edge-id", "0", "--retries", "1",
                     *QUAD])
    assert code == 1


def test_console_script_installed():
    out = subprocess.run([sys.executable, "-m", "afldp.cli", "--help"], capture_output=True,
                         text=True, check=True)
    for sub in ("run", "plan", "serve", "edge", "invert", "idx-info"):
        assert sub in out.stdout
