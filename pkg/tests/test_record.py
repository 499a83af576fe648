import math

import numpy as np
import pytest

from afldp import DatasetSpec, RunConfig, run
from afldp.record import COLUMNS, RunRecord


@pytest.fixture(scope="module")
def record():
    cfg = RunConfig(algorithm="mapa", model="logistic", T=120, eval_stride=40, loss_stride=3,
                    sigma="auto", dataset=DatasetSpec(kind="gaussians", dim=4, n_train=100, n_test=40))
    return run(cfg)


def test_csv_round_trip(record, tmp_path):
    path = tmp_path / "run.csv"
    record.to_csv(path)
    back = RunRecord.from_csv(path)
    assert back == record
    for c in COLUMNS:
        a, b = record.column(c), back.column(c)
        assert np.array_equal(a, b, equal_nan=a.dtype.kind == "f")
    assert np.array_equal(back.final_x, record.final_x)


def test_csv_layout(record):
    text = record.to_csv()
    lines = text.splitlines()
    assert lines[0].startswith("# {")
    assert lines[1] == ",".join(COLUMNS)
    assert len(lines) == 2 + len(record)
    # loss is sampled every 3rd update, accuracy every 40th; gaps are empty cells
    row2 = lines[3].split(",")
    assert row2[COLUMNS.index("loss")] == "" and row2[COLUMNS.index("accuracy")] == ""
    row1 = lines[2].split(",")
    assert float(row1[COLUMNS.index("accuracy")]) >= 0


def test_from_csv_text(record):
    assert RunRecord.from_csv(record.to_csv()) == record


def test_from_csv_rejects(record):
    with pytest.raises(ValueError):
        RunRecord.from_csv("t,stage\n1,0\n")
    text = record.to_csv().split("\n", 2)
    with pytest.raises(ValueError):
        RunRecord.from_csv(text[0] + "\nt,gamma\n" + text[2])


def test_fingerprint_ignores_volatile_metadata(record):
    other = RunRecord(**{k: getattr(record, k) for k in record.__dataclass_fields__})
    other.metadata = dict(record.metadata, wall_time_s=123.0, mode="net")
    assert other == record
    other.metadata = dict(record.metadata, results={})
    assert other != record


def test_write_json(record, tmp_path):
    import json
    p = tmp_path / "meta.json"
    record.write_json(p)
    meta = json.loads(p.read_text())
    assert meta["config"]["T"] == 120 and meta["config_hash"] == record.metadata["config_hash"]
    assert not math.isnan(meta["results"]["final_loss"])
