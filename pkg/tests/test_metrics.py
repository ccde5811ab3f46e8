"""Metrics log behaviour: JSONL shape, laziness, append semantics."""

import json

from modweave.metrics import MetricsWriter


def test_rows_are_parseable_jsonl(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsWriter(path) as mw:
        mw.write({"step": 0, "loss": 1.5})
        mw.write({"b": 2, "a": 1})
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[0]) == {"step": 0, "loss": 1.5}
    assert json.loads(lines[1]) == {"a": 1, "b": 2}


def test_keys_are_sorted_in_output(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsWriter(path) as mw:
        mw.write({"zeta": 1, "alpha": 2, "mid": 3})
    assert path.read_text() == '{"alpha": 2, "mid": 3, "zeta": 1}\n'


def test_unused_writer_leaves_no_file(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsWriter(path):
        pass
    assert not path.exists()


def test_falsy_path_disables_logging(tmp_path):
    for path in (None, ""):
        with MetricsWriter(path) as mw:
            mw.write({"step": 1})  # must not raise or write anywhere


def test_rows_append_across_writers(tmp_path):
    path = tmp_path / "m.jsonl"
    with MetricsWriter(path) as mw:
        mw.write({"run": 1})
    with MetricsWriter(path) as mw:
        mw.write({"run": 2})
    rows = [json.loads(l) for l in path.read_text().splitlines()]
    assert rows == [{"run": 1}, {"run": 2}]


def test_rows_visible_before_close(tmp_path):
    path = tmp_path / "m.jsonl"
    mw = MetricsWriter(path)
    try:
        mw.write({"step": 7})
        assert json.loads(path.read_text()) == {"step": 7}
    finally:
        mw.close()


def test_close_is_idempotent(tmp_path):
    mw = MetricsWriter(tmp_path / "m.jsonl")
    mw.write({"x": 1})
    mw.close()
    mw.close()
