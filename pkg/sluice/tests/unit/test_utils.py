import numpy as np
import pytest

from sluice.utils import (
    canonical_json,
    derive_seed,
    hash_file,
    hash_str,
    map_episodes,
    read_jsonl,
    rng_stream,
    run_and_log_functions,
    write_jsonl,
)


def _square(x):
    return x * x


def test_fun_logger(capsys):

    d = {}

    def fing():
        d["k"] = 10
        return "done"

    run_and_log_functions([fing], stage="demos")

    captured = capsys.readouterr()

    assert "fing" in captured.out
    assert "done" in captured.out
    assert "demos" in captured.out
    assert d["k"] == 10


def test_rng_streams_are_independent_and_repeatable():
    a = rng_stream(1, "spawn", 3).random(4)
    np.testing.assert_array_equal(a, rng_stream(1, "spawn", 3).random(4))
    assert not np.array_equal(a, rng_stream(1, "spawn", 4).random(4))
    assert not np.array_equal(a, rng_stream(1, "noise", 3).random(4))
    assert derive_seed(0, "demo", 1) == derive_seed(0, "demo", 1)
    assert derive_seed(0, "demo", 1) != derive_seed(0, "demo", 2)


@pytest.mark.parametrize("workers", [1, 2, 4])
def test_map_episodes_keeps_order(workers):
    assert map_episodes(_square, range(10), workers) == [i * i for i in range(10)]


def test_jsonl_and_hashes(tmp_path):
    records = [{"b": 1, "a": [1.5, 2]}, {"c": None}]
    path = write_jsonl(tmp_path / "x.jsonl", records)
    assert path.read_text().splitlines()[0] == '{"a":[1.5,2],"b":1}'
    assert read_jsonl(path) == records
    assert hash_file(path) == hash_file(write_jsonl(tmp_path / "y.jsonl", records))
    assert canonical_json({"b": 1, "a": 2}) == canonical_json({"a": 2, "b": 1})
    assert len(hash_str("x")) == 20
