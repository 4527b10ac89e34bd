import json

import numpy as np
import pytest

from textgraph import checkpoint as ck
from textgraph.errors import LoadError


def test_round_trip(tmp_path, rng):
    arrays = {
        "enc/w": rng.normal(size=(4, 3)),
        "gnn/layer0": rng.normal(size=(2, 2, 2)),
        "dm/rel": rng.normal(size=5),
    }
    meta = {"dims": {"hidden": 7}, "task": "link"}
    path = ck.save_checkpoint(tmp_path / "model", arrays, meta)
    assert path.name == "model.json"
    loaded, meta2 = ck.load_checkpoint(tmp_path / "model")
    assert meta2 == meta
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].dtype == np.float64
        np.testing.assert_array_equal(loaded[k], arrays[k])


def test_accepts_bin_or_json_suffix(tmp_path):
    ck.save_checkpoint(tmp_path / "m.bin", {"a": np.ones(2)}, {})
    for name in ("m", "m.bin", "m.json"):
        arrays, _ = ck.load_checkpoint(tmp_path / name)
        np.testing.assert_array_equal(arrays["a"], [1.0, 1.0])


def test_missing_and_truncated(tmp_path):
    with pytest.raises(LoadError, match="not found"):
        ck.load_checkpoint(tmp_path / "nope")
    ck.save_checkpoint(tmp_path / "m", {"a": np.ones(8)}, {})
    blob = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "m.bin").write_bytes(blob[:-8])
    with pytest.raises(LoadError, match="truncated|size"):
        ck.load_checkpoint(tmp_path / "m")


def test_bad_manifest(tmp_path):
    ck.save_checkpoint(tmp_path / "m", {"a": np.ones(2)}, {})
    (tmp_path / "m.json").write_text("nonsense")
    with pytest.raises(LoadError, match="bad JSON"):
        ck.load_checkpoint(tmp_path / "m")
    manifest = {"format": "other", "meta": {}, "arrays": []}
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    with pytest.raises(LoadError, match="unknown format"):
        ck.load_checkpoint(tmp_path / "m")
