"""End-to-end command tests: synth, train, eval, dump-embeddings."""

import hashlib
import json
import os

import numpy as np
import pytest

import textgraph.cli as cli
import textgraph.pipeline as pl
from textgraph.graph import SyntheticSpec, generate_synthetic, load_graph, save_graph


def _dir_hashes(path):
    out = {}
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as f:
            out[name] = hashlib.sha256(f.read()).hexdigest()
    return out


def _write_config(path, graph_dir, **over):
    lines = {
        "graph_dir": graph_dir,
        "task": "link",
        "stages": "WarmStartGNN",
        "epochs": "1",
        "batch_size": "8",
        "fanouts": "3",
        "num_layers": "2",
        "hidden_dim": "128",
        "learning_rate": "1e-3",
        "negatives_k": "2",
        "negative_mode": "joint",
        "budget_train_nodes": "8",
        "budget_infer_batch": "16",
        "cache_capacity": "256",
        "cache_staleness": "5",
        "target_mode": "global",
        "seed": "0",
    }
    lines.update(over)
    with open(path, "w", encoding="utf-8") as f:
        f.write("# run options\n")
        for k, v in lines.items():
            if v is not None:
                f.write(f"{k} = {v}\n")
    return str(path)


@pytest.fixture(scope="module")
def graph_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthgraph")
    rc = cli.main(["synth", "--out", str(out), "--seed", "3",
                   "--nodes-per-type", "30", "--clusters", "2",
                   "--intra-p", "0.2", "--inter-p", "0.02",
                   "--vocab-size", "30", "--tokens-per-node", "4"])
    assert rc == 0
    return str(out)


# ------------------------------------------------------------------- synth


def test_synth_output_loads(graph_dir):
    graph = load_graph(graph_dir)
    assert graph.total_nodes == 60


def test_synth_same_seed_byte_identical(tmp_path):
    args = ["--seed", "5", "--nodes-per-type", "20", "--clusters", "2",
            "--intra-p", "0.3", "--inter-p", "0.05",
            "--vocab-size", "20", "--tokens-per-node", "3"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["synth", "--out", str(a)] + args) == 0
    assert cli.main(["synth", "--out", str(b)] + args) == 0
    assert _dir_hashes(a) == _dir_hashes(b)


def test_synth_rejects_single_cluster(tmp_path, capsys):
    rc = cli.main(["synth", "--out", str(tmp_path / "one"), "--clusters", "1"])
    assert rc == 2
    assert "cluster" in capsys.readouterr().err.lower()


def test_synth_refuses_nonempty_dir_without_force(tmp_path):
    out = tmp_path / "busy"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    args = ["synth", "--out", str(out), "--nodes-per-type", "20",
            "--clusters", "2", "--intra-p", "0.3", "--inter-p", "0.05",
            "--vocab-size", "20", "--tokens-per-node", "3"]
    assert cli.main(args) == 2
    assert cli.main(args + ["--force"]) == 0


# ------------------------------------------------------------------- config


def test_config_rejects_unknown_key(tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.txt", "unused", dropout="0.5")
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "dropout" in capsys.readouterr().err


def test_config_enumerated_ranges(tmp_path):
    for bad in ({"hidden_dim": "100"}, {"learning_rate": "0.5"},
                {"num_layers": "4"}, {"negative_mode": "both"},
                {"task": "ranking"}, {"stages": "WarmStartGNN,Nope"},
                {"epochs": "0"}, {"batch_size": "-3"}):
        cfg = _write_config(tmp_path / "c.txt", "unused", **bad)
        rc = cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 2, bad


def test_config_stage_epoch_length_mismatch(tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.txt", "unused",
                        stages="WarmStartGNN,EndToEnd", epochs="1")
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "epochs" in capsys.readouterr().err


def test_config_missing_graph_dir(tmp_path, capsys):
    cfg = _write_config(tmp_path / "c.txt", None)
    assert cli.main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "graph_dir" in capsys.readouterr().err


# -------------------------------------------------------------------- train


@pytest.fixture(scope="module")
def trained(tmp_path_factory, graph_dir):
    base = tmp_path_factory.mktemp("trainrun")
    cfg = _write_config(base / "run.txt", graph_dir,
                        stages="PreFineTuneLM,WarmStartGNN", epochs="1,1")
    out = base / "out"
    rc = cli.main(["train", "--config", cfg, "--out", str(out)])
    assert rc == 0
    return {"cfg": cfg, "out": str(out), "graph_dir": graph_dir}


def test_train_writes_stage_checkpoints_and_report(trained):
    names = sorted(os.listdir(trained["out"]))
    assert "stage0_PreFineTuneLM.json" in names
    assert "stage1_WarmStartGNN.json" in names
    assert "stage1_WarmStartGNN.bin" in names
    assert "metrics.jsonl" in names and "report.json" in names
    with open(os.path.join(trained["out"], "report.json")) as f:
        report = json.load(f)
    assert report["split"] == "test" and "mrr" in report["metrics"]


def test_train_reproducible_excluding_elapsed(tmp_path, trained):
    out2 = tmp_path / "out2"
    rc = cli.main(["train", "--config", trained["cfg"], "--out", str(out2)])
    assert rc == 0
    with open(os.path.join(trained["out"], "report.json"), "rb") as f:
        first = f.read()
    assert first == (out2 / "report.json").read_bytes()

    def stripped(path):
        rows = []
        with open(path) as f:
            for line in f:
                r = json.loads(line)
                r.pop("elapsed_ms", None)
                rows.append(json.dumps(r, sort_keys=True))
        return rows

    assert stripped(os.path.join(trained["out"], "metrics.jsonl")) == \
        stripped(str(out2 / "metrics.jsonl"))


# --------------------------------------------------------------------- eval


def test_eval_matches_train_report(trained, capsys):
    ckpt = os.path.join(trained["out"], "stage1_WarmStartGNN")
    rc = cli.main(["eval", ckpt, trained["graph_dir"], "--task", "link",
                   "--split", "test"])
    assert rc == 0
    printed = json.loads(capsys.readouterr().out)
    with open(os.path.join(trained["out"], "report.json")) as f:
        report = json.load(f)
    assert printed["metrics"] == report["metrics"]


def test_eval_twice_identical_bytes(trained, capsys):
    ckpt = os.path.join(trained["out"], "stage1_WarmStartGNN")
    argv = ["eval", ckpt, trained["graph_dir"], "--task", "link"]
    assert cli.main(argv) == 0
    first = capsys.readouterr().out
    assert cli.main(argv) == 0
    assert capsys.readouterr().out == first


def test_eval_rejects_missing_head(tmp_path, capsys):
    graph = generate_synthetic(SyntheticSpec(
        nodes_per_type=20, clusters=2, intra_p=0.3, inter_p=0.05,
        vocab_size=20, tokens_per_node=3, seed=8))
    gdir = tmp_path / "nolabel"
    save_graph(graph, gdir)
    os.remove(gdir / "node_labels.tsv")
    os.remove(gdir / "edge_labels.tsv")
    bare = load_graph(str(gdir))
    settings = pl.TrainSettings()
    models = pl.build_models(bare, settings)
    assert models.node_head is None
    stem = str(tmp_path / "bare_ckpt")
    pl.save_bundle(stem, models, bare, settings)
    rc = cli.main(["eval", stem, str(gdir), "--task", "node"])
    assert rc == 2
    assert "head" in capsys.readouterr().err


def test_eval_rejects_mismatched_graph(tmp_path, trained):
    other = tmp_path / "othergraph"
    assert cli.main(["synth", "--out", str(other), "--seed", "9",
                     "--nodes-per-type", "25", "--clusters", "2",
                     "--intra-p", "0.3", "--inter-p", "0.05",
                     "--vocab-size", "25", "--tokens-per-node", "3"]) == 0
    ckpt = os.path.join(trained["out"], "stage1_WarmStartGNN")
    assert cli.main(["eval", ckpt, str(other), "--task", "link"]) == 2


# ---------------------------------------------------------- dump-embeddings


def test_dump_embeddings_shape_and_recomputation(tmp_path, trained):
    ckpt = os.path.join(trained["out"], "stage1_WarmStartGNN")
    out = tmp_path / "emb.tsv"
    rc = cli.main(["dump-embeddings", ckpt, trained["graph_dir"],
                   "--out", str(out)])
    assert rc == 0
    graph = load_graph(trained["graph_dir"])
    models = pl.load_bundle(ckpt, graph)
    settings = pl.TrainSettings(num_layers=len(models.gnn.layers))
    expected = pl.full_graph_embeddings(
        models, graph, settings=settings, cache=pl.EmbeddingCache(0, 0),
        step=0, budget=pl.NodeBudget(1, pl.EVAL_CHUNK))
    rows = [line.rstrip("\n").split("\t") for line in open(out)]
    assert len(rows) == graph.total_nodes
    assert all(len(r) == 2 + models.dim for r in rows)
    assert rows[0][0] == graph.node_types[0] and rows[0][1] == "0"
    dumped = np.array([[float(v) for v in r[2:]] for r in rows])
    assert np.array_equal(dumped, expected)  # repr round-trips float64


def test_dump_embeddings_deterministic(tmp_path, trained):
    ckpt = os.path.join(trained["out"], "stage1_WarmStartGNN")
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    for path in (a, b):
        assert cli.main(["dump-embeddings", ckpt, trained["graph_dir"],
                         "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
