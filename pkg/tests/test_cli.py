"""End-to-end checks of the command-line surface.

Everything runs through sggkit.cli.main with argv lists on small corpora so
the whole suite stays fast. Artifact determinism is asserted on file hashes;
metric plumbing is cross-checked against the library functions directly.
"""

import csv
import hashlib
import json
import os

import numpy as np
import pytest

from sggkit.cli import main
from sggkit.data import (
    Edge,
    FeatureParams,
    Node,
    SceneRecord,
    read_predictions,
    read_scenes,
    write_predictions,
    write_scenes,
)
from sggkit.metrics import (
    GroundTruthGraph,
    corpus_pairwise_recall_at_k,
    corpus_recall_at_k,
    mean_recall_at_k,
    rank_triplets,
)
from sggkit.model import Model, load_checkpoint

BASELINE_FUSION = "union"


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _write_config(path, **kv):
    with open(path, "w") as fh:
        fh.write("# test config\n")
        for key, value in kv.items():
            fh.write(f"{key} = {value}\n")
    return str(path)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """A small learnable corpus shared by the slow CLI tests."""
    root = tmp_path_factory.mktemp("cli_corpus")
    path = str(root / "toy.sgjsonl")
    cfg = _write_config(root / "gen.cfg", n_scenes=120, logit_scale=4.0,
                        appearance_sigma=0.5, logit_flip_rate=0.05)
    assert main(["generate", "--out", path, "--config", cfg]) == 0
    return path


@pytest.fixture(scope="module")
def checkpoint(corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_ckpt")
    path = str(root / "model.ckpt.json")
    code = main(["train", "--corpus", corpus, "--out", path, "--epochs", "8",
                 "--ks-recall", "4", "--ks-pair", "2"])
    assert code == 0
    return path


# ---------------------------------------------------------------------------
# generate


def test_generate_writes_corpus_meta_and_manifest(corpus):
    records = read_scenes(corpus)
    assert len(records) == 120
    with open(f"{corpus}.meta.json") as fh:
        meta = json.load(fh)
    assert meta["n_scenes"] == 120
    assert meta["spec"]["logit_scale"] == 4.0
    # the planted rule realizes the requested direction-asymmetry closely
    assert abs(meta["realized_asymmetric_fraction"] - meta["spec"]["asymmetric_fraction"]) <= 0.04
    with open(f"{corpus}.manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["command"] == "generate"
    assert manifest["outputs"][corpus] == _sha(corpus)
    assert manifest["config"]["n_scenes"] == 120


def test_generate_same_seed_is_byte_identical(tmp_path):
    a, b, c = (str(tmp_path / name) for name in ("a.sgjsonl", "b.sgjsonl", "c.sgjsonl"))
    assert main(["generate", "--out", a, "--seed", "5"]) == 0
    assert main(["generate", "--out", b, "--seed", "5"]) == 0
    assert main(["generate", "--out", c, "--seed", "6"]) == 0
    assert _sha(a) == _sha(b)
    assert _sha(a) != _sha(c)


def test_generate_env_overrides_config_file_and_flag_beats_env(tmp_path, monkeypatch):
    cfg = _write_config(tmp_path / "gen.cfg", nodes_per_scene=5, n_scenes=8)
    monkeypatch.setenv("SGGKIT_NODES_PER_SCENE", "4")
    monkeypatch.setenv("SGGKIT_SEED", "3")
    out = str(tmp_path / "env.sgjsonl")
    assert main(["generate", "--out", out, "--config", cfg, "--seed", "7"]) == 0
    records = read_scenes(out)
    assert len(records) == 8
    assert all(len(r.nodes) == 4 for r in records)  # env beat the config file
    with open(f"{out}.manifest.json") as fh:
        assert json.load(fh)["seed"] == 7  # flag beat the env


def test_generate_rejects_unknown_config_key(tmp_path, capsys):
    cfg = _write_config(tmp_path / "bad.cfg", not_a_field=3)
    assert main(["generate", "--out", str(tmp_path / "x.sgjsonl"), "--config", cfg]) == 2
    assert "unknown config keys" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train


def test_train_epochs_zero_equals_fresh_init(corpus, tmp_path):
    out = str(tmp_path / "init.ckpt.json")
    assert main(["train", "--corpus", corpus, "--out", out, "--epochs", "0"]) == 0
    model, bank = load_checkpoint(out)
    fresh = Model(model.config)
    assert model.params.keys() == fresh.params.keys()
    for name, p in model.params.items():
        np.testing.assert_array_equal(p.data, fresh.params[name].data)
    assert bank.counts.sum() == 0


def test_train_ablation_flags_set_baseline_config(corpus, tmp_path):
    out = str(tmp_path / "base.ckpt.json")
    assert main(["train", "--corpus", corpus, "--out", out, "--epochs", "1",
                 "--no-lih", "--no-dse", "--no-gih", "--no-ar"]) == 0
    model, _ = load_checkpoint(out)
    assert model.config.use_lih is False
    assert model.config.fusion == BASELINE_FUSION
    assert model.config.gih_variant == "none"
    assert model.config.w_ar == 0.0


def test_train_epoch_log_shows_learning(checkpoint):
    rows = _read_csv(f"{checkpoint}.log.csv")
    assert rows[0] == ["epoch", "L_ent", "L_pred", "L_ar", "R@4", "pR@2"]
    assert len(rows) == 9  # header + 8 epochs
    first, last = rows[1], rows[-1]
    assert float(last[5]) > float(first[5])  # held-out pR@2 improved
    assert float(last[2]) < float(first[2])  # predicate loss fell


def test_train_missing_corpus_is_io_error(tmp_path, capsys):
    code = main(["train", "--corpus", str(tmp_path / "nope.sgjsonl"),
                 "--out", str(tmp_path / "x.ckpt.json"), "--epochs", "1"])
    assert code == 4
    assert "i/o error" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore:overflow")
def test_train_divergent_learning_rate_is_numeric_failure(corpus, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SGGKIT_LEARNING_RATE", "1e9")
    code = main(["train", "--corpus", corpus, "--out", str(tmp_path / "x.ckpt.json"),
                 "--epochs", "2", "--holdout", "110"])
    assert code == 3
    assert "numeric failure" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# eval


def test_eval_requires_exactly_one_source(corpus, tmp_path, checkpoint):
    out = str(tmp_path / "m.csv")
    assert main(["eval", "--corpus", corpus, "--out", out]) == 2
    assert main(["eval", "--corpus", corpus, "--out", out,
                 "--checkpoint", checkpoint, "--predictions", "x.jsonl"]) == 2


def test_eval_ground_truth_predictions_score_one(corpus, tmp_path):
    records = read_scenes(corpus)
    preds = {r.scene_id: [(e.subject, e.object, e.predicate, 1.0) for e in r.edges]
             for r in records}
    pred_path = str(tmp_path / "gt.pred.jsonl")
    write_predictions(pred_path, preds)
    out = str(tmp_path / "gt.csv")
    assert main(["eval", "--corpus", corpus, "--predictions", pred_path, "--out", out]) == 0
    rows = _read_csv(out)
    assert rows[0] == ["scene_id", "metric", "k", "value"]
    values = [float(r[3]) for r in rows[1:]]
    np.testing.assert_allclose(values, 1.0)


def test_eval_checkpoint_matches_library_metrics(corpus, checkpoint, tmp_path):
    out = str(tmp_path / "m.csv")
    dumped = str(tmp_path / "m.pred.jsonl")
    assert main(["eval", "--corpus", corpus, "--checkpoint", checkpoint, "--out", out,
                 "--ks-recall", "4,20", "--ks-pair", "2", "--dump-predictions", dumped]) == 0
    records = read_scenes(corpus)
    graphs = [GroundTruthGraph.from_scene(r) for r in records]
    ranked = [rank_triplets(read_predictions(dumped)[r.scene_id]) for r in records]
    agg = {(r[1], int(r[2])): float(r[3]) for r in _read_csv(out)[1:] if r[0] == "ALL"}
    np.testing.assert_allclose(agg[("R", 4)], corpus_recall_at_k(ranked, graphs, 4))
    np.testing.assert_allclose(agg[("R", 20)], corpus_recall_at_k(ranked, graphs, 20))
    np.testing.assert_allclose(agg[("mR", 4)], mean_recall_at_k(ranked, graphs, 4))
    np.testing.assert_allclose(agg[("pR", 2)], corpus_pairwise_recall_at_k(ranked, graphs, 2))


def test_eval_direction_blind_checkpoint_has_zero_pair_recall(tmp_path):
    corpus = str(tmp_path / "asym.sgjsonl")
    gen_cfg = _write_config(tmp_path / "gen.cfg", n_scenes=60, asymmetric_fraction=1.0,
                            noise_rate=0.0, logit_scale=4.0, appearance_sigma=0.5,
                            logit_flip_rate=0.05)
    assert main(["generate", "--out", corpus, "--config", gen_cfg]) == 0
    ckpt = str(tmp_path / "blind.ckpt.json")
    train_cfg = _write_config(tmp_path / "train.cfg", fusion="union")
    assert main(["train", "--corpus", corpus, "--out", ckpt, "--epochs", "2",
                 "--config", train_cfg, "--no-gih", "--holdout", "20"]) == 0
    out = str(tmp_path / "blind.csv")
    assert main(["eval", "--corpus", corpus, "--checkpoint", ckpt, "--out", out]) == 0
    pr_values = [float(r[3]) for r in _read_csv(out)[1:] if r[1] == "pR"]
    assert pr_values, "an all-asymmetric corpus still has bidirectional pairs"
    np.testing.assert_array_equal(pr_values, 0.0)


def test_eval_rerun_is_byte_identical(corpus, checkpoint, tmp_path):
    outs = []
    for name in ("one", "two"):
        out = str(tmp_path / f"{name}.csv")
        dumped = str(tmp_path / f"{name}.pred.jsonl")
        assert main(["eval", "--corpus", corpus, "--checkpoint", checkpoint,
                     "--out", out, "--dump-predictions", dumped]) == 0
        outs.append((out, dumped))
    assert _sha(outs[0][0]) == _sha(outs[1][0])
    assert _sha(outs[0][1]) == _sha(outs[1][1])


def test_eval_bad_k_list_is_validation_error(corpus, checkpoint, tmp_path):
    code = main(["eval", "--corpus", corpus, "--checkpoint", checkpoint,
                 "--out", str(tmp_path / "m.csv"), "--ks-recall", "a,b"])
    assert code == 2


# ---------------------------------------------------------------------------
# train/eval determinism end to end


def test_train_rerun_is_byte_identical(corpus, tmp_path):
    shas = []
    for name in ("one", "two"):
        ckpt = str(tmp_path / f"{name}.ckpt.json")
        assert main(["train", "--corpus", corpus, "--out", ckpt, "--epochs", "2",
                     "--ks-recall", "4", "--ks-pair", "2"]) == 0
        shas.append((_sha(ckpt), _sha(f"{ckpt}.log.csv")))
    assert shas[0] == shas[1]


# ---------------------------------------------------------------------------
# analyze / br-build / guess-curve


def _uniform_pair_corpus(path):
    """Predicate 1 appears exactly once over every ordered category pair."""
    box = (0.1, 0.1, 0.6, 0.6)
    records = [
        SceneRecord("u0", [Node(0, 0, box, 1), Node(1, 0, box, 2)], [Edge(0, 1, 1)]),
        SceneRecord("u1", [Node(0, 0, box, 3), Node(1, 1, box, 4)],
                    [Edge(0, 1, 1), Edge(1, 0, 1)]),
        SceneRecord("u2", [Node(0, 1, box, 5), Node(1, 1, box, 6)], [Edge(0, 1, 1)]),
    ]
    write_scenes(path, records)
    return records


def test_analyze_uniform_corpus_has_zero_variance(tmp_path):
    corpus = str(tmp_path / "uniform.sgjsonl")
    _uniform_pair_corpus(corpus)
    out_dir = str(tmp_path / "analysis")
    assert main(["analyze", "--corpus", corpus, "--out-dir", out_dir]) == 0
    rows = _read_csv(os.path.join(out_dir, "variance.csv"))
    assert rows[0] == ["predicate", "variance"]
    variance = {int(r[0]): float(r[1]) for r in rows[1:]}
    # every ordered pair holds one count, so the spread is exactly zero
    assert variance[1] <= 0.05 * 1.0
    np.testing.assert_allclose(variance[1], 0.0)


def test_analyze_writes_distance_and_guess_curves(corpus, tmp_path):
    out_dir = str(tmp_path / "analysis")
    assert main(["analyze", "--corpus", corpus, "--out-dir", out_dir, "--k-max", "3"]) == 0
    distance = _read_csv(os.path.join(out_dir, "distance.csv"))
    assert distance[0] == ["predicate_i", "predicate_j", "distance"]
    assert len(distance) > 1
    curves = _read_csv(os.path.join(out_dir, "guess_curves.csv"))
    by_label = {}
    for label, k, fraction in curves[1:]:
        by_label.setdefault(label, []).append(float(fraction))
    assert set(by_label) == {"", "head", "tail", "head+tail"}
    for fractions in by_label.values():
        assert fractions == sorted(fractions)  # top-k curves never decrease


def test_br_build_without_bidirectional_pairs_is_empty(tmp_path):
    corpus = str(tmp_path / "oneway.sgjsonl")
    box = (0.2, 0.2, 0.7, 0.7)
    write_scenes(corpus, [
        SceneRecord("s0", [Node(0, 1, box, 1), Node(1, 2, box, 2)], [Edge(0, 1, 3)]),
        SceneRecord("s1", [Node(0, 3, box, 3), Node(1, 4, box, 4)], [Edge(1, 0, 2)]),
    ])
    out = str(tmp_path / "subset.sgjsonl")
    assert main(["br-build", "--corpus", corpus, "--out", out]) == 0
    assert read_scenes(out) == []
    with open(f"{out}.summary.json") as fh:
        summary = json.load(fh)
    assert summary["scenes_retained"] == 0
    assert summary["pairs"] == 0


def test_br_build_keeps_both_directions(corpus, tmp_path):
    out = str(tmp_path / "subset.sgjsonl")
    assert main(["br-build", "--corpus", corpus, "--out", out]) == 0
    subset = read_scenes(out)
    assert subset
    for rec in subset:
        present = {(e.subject, e.object) for e in rec.edges}
        assert all((o, s) in present for s, o in present)


def test_guess_curve_deterministic_rule_is_perfect_at_one(tmp_path):
    corpus = str(tmp_path / "clean.sgjsonl")
    cfg = _write_config(tmp_path / "gen.cfg", n_scenes=60, noise_rate=0.0, context_categories=0)
    assert main(["generate", "--out", corpus, "--config", cfg]) == 0
    out = str(tmp_path / "curve.csv")
    assert main(["guess-curve", "--train-corpus", corpus, "--conditioning", "head,tail",
                 "--target", "edge", "--out", out]) == 0
    rows = _read_csv(out)
    assert rows[1][:2] == ["head+tail", "1"]
    np.testing.assert_allclose(float(rows[1][2]), 1.0)
