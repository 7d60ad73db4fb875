import json
from dataclasses import replace

import numpy as np
import pytest

import car_retrieval.trainer as trainer_mod
from car_retrieval.autodiff import Tensor
from car_retrieval.config import ConfigError, TrainConfig
from car_retrieval.data import SyntheticConfig, batches, generate_synthetic
from car_retrieval.losses import LossBreakdown
from car_retrieval.retrieval import metrics_from_ranks
from car_retrieval.trainer import (ABLATION_ROWS, LOSS_ROWS, Checkpoint, ModalityError, NumericError,
                                   ablation_matrix, build_model, encode_split, evaluate, train)

TINY_DATA = SyntheticConfig(vocab_size=60, concept_count=10, embed_dim=16, n_train_paired=24,
                            n_train_unpaired=16, n_val=12, n_test=12, tokens_per_image=6)
TINY = TrainConfig.desk(epochs=2, d=16, bottleneck=4, paired_batch=8, unpaired_batch=8,
                        base_lr=1e-3)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(TINY_DATA)


@pytest.fixture(scope="module")
def run(corpus):
    return train(TINY, corpus)


def _events(log, kind):
    return [json.loads(line) for line in log if json.loads(line)["event"] == kind]


def test_zero_epochs_returns_initial_checkpoint(corpus):
    result = train(TINY.with_overrides({"epochs": 0}), corpus)
    init = build_model(TINY, TINY_DATA.vocab_size).state_dict()
    assert result.best.epoch == 0
    assert all(np.array_equal(init[k], v) for k, v in result.best.params.items())
    assert not _events(result.log, "step")


def test_training_is_deterministic(corpus, run):
    again = train(TINY, corpus)
    assert again.log == run.log
    assert all(np.array_equal(again.best.params[k], v) for k, v in run.best.params.items())


def test_log_header_and_bookkeeping(run):
    first = json.loads(run.log[0])
    assert first["event"] == "config" and first["config"]["epochs"] == 2
    params = _events(run.log, "params")[0]
    assert params["trainable"] > 0 and params["frozen"] > 0
    steps = _events(run.log, "step")
    assert {s["kind"] for s in steps} == {"paired", "unpaired"}
    for s in steps:
        weighted = sum(s["weights"][k] * v for k, v in s["components"].items())
        assert abs(s["total"] - weighted) <= 1e-12 * max(1.0, abs(s["total"]))
    hashes = {e["frozen_sha256"] for e in _events(run.log, "epoch")}
    assert hashes == {params["frozen_sha256"]}


def test_best_checkpoint_has_highest_validation_score(run):
    epochs = _events(run.log, "epoch")
    best = max(e["val_i2r_r1"] for e in epochs)
    assert run.best.val_r1 == best
    assert run.best.epoch == next(e["epoch"] for e in epochs if e["val_i2r_r1"] == best)


def test_row9_never_requests_unpaired_batches(corpus):
    seen = []

    def spy(*args, **kwargs):
        seen.append(kwargs["use_unpaired"])
        return batches(*args, **kwargs)

    cfg = TINY.with_overrides(dict(ABLATION_ROWS["row9"], epochs=1))
    result = train(cfg, corpus, batch_source=spy)
    assert seen == [False]
    assert {s["kind"] for s in _events(result.log, "step")} == {"paired"}


def test_non_finite_loss_aborts_with_batch_id(corpus, monkeypatch):
    def broken(*args, **kwargs):
        return LossBreakdown(Tensor(np.array(np.nan), requires_grad=True), {}, {})

    monkeypatch.setattr(trainer_mod, "multi_level_loss", broken)
    with pytest.raises(NumericError, match="batch p0"):
        train(TINY, corpus)


def test_dimension_mismatch_is_config_error(corpus):
    with pytest.raises(ConfigError):
        train(TINY.with_overrides({"d": 32}), corpus)


def test_checkpoint_round_trip_is_bit_identical(run, corpus, tmp_path):
    path = tmp_path / "best.ckpt"
    run.best.save(path)
    loaded = Checkpoint.load(path)
    assert loaded.config == run.best.config and loaded.epoch == run.best.epoch
    test = corpus.split("test")
    a = evaluate(run.best, test, ["car", "car+", "car++"], n_subsets=3, subset_size=8)
    b = evaluate(loaded, test, ["car", "car+", "car++"], n_subsets=3, subset_size=8)
    assert [r.per_subset for r in a] == [r.per_subset for r in b]
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(trainer_mod.DataError):
        Checkpoint.load(path)


def test_evaluate_needs_modalities(run, corpus):
    test = corpus.split("test")
    stripped = [replace(test[0], segment_vectors=[])] + test[1:]
    with pytest.raises(ModalityError, match="segments required"):
        evaluate(run.best, stripped, ["car++"])
    no_desc = [replace(r, description_tokens=None) for r in test]
    with pytest.raises(ModalityError, match="descriptions required"):
        evaluate(run.best, no_desc, ["car+"])
    assert evaluate(run.best, stripped, ["car"])


def test_full_size_subsets_are_identical(run, corpus):
    for rep in evaluate(run.best, corpus.split("test"), ["car"], n_subsets=10):
        assert all(m == rep.per_subset[0] for m in rep.per_subset)


def test_car_report_matches_recomputation_from_dumps(run, corpus, tmp_path):
    test = corpus.split("test")
    emb = encode_split(run.best.model(), test)
    np.save(tmp_path / "ev.npy", emb["image"])
    np.save(tmp_path / "er.npy", emb["recipe"])
    ev, er = np.load(tmp_path / "ev.npy"), np.load(tmp_path / "er.npy")
    ev = ev / np.linalg.norm(ev, axis=1, keepdims=True)
    er = er / np.linalg.norm(er, axis=1, keepdims=True)
    dist = 1.0 - ev @ er.T
    ranks = [sorted(range(len(row)), key=lambda c: (row[c], c)).index(q) + 1 for q, row in enumerate(dist)]
    rep = evaluate(run.best, test, ["car"], ["i2r"], n_subsets=1)[0]
    oracle = metrics_from_ranks(np.array(ranks))
    assert rep.per_subset[0].r1 == oracle.r1 and rep.per_subset[0].r5 == oracle.r5
    assert rep.per_subset[0].medr == oracle.medr


def test_ablation_rows_and_duplicates(corpus):
    base = TINY.with_overrides({"epochs": 1})
    with pytest.raises(ConfigError, match="duplicate"):
        ablation_matrix(base, [("a", {}), ("a", {"alpha": 0.5})], corpus)
    rows = [(k, ABLATION_ROWS[k]) for k in ("row1", "row2", "row3", "row4")]
    rows += [(f"loss-{k}", v) for k, v in LOSS_ROWS.items()]
    table = ablation_matrix(base, rows, corpus, ["car"], n_subsets=2, subset_size=8)
    assert [r.label for r in table] == ["row1", "row2", "row3", "row4", "loss-triplet", "loss-circle"]
    assert table[0].best_epoch == 0
    assert table[1].config.adapters_image and not table[1].config.adapters_recipe
    assert table[4].config.loss == "triplet"
    assert all(len(r.reports) == 2 for r in table)
