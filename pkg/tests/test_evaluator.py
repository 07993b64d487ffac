import json

import numpy as np
import pytest
import torch

from biaspatch.errors import ProtocolError, ValidationError
from biaspatch.evaluator import (
    AttackReport,
    SplitPlan,
    directional_trend,
    evaluate_attack,
    mixture_ablation,
    topk_hits,
    transfer_matrix,
    transfer_rows,
    transform_ablation,
    unseen_class_eval,
)
from biaspatch.model_zoo import accuracy
from biaspatch.patch_core import Patch
from biaspatch.transforms import TransformConfig


@pytest.fixture(scope="module")
def split(small_data):
    d = small_data["test"]
    return d.images, d.labels


@pytest.fixture(scope="module")
def gpatch(small_handle):
    p = Patch.gaussian(6, small_handle.input_size, seed=0, area_budget=0.05)
    p.metadata["source_model"] = small_handle.model_id
    p.metadata["trained_classes"] = [0, 1, 2, 3, 4]
    return p


def test_topk_hits_brute_force():
    rng = np.random.default_rng(0)
    logits = torch.from_numpy(rng.integers(0, 4, size=(300, 7)).astype(np.float32))  # many ties
    labels = torch.from_numpy(rng.integers(0, 7, 300))
    hits = topk_hits(logits, labels)
    for n in range(300):
        row = logits[n].tolist()
        ranked = sorted(range(7), key=lambda c: (-row[c], c))
        for k in (1, 3, 5):
            assert bool(hits[k][n]) == (int(labels[n]) in ranked[:k])


def test_white_patch_equals_control(small_handle, split):
    white = Patch.white(6, small_handle.input_size, area_budget=0.05)
    rep = evaluate_attack(small_handle, white, *split)
    for k in ("top1", "top3", "top5"):
        assert rep.control[k] == getattr(rep, k)


def test_clean_evaluation_is_clean_accuracy(small_handle, split, gpatch):
    rep = evaluate_attack(small_handle, gpatch, *split, placement_policy="none")
    assert rep.top1 == pytest.approx(accuracy(small_handle, *split))
    assert evaluate_attack(small_handle, None, *split).top1 == pytest.approx(accuracy(small_handle, *split))


def test_ordering_and_pairing(small_handle, split, gpatch):
    cfg = TransformConfig(samples_per_step=1)
    rep = evaluate_attack(small_handle, gpatch, *split, placement_policy="uniform_random", transform_cfg=cfg, seed=3)
    assert rep.top1 <= rep.top3 <= rep.top5
    assert rep.control["top1"] <= rep.control["top3"] <= rep.control["top5"]
    assert rep.control["draw_log_hash"] == rep.draw_log_hash
    assert rep.n_samples == len(split[1])
    again = evaluate_attack(small_handle, gpatch, *split, placement_policy="uniform_random", transform_cfg=cfg, seed=3)
    assert again.to_json() == rep.to_json()
    other = evaluate_attack(small_handle, gpatch, *split, placement_policy="uniform_random", transform_cfg=cfg, seed=4)
    assert other.draw_log_hash != rep.draw_log_hash


def test_per_class_macro(small_handle, split, gpatch):
    rep = evaluate_attack(small_handle, gpatch, *split)
    assert set(rep.per_class_top1) == set(range(10))
    assert rep.macro_top1 == pytest.approx(np.mean(list(rep.per_class_top1.values())))


def test_report_round_trip(tmp_path, small_handle, split, gpatch):
    rep = evaluate_attack(small_handle, gpatch, *split)
    rep.save(tmp_path)
    back = AttackReport.from_dict(json.loads((tmp_path / "attack_report.json").read_text()))
    assert back.to_json() == rep.to_json()
    lines = (tmp_path / "attack_report.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("patch_id")


def test_evaluate_validation(small_handle, split, gpatch):
    with pytest.raises(ValidationError):
        evaluate_attack(small_handle, gpatch, split[0][:0], split[1][:0])
    with pytest.raises(ValidationError):
        evaluate_attack(small_handle, Patch.white(6, (64, 64)), *split)


def test_transfer_degenerate_and_white_row(small_handle, split, gpatch):
    cells = transfer_matrix({"g": gpatch}, {small_handle.model_id: small_handle}, *split)
    assert len(cells) == 1 and cells[0].white_box
    assert cells[0].report.to_json() == evaluate_attack(small_handle, gpatch, *split).to_json()
    white = Patch.white(6, small_handle.input_size, area_budget=0.05)
    row = transfer_matrix({"w": white}, {"a": small_handle}, *split)
    assert row[0].report.top1 == row[0].report.control["top1"] and not row[0].white_box
    assert transfer_rows(cells)[0]["white_box"] is True


def test_transfer_size_mismatch(small_handle, split):
    with pytest.raises(ValidationError):
        transfer_matrix({"p": Patch.white(6, (64, 64))}, {"a": small_handle}, *split)


def test_split_plan_invariants():
    plan = SplitPlan.unseen_half(10, seed=0)
    assert not plan.train_classes & plan.eval_classes
    assert plan.train_classes | plan.eval_classes == frozenset(range(10))
    assert SplitPlan.unseen_half(10, seed=0) == plan
    with pytest.raises(ProtocolError):
        SplitPlan({0, 1}, {1, 2})


def test_unseen_eval_restricts_and_checks_leakage(small_handle, split, gpatch):
    plan = SplitPlan({0, 1, 2, 3, 4}, {5, 6, 7, 8, 9})
    rep = unseen_class_eval(small_handle, plan, gpatch, *split)
    assert set(rep.per_class_top1) == {5, 6, 7, 8, 9}
    assert rep.n_samples == int((split[1] >= 5).sum())
    leaky = SplitPlan({5, 6, 7, 8, 9}, {0, 1, 2, 3, 4})
    with pytest.raises(ProtocolError):
        unseen_class_eval(small_handle, leaky, gpatch, *split)


def test_degenerate_plan_equals_evaluate(small_handle, split, gpatch):
    rep = unseen_class_eval(small_handle, SplitPlan.all_classes(10), gpatch, *split)
    ref = evaluate_attack(small_handle, gpatch, *split)
    assert (rep.top1, rep.top3, rep.top5) == (ref.top1, ref.top3, ref.top5)


@pytest.fixture(scope="module")
def pools(small_data):
    v = small_data["val"]
    tr = small_data["train"]
    return (v.images[:40], v.labels[:40]), (tr.images[:40], tr.labels[:40])


def test_mixture_duplicates_identical(small_handle, split, pools):
    prior = Patch.gaussian(6, small_handle.input_size, seed=0, area_budget=0.05)
    rows = mixture_ablation(
        small_handle, pools[0], pools[1], [0.5, 0.5, 1.0], 20, prior, *split, train_kwargs={"epochs": 1, "batch_size": 10}
    )
    assert rows[0]["top1"] == rows[1]["top1"] and rows[0]["patch_id"] == rows[1]["patch_id"]
    assert (rows[0]["n_prototypes"], rows[0]["n_images"]) == (10, 10)
    assert (rows[2]["n_prototypes"], rows[2]["n_images"]) == (20, 0)


def test_mixture_pool_too_small(small_handle, split, pools):
    prior = Patch.gaussian(6, small_handle.input_size, seed=0, area_budget=0.05)
    with pytest.raises(ValidationError):
        mixture_ablation(small_handle, pools[0], pools[1], [1.0], 41, prior, *split, train_kwargs={"epochs": 1})
    with pytest.raises(ValidationError):
        mixture_ablation(small_handle, pools[0], pools[1], [1.5], 10, prior, *split, train_kwargs={"epochs": 1})


def test_transform_ablation_shape(small_handle, split, pools):
    prior = Patch.gaussian(6, small_handle.input_size, seed=0, area_budget=0.05)
    rows = transform_ablation(
        small_handle, *pools[1], ["rotation", "affine"], prior, *split, samples_per_step=2,
        train_kwargs={"epochs": 1, "batch_size": 10},
    )
    assert [r["kind"] for r in rows] == ["rotation", "affine"]
    assert all(0 <= r["with_top1"] <= 1 and 0 <= r["without_top1"] <= 1 for r in rows)


def test_directional_trend():
    assert directional_trend([{"top1": 0.1}, {"top1": 0.2}, {"top1": 0.2}])
    assert not directional_trend([{"top1": 0.3}, {"top1": 0.2}])
