import numpy as np
import pytest
import torch
import torch.nn.functional as F

from biaspatch.errors import ValidationError
from biaspatch.patch_core import Patch, Placement, Provenance, apply_patch
from biaspatch.prototypes import generate_prototype_set
from biaspatch.trainer import adversarial_loss, patched_top1, train_patch
from biaspatch.transforms import TransformConfig, apply_transform, sample_transforms


@pytest.fixture(scope="module")
def protos(small_handle):
    return generate_prototype_set(small_handle, per_class=2, seed=0, steps=300)


def _oracle_loss(handle, images, labels, patch_np, tops, lefts, transforms=None, k=1):
    """Per-sample loop: patch, optionally warp each of k copies, take P(t) - max other."""
    vals = []
    size = patch_np.shape[:2]
    for n in range(len(images)):
        img = images[n].permute(1, 2, 0).numpy().astype(np.float64)
        pl = Placement(int(tops[n]), int(lefts[n]), size, handle.input_size)
        x = torch.from_numpy(apply_patch(img, patch_np.astype(np.float64), pl)).permute(2, 0, 1).float()
        for j in range(k):
            xj = x if transforms is None else apply_transform(transforms[n * k + j], x)
            with torch.no_grad():
                p = F.softmax(handle.logits(xj), dim=1)[0].double().numpy()
            t = int(labels[n])
            vals.append(p[t] - max(p[c] for c in range(len(p)) if c != t))
    return float(np.mean(vals))


def test_loss_matches_loop_oracle(small_handle, protos):
    images, labels = protos.images[:10], protos.labels[:10]
    white = Patch.white(3, small_handle.input_size, area_budget=0.01)
    rng = np.random.default_rng(0)
    tops, lefts = rng.integers(0, 30, 10), rng.integers(0, 30, 10)
    with torch.no_grad():
        got = float(adversarial_loss(small_handle, images, labels, white, (tops, lefts)))
    assert got == pytest.approx(_oracle_loss(small_handle, images, labels, white.pixels, tops, lefts), abs=1e-6)


def test_loss_with_transforms_matches_loop_oracle(small_handle, protos):
    images, labels = protos.images[:10], protos.labels[:10]
    patch = Patch.gaussian(3, small_handle.input_size, seed=2, area_budget=0.01)
    cfg = TransformConfig(samples_per_step=3)
    tops, lefts = np.full(10, 14), np.full(10, 14)
    with torch.no_grad():
        got = float(adversarial_loss(small_handle, images, labels, patch, (tops, lefts), cfg, np.random.default_rng(5)))
    draws = sample_transforms(cfg, np.random.default_rng(5), 30)
    want = _oracle_loss(small_handle, images, labels, patch.pixels, tops, lefts, draws, k=3)
    assert got == pytest.approx(want, abs=1e-5)


def test_noop_patch_gives_clean_margin(small_handle, protos):
    img, t = protos.images[:1], protos.labels[:1]
    region = img[0, :, 5:8, 7:10]
    with torch.no_grad():
        loss = float(adversarial_loss(small_handle, img, t, region, ([5], [7])))
        p = small_handle.probabilities(img)[0]
    others = torch.cat([p[: int(t)], p[int(t) + 1 :]])
    assert loss == pytest.approx(float(p[int(t)] - others.max()), abs=1e-7)
    assert loss > 0


def test_loss_negative_when_misclassified(small_handle, protos):
    img = protos.images[:1]
    pred = int(small_handle.logits(img).argmax(1))
    wrong = torch.tensor([(pred + 1) % 10])
    region = img[0, :, 0:3, 0:3]
    with torch.no_grad():
        assert float(adversarial_loss(small_handle, img, wrong, region, ([0], [0]))) < 0


def test_loss_in_range_and_validation(small_handle, protos):
    white = Patch.white(3, small_handle.input_size, area_budget=0.01)
    with torch.no_grad():
        v = float(adversarial_loss(small_handle, protos.images, protos.labels, white, ([0] * 20, [0] * 20)))
    assert -1 <= v <= 1
    with pytest.raises(ValidationError):
        adversarial_loss(small_handle, protos.images[:0], protos.labels[:0], white, ([], []))
    with pytest.raises(ValidationError):
        adversarial_loss(small_handle, protos.images, protos.labels, white, ([0] * 20, [0] * 20), TransformConfig())


def test_zero_epochs_returns_prior(small_handle, protos):
    prior = Patch.gaussian(3, small_handle.input_size, seed=1, area_budget=0.01)
    run = train_patch(small_handle, protos.images, protos.labels, prior, epochs=0)
    assert np.array_equal(run.patch.pixels, prior.pixels)
    assert run.epoch_metrics == []


def test_training_lowers_loss_and_accuracy(small_handle, small_data):
    d = small_data["val"]
    prior = Patch.gaussian(8, small_handle.input_size, seed=1, area_budget=0.07)
    white = Patch.white(8, small_handle.input_size, area_budget=0.07)
    run = train_patch(small_handle, d.images, d.labels, prior, epochs=10, batch_size=8, lr=0.05, seed=0)
    assert run.epoch_metrics[-1][1] < run.epoch_metrics[0][1]
    assert run.patch.provenance is Provenance.TRAINED
    assert 0 <= run.patch.pixels.min() and run.patch.pixels.max() <= 1
    trained = patched_top1(small_handle, d.images, d.labels, run.patch.tensor())
    control = patched_top1(small_handle, d.images, d.labels, white.tensor())
    assert trained < control


def test_training_is_deterministic(small_handle, protos):
    prior = Patch.gaussian(3, small_handle.input_size, seed=1, area_budget=0.01)
    kw = dict(epochs=2, batch_size=8, transform_cfg=TransformConfig(samples_per_step=2), seed=4)
    a = train_patch(small_handle, protos.images, protos.labels, prior, **kw)
    b = train_patch(small_handle, protos.images, protos.labels, prior, **kw)
    assert np.array_equal(a.patch.pixels, b.patch.pixels)
    assert a.epoch_metrics == b.epoch_metrics and a.config_hash == b.config_hash


def test_training_validation(small_handle, protos):
    prior = Patch.white(3, small_handle.input_size, area_budget=0.01)
    one_class = protos.restrict([0])
    with pytest.raises(ValidationError):
        train_patch(small_handle, one_class.images, one_class.labels, prior, epochs=1)
    with pytest.raises(ValidationError):
        train_patch(small_handle, protos.images, protos.labels, Patch.white(3, (64, 64)), epochs=1)


def test_run_save(tmp_path, small_handle, protos):
    prior = Patch.white(3, small_handle.input_size, area_budget=0.01)
    run = train_patch(small_handle, protos.images, protos.labels, prior, epochs=1)
    run.save(tmp_path)
    assert (tmp_path / "patch.png").exists() and (tmp_path / "metrics.jsonl").read_text().count("\n") == 1
