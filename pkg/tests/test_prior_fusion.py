import math

import numpy as np
import pytest
import torch
from torch import nn

from biaspatch.errors import InputShapeError, ValidationError
from biaspatch.hard_mining import mine_hard_examples
from biaspatch.model_zoo import ClassifierHandle, SmallCNN
from biaspatch.patch_core import Provenance
from biaspatch.prior_fusion import (
    AttentionMap,
    FusedExample,
    attention_weights,
    crop_prior,
    extract_prior,
    fuse_prior,
    gram_matrix,
    style_loss,
    uncertainty_from_probs,
    uncertainty_loss,
    window_sums,
)


class HandNet(nn.Module):
    """Two 1x1 conv + ReLU layers and a max-pool head. Small enough to evaluate by hand."""

    def __init__(self, w1, b1, w2, b2, wh):
        super().__init__()
        self.f1 = nn.Sequential(nn.Conv2d(3, w1.shape[0], 1), nn.ReLU())
        self.f2 = nn.Sequential(nn.Conv2d(w1.shape[0], w2.shape[0], 1), nn.ReLU())
        self.head = nn.Linear(w2.shape[0], wh.shape[0], bias=False)
        with torch.no_grad():
            self.f1[0].weight.copy_(torch.from_numpy(w1)[:, :, None, None])
            self.f1[0].bias.copy_(torch.from_numpy(b1))
            self.f2[0].weight.copy_(torch.from_numpy(w2)[:, :, None, None])
            self.f2[0].bias.copy_(torch.from_numpy(b2))
            self.head.weight.copy_(torch.from_numpy(wh))

    def forward(self, x):
        return self.head(self.f2(self.f1(x)).amax(dim=(2, 3)))


@pytest.fixture
def hand():
    rng = np.random.default_rng(0)
    p = dict(
        w1=rng.normal(size=(4, 3)), b1=rng.normal(size=4) * 0.1,
        w2=rng.normal(size=(5, 4)), b2=rng.normal(size=5) * 0.1,
        wh=rng.normal(size=(3, 5)),
    )
    # parameters are stored as float32 before the module is promoted to float64
    p = {k: v.astype(np.float32).astype(np.float64) for k, v in p.items()}
    net = HandNet(**p).double()
    return ClassifierHandle(net, 3, (8, 8), ["f1", "f2"]), p


def _hand_features(x, p):
    """Numpy forward pass of HandNet for one (3, H, W) image."""
    a1 = np.maximum(np.einsum("oc,chw->ohw", p["w1"], x) + p["b1"][:, None, None], 0)
    a2 = np.maximum(np.einsum("oc,chw->ohw", p["w2"], a1) + p["b2"][:, None, None], 0)
    return {"f1": a1, "f2": a2}


def _gram_loops(f):
    w = f.shape[0]
    flat = f.reshape(w, -1)
    g = np.zeros((w, w))
    for i in range(w):
        for j in range(w):
            s = 0.0
            for k in range(flat.shape[1]):
                s += flat[i, k] * flat[j, k]
            g[i, j] = s
    return g


# ---- Gram matrix -------------------------------------------------------


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 2, 5), (6, 8, 8), (2, 1, 7)])
def test_gram_matches_double_loop(shape):
    f = np.random.default_rng(sum(shape)).normal(size=shape)
    g = gram_matrix(torch.from_numpy(f)).numpy()
    assert np.allclose(g, _gram_loops(f), atol=1e-10, rtol=0)


def test_gram_symmetric_and_psd():
    rng = np.random.default_rng(0)
    for _ in range(50):
        w, u, v = rng.integers(1, 9, 3)
        g = gram_matrix(torch.from_numpy(rng.normal(size=(w, u, v))))
        assert torch.equal(g, g.T)
        assert torch.linalg.eigvalsh(g).min() >= -1e-8


def test_gram_batched_matches_single():
    f = torch.randn(4, 3, 5, 5, dtype=torch.float64)
    gb = gram_matrix(f)
    for i in range(4):
        assert torch.allclose(gb[i], gram_matrix(f[i]))


def test_gram_input_checks():
    with pytest.raises(InputShapeError):
        gram_matrix(torch.zeros(3, 4))
    with pytest.raises(ValidationError):
        gram_matrix(torch.tensor([[[float("nan")]]]))


# ---- Style loss --------------------------------------------------------


def test_style_loss_of_self_is_zero(hand):
    h, _ = hand
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    assert float(style_loss(x, x[None], h, ["f1", "f2"])) == 0.0


def test_style_loss_matches_hand_oracle(hand):
    h, p = hand
    rng = np.random.default_rng(1)
    x = rng.random((3, 8, 8))
    batch = rng.random((4, 3, 8, 8))
    fx = _hand_features(x, p)
    expected = 0.0
    for name in ("f1", "f2"):
        gx = _gram_loops(fx[name])
        expected += np.mean([((gx - _gram_loops(_hand_features(b, p)[name])) ** 2).sum() for b in batch])
    got = float(style_loss(torch.from_numpy(x), torch.from_numpy(batch), h, ["f1", "f2"]))
    assert got == pytest.approx(expected, rel=1e-6, abs=1e-6)


def test_style_loss_empty_batch_raises(hand):
    h, _ = hand
    with pytest.raises(ValidationError):
        style_loss(torch.rand(3, 8, 8, dtype=torch.float64), torch.zeros(0, 3, 8, 8, dtype=torch.float64), h, ["f1"])


def test_style_loss_unknown_layer(hand):
    h, _ = hand
    with pytest.raises(KeyError):
        style_loss(torch.rand(3, 8, 8, dtype=torch.float64), torch.rand(1, 3, 8, 8, dtype=torch.float64), h, ["f9"])


# ---- Uncertainty loss --------------------------------------------------


def test_uniform_distribution_uncertainty():
    p = torch.full((10,), 0.1, dtype=torch.float64)
    assert float(uncertainty_from_probs(p)) == pytest.approx(-math.log(10), abs=1e-9)
    assert float(uncertainty_from_probs(p)) == pytest.approx(-2.302585, abs=1e-6)
    assert float(uncertainty_from_probs(p, "literal_eq4")) == pytest.approx(-math.log(10), abs=1e-9)


def test_peaked_distribution_uncertainty():
    p = np.full(10, 0.01 / 9)
    p[0] = 0.99
    oracle = sum(q * math.log(q) for q in p)
    got = float(uncertainty_from_probs(torch.from_numpy(p)))
    assert got == pytest.approx(oracle, abs=1e-9)
    assert got == pytest.approx(-0.0780, abs=5e-4)
    lit = float(uncertainty_from_probs(torch.from_numpy(p), "literal_eq4"))
    assert lit == pytest.approx(np.mean(np.log(p)), abs=1e-9)


def test_one_hot_uncertainty_is_finite():
    p = torch.zeros(10, dtype=torch.float64)
    p[3] = 1.0
    assert float(uncertainty_from_probs(p)) == 0.0
    assert math.isfinite(float(uncertainty_from_probs(p, "literal_eq4")))


def test_uncertainty_bad_mode():
    with pytest.raises(ValidationError):
        uncertainty_from_probs(torch.full((2,), 0.5), "entropy")


def test_uncertainty_loss_uses_model(hand):
    h, p = hand
    x = np.random.default_rng(3).random((3, 8, 8))
    logits = p["wh"] @ _hand_features(x, p)["f2"].max(axis=(1, 2))
    q = np.exp(logits - logits.max())
    q /= q.sum()
    assert float(uncertainty_loss(torch.from_numpy(x), h)) == pytest.approx(float((q * np.log(q)).sum()), abs=1e-9)


# ---- Attention ---------------------------------------------------------




@pytest.fixture
def tiny_net():
    torch.manual_seed(0)
    m = SmallCNN(num_classes=5, width=4, n_blocks=3).double()
    return ClassifierHandle(m, 5, (16, 16), ["conv1", "conv2", "conv3"])


@pytest.mark.parametrize("layer", ["conv2", "conv3"])
def test_attention_matches_finite_differences(tiny_net, layer):
    torch.manual_seed(1)
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    label = 2
    att = attention_weights(tiny_net, x, layer, label).weights
    module = dict(tiny_net.model.named_modules())[layer]
    state = {}

    def hook(_m, _i, out):
        lo = out.amin(dim=(-2, -1), keepdim=True).detach()
        span = (out.amax(dim=(-2, -1), keepdim=True).detach() - lo).clamp_min(1e-12)
        z = (out - lo) / span
        state["z"] = z.detach().clone()
        if "delta" in state:
            z = z + state["delta"]
        return z * span + lo

    hd = module.register_forward_hook(hook)
    try:
        with torch.no_grad():
            tiny_net.model(x[None])
            z = state["z"]
            rng = np.random.default_rng(0)
            eps = 1e-6
            u, v = z.shape[-2:]
            for _ in range(10):
                i, j = int(rng.integers(u)), int(rng.integers(v))
                fd = 0.0
                for k in range(z.shape[1]):
                    d = torch.zeros_like(z)
                    d[0, k, i, j] = eps
                    state["delta"] = d
                    yp = float(tiny_net.model(x[None])[0, label])
                    state["delta"] = -d
                    ym = float(tiny_net.model(x[None])[0, label])
                    fd += (yp - ym) / (2 * eps) * float(z[0, k, i, j])
                assert att[i, j] == pytest.approx(fd, rel=1e-3, abs=1e-7)
    finally:
        hd.remove()


def test_attention_validation(tiny_net):
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    with pytest.raises(ValidationError):
        attention_weights(tiny_net, x, "conv2", 7)
    with pytest.raises(KeyError):
        attention_weights(tiny_net, x, "conv9", 1)


# ---- Cropping ----------------------------------------------------------


def test_window_sums_brute_force():
    a = np.random.default_rng(0).normal(size=(9, 11))
    s = window_sums(a, (3, 4))
    assert s.shape == (7, 8)
    for t in range(7):
        for l in range(8):
            assert s[t, l] == pytest.approx(a[t : t + 3, l : l + 4].sum())


def test_crop_picks_brute_force_argmax():
    rng = np.random.default_rng(2)
    fused = FusedExample(torch.rand(3, 16, 16), "x#0", [])
    for _ in range(5):
        att = AttentionMap(rng.normal(size=(16, 16)), "conv1", 0)
        patch = crop_prior(fused, att, 4, area_budget=0.1)
        best, arg = -np.inf, None
        for t in range(13):
            for l in range(13):
                s = att.weights[t : t + 4, l : l + 4].sum()
                if s > best + 1e-12:
                    best, arg = s, (t, l)
        assert (patch.metadata["crop_top"], patch.metadata["crop_left"]) == arg
        t, l = arg
        assert np.allclose(patch.pixels, fused.pixels[:, t : t + 4, l : l + 4].permute(1, 2, 0).numpy())
        assert patch.provenance is Provenance.FUSED_PRIOR


def test_crop_ties_go_to_smallest_corner():
    fused = FusedExample(torch.rand(3, 8, 8), "x#0", [])
    patch = crop_prior(fused, AttentionMap(np.zeros((8, 8)), "conv1", 0), 2, area_budget=0.1)
    assert (patch.metadata["crop_top"], patch.metadata["crop_left"]) == (0, 0)


def test_crop_upsamples_coarse_attention():
    fused = FusedExample(torch.rand(3, 16, 16), "x#0", [])
    w = np.zeros((4, 4))
    w[3, 0] = 1.0
    patch = crop_prior(fused, AttentionMap(w, "conv3", 0), 4, area_budget=0.1)
    assert patch.metadata["crop_top"] >= 8 and patch.metadata["crop_left"] <= 4


def test_crop_too_large():
    fused = FusedExample(torch.rand(3, 8, 8), "x#0", [])
    with pytest.raises(ValidationError):
        crop_prior(fused, AttentionMap(np.zeros((8, 8)), "c", 0), 9)


# ---- End to end --------------------------------------------------------


@pytest.fixture(scope="module")
def fused_run(small_handle, small_data):
    d = small_data["val"]
    hs = mine_hard_examples(small_handle, d.images, d.labels, count=20)
    return hs, fuse_prior(hs, small_handle, epochs=5, seed=0)


def test_fusion_reduces_objective(fused_run):
    _, fused = fused_run
    trace = fused.loss_trace
    assert len(trace) == 6 and trace[0][0] == 0
    assert trace[-1][3] < trace[0][3]
    assert fused.pixels.min() >= 0 and fused.pixels.max() <= 1


def test_fusion_is_deterministic(fused_run, small_handle):
    hs, fused = fused_run
    again = fuse_prior(hs, small_handle, epochs=5, seed=0)
    assert torch.equal(again.pixels, fused.pixels)


def test_fusion_rejects_empty_set(fused_run, small_handle):
    hs, _ = fused_run
    from dataclasses import replace

    empty = replace(hs, images=hs.images[:0], labels=hs.labels[:0], indices=[])
    with pytest.raises(ValidationError):
        fuse_prior(empty, small_handle, epochs=1)


def test_extract_prior_and_round_trip(fused_run, small_handle, tmp_path):
    _, fused = fused_run
    patch, att = extract_prior(fused, small_handle, 3, area_budget=0.01)
    assert patch.shape == (3, 3)
    assert att.source_label == small_handle.predict(fused.pixels)[0]
    fused.save(tmp_path)
    back = FusedExample.load(tmp_path)
    assert torch.equal(back.pixels, fused.pixels)
    assert back.loss_trace == [tuple(t) for t in fused.loss_trace]


# ---- tabulated examples ------------------------------------------------


def test_gram_two_orthogonal_channels():
    f = torch.tensor([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]).reshape(2, 2, 2)
    assert torch.equal(gram_matrix(f), torch.eye(2))


def test_gram_identical_channels():
    c = torch.randn(3, 3, dtype=torch.float64)
    g = gram_matrix(torch.stack([c, c]))
    n2 = float((c * c).sum())
    assert torch.allclose(g, torch.full((2, 2), n2, dtype=torch.float64))


def test_style_loss_duplicate_batch_is_zero(hand):
    h, _ = hand
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    assert float(style_loss(x, torch.stack([x, x]), h, ["f1", "f2"])) == 0.0


class OneLayer(nn.Module):
    def __init__(self):
        super().__init__()
        self.f = nn.Conv2d(3, 2, 1)
        with torch.no_grad():
            self.f.weight.copy_(torch.tensor([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0]])[:, :, None, None])
            self.f.bias.copy_(torch.tensor([0.0, 1.0]))

    def forward(self, x):
        return self.f(x).mean(dim=(2, 3))


def test_style_loss_ones_vs_zeros_hand_net():
    h = ClassifierHandle(OneLayer().double(), 2, (4, 4), ["f"])
    ones = torch.ones(3, 4, 4, dtype=torch.float64)
    zeros = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    # ones: channel values (1, 2) at 16 positions; zeros: (0, 1)
    g1 = 16 * np.array([[1, 2], [2, 4]])
    g0 = 16 * np.array([[0, 0], [0, 1]])
    expected = float(((g1 - g0) ** 2).sum())
    assert float(style_loss(ones, zeros, h, ["f"])) == pytest.approx(expected, rel=1e-12)


def test_attention_zero_on_zero_activations():
    class Zero(nn.Module):
        def __init__(self):
            super().__init__()
            self.f = nn.Sequential(nn.Conv2d(3, 2, 3, padding=1, bias=False), nn.ReLU())
            self.head = nn.Linear(2, 3)

        def forward(self, x):
            return self.head(self.f(x).mean(dim=(2, 3)))

    torch.manual_seed(0)
    h = ClassifierHandle(Zero(), 3, (8, 8), ["f"])
    att = attention_weights(h, torch.zeros(3, 8, 8), "f", 1)
    assert att.weights.shape == (8, 8) and np.all(att.weights == 0)


def test_attention_recomputation_reproducible(tiny_net):
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    a = attention_weights(tiny_net, x, "conv2", 3).weights
    b = attention_weights(tiny_net, x, "conv2", 3).weights
    assert a.shape == (8, 8) and np.abs(a - b).max() <= 1e-6


def test_crop_spike_centres_window():
    fused = FusedExample(torch.rand(3, 16, 16), "x#0", [])
    w = np.zeros((16, 16))
    w[8, 8] = 1.0
    p = crop_prior(fused, AttentionMap(w, "conv1", 0), 3, area_budget=0.1)
    # every window covering the spike ties; the smallest (top, left) wins
    assert (p.metadata["crop_top"], p.metadata["crop_left"]) == (6, 6)
    w[7:10, 7:10] += 0.1
    p = crop_prior(fused, AttentionMap(w, "conv1", 0), 3, area_budget=0.1)
    assert (p.metadata["crop_top"], p.metadata["crop_left"]) == (7, 7)


def test_crop_64_image_brute_force():
    rng = np.random.default_rng(7)
    fused = FusedExample(torch.rand(3, 64, 64), "x#0", [])
    w = rng.normal(size=(64, 64))
    p = crop_prior(fused, AttentionMap(w, "conv1", 0), 4, area_budget=0.01)
    best = max(((w[t : t + 4, l : l + 4].sum(), -t, -l) for t in range(61) for l in range(61)))
    assert (p.metadata["crop_top"], p.metadata["crop_left"]) == (-best[1], -best[2])


# ---- fusion behaviour ----------------------------------------------------


def test_trace_is_consistent(fused_run):
    _, fused = fused_run
    for _, ls, lu, lf in fused.loss_trace:
        assert lf == pytest.approx(ls + fused.lam * lu, abs=1e-6, rel=1e-9)


def test_lambda_zero_reduces_style(fused_run, small_handle):
    hs, _ = fused_run
    f = fuse_prior(hs, small_handle, lam=0.0, epochs=3, seed=1)
    assert f.loss_trace[-1][1] < f.loss_trace[0][1]


def test_single_example_is_a_fixed_point(fused_run, small_handle):
    from dataclasses import replace

    hs, _ = fused_run
    one = replace(hs, images=hs.images[:1], labels=hs.labels[:1], indices=hs.indices[:1])
    # weight decay would pull pixels towards 0; without it the zero-loss start is held
    f = fuse_prior(one, small_handle, lam=0.0, epochs=5, weight_decay=0.0)
    assert f.loss_trace[0][3] == 0.0
    assert (f.pixels - hs.images[0]).abs().max() <= 1e-6


def test_fusion_cannot_beat_gram_variance_floor(fused_run, small_handle):
    """mean_k |G* - G_k|^2 >= mean_k |Gbar - G_k|^2 for any x*: the floor bounds the achievable reduction."""
    from biaspatch.prior_fusion import _grams, default_style_layers

    hs, fused = fused_run
    layers = default_style_layers(small_handle)
    with torch.no_grad():
        _, grams = _grams(small_handle, hs.images, layers)
    floor = sum(float((grams[l] - grams[l].mean(0)).pow(2).sum((-2, -1)).mean()) for l in layers)
    assert all(ls >= floor * (1 - 1e-5) for _, ls, _, _ in fused.loss_trace)
