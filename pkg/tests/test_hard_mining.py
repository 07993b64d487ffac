import numpy as np
import pytest
import torch
from torch import nn

from biaspatch.errors import ValidationError
from biaspatch.hard_mining import HardExampleSet, mine_hard_examples
from biaspatch.model_zoo import ClassifierHandle


class RowLogits(nn.Module):
    """Logits are read straight off the first pixel row, so tests control them exactly."""

    def forward(self, x):
        return x[:, 0, 0, :4] * 10.0


def _handle():
    return ClassifierHandle(RowLogits(), 4, (2, 4), [])


def _images(logit_rows):
    x = torch.zeros(len(logit_rows), 3, 2, 4)
    x[:, 0, 0, :] = torch.tensor(logit_rows, dtype=torch.float32) / 10.0
    return x


def _oracle(logit_rows, labels, count, criterion, thr):
    picked = []
    for i, (row, y) in enumerate(zip(logit_rows, labels)):
        p = np.exp(np.asarray(row, np.float64) - max(row))
        p /= p.sum()
        wrong = int(np.argmax(row)) != y
        low = p[y] < thr
        ok = {"misclassified": wrong, "low_confidence": low, "union": wrong or low}[criterion]
        if ok:
            picked.append((p[y], i))
    picked.sort()
    return [i for _, i in picked[:count]]


@pytest.mark.parametrize("criterion", ["misclassified", "low_confidence", "union"])
def test_selection_matches_brute_force(criterion):
    rng = np.random.default_rng(0)
    rows = (rng.random((200, 4)) * 6).round(2).tolist()
    labels = rng.integers(0, 4, 200).tolist()
    hs = mine_hard_examples(_handle(), _images(rows), torch.tensor(labels), count=30, criterion=criterion, confidence_threshold=0.5)
    assert hs.indices == _oracle(rows, labels, 30, criterion, 0.5)
    assert torch.all(hs.confidences[1:] >= hs.confidences[:-1])


def test_ties_broken_by_index():
    rows = [[0, 0, 0, 0]] * 6
    hs = mine_hard_examples(_handle(), _images(rows), torch.tensor([0, 1, 2, 3, 0, 1]), count=4)
    assert hs.indices == [0, 1, 2, 3]


def test_shortage_is_reported_not_raised():
    rows = [[5, 0, 0, 0], [0, 5, 0, 0], [0, 0, 5, 0]]
    hs = mine_hard_examples(_handle(), _images(rows), torch.tensor([0, 1, 3]), count=50)
    assert len(hs) == 1
    assert hs.shortage == {"requested": 50, "found": 1}


def test_threshold_one_selects_everything():
    rows = [[50, 0, 0, 0], [0, 50, 0, 0]]
    hs = mine_hard_examples(_handle(), _images(rows), torch.tensor([0, 1]), count=5, criterion="low_confidence", confidence_threshold=1.0)
    assert len(hs) == 2


def test_invalid_arguments():
    x = _images([[1, 0, 0, 0]])
    with pytest.raises(ValidationError):
        mine_hard_examples(_handle(), x[:0], torch.tensor([], dtype=torch.long))
    with pytest.raises(ValidationError):
        mine_hard_examples(_handle(), x, torch.tensor([0]), criterion="weird")
    with pytest.raises(ValidationError):
        mine_hard_examples(_handle(), x, torch.tensor([0]), confidence_threshold=0.0)


def test_save_load_round_trip(tmp_path, small_handle, small_data):
    d = small_data["val"]
    hs = mine_hard_examples(small_handle, d.images, d.labels, count=20, source_split="val")
    hs.save(tmp_path)
    back = HardExampleSet.load(tmp_path)
    assert back.indices == hs.indices
    assert torch.equal(back.images, hs.images) and torch.equal(back.labels, hs.labels)
    assert back.source_split == "val" and back.criterion == "union"


def test_mining_on_trained_model(small_handle, small_data):
    d = small_data["val"]
    hs = mine_hard_examples(small_handle, d.images, d.labels, count=20)
    assert len(hs) == 20 and len(hs.distinct_labels) >= 2
    assert all((p != y) or (c < 0.5) for p, y, c in zip(hs.predictions, hs.labels, hs.confidences))
