import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from privoptics.data import AttributePair, DatasetSplit, SampleSet, synthesize_toy
from privoptics.models import ClassifierSpec
from privoptics.optics import SensorGeometry
from privoptics.training import (ConfigError, GapConfig, IsConfig, TrainConfig, TrainingDivergence,
                                 adversary_step, cross_entropy, gap_analyzer_loss, grid_points,
                                 is_contrastive_term, train_baseline, train_gap, train_is)

PAIR = AttributePair("blob_side", "stripe_orient")
SPEC = ClassifierSpec()
GEOM = SensorGeometry()


def test_cross_entropy_values():
    assert cross_entropy(torch.zeros(1, 2), torch.tensor([1])).item() == pytest.approx(math.log(2))
    assert cross_entropy(torch.tensor([[20.0, -20.0]]), torch.tensor([0])).item() == pytest.approx(0, abs=1e-12)
    # -log softmax_2 of (1, -1) = 2 + log(1 + e^-2)
    got = cross_entropy(torch.tensor([[1.0, -1.0]], dtype=torch.float64), torch.tensor([1])).item()
    assert got == pytest.approx(2 + math.log1p(math.exp(-2)), abs=1e-12)
    assert got == pytest.approx(2.1269, abs=1e-4)


def test_cross_entropy_errors():
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(0, 2), torch.zeros(0, dtype=torch.long))
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(2, 2), torch.zeros(3, dtype=torch.long))


@given(st.lists(st.tuples(st.floats(-30, 30), st.floats(-30, 30), st.integers(0, 1)), min_size=1, max_size=20))
def test_cross_entropy_nonnegative(rows):
    logits = torch.tensor([[a, b] for a, b, _ in rows], dtype=torch.float64)
    labels = torch.tensor([y for *_, y in rows])
    assert cross_entropy(logits, labels).item() >= 0


def test_gap_loss_values():
    assert gap_analyzer_loss(0.7, math.log(2), 1.0) == pytest.approx(0.0069, abs=1e-4)
    assert gap_analyzer_loss(0.42, 5.0, 0.0) == 0.42


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.001, 10), st.floats(0.001, 1))
def test_gap_loss_monotone_and_gradient(ce_d, ce_s, lam, bump):
    assert gap_analyzer_loss(ce_d, ce_s + bump, lam) < gap_analyzer_loss(ce_d, ce_s, lam)
    s = torch.tensor(ce_s, dtype=torch.float64, requires_grad=True)
    gap_analyzer_loss(torch.tensor(ce_d, dtype=torch.float64), s, lam).backward()
    assert s.grad.item() == pytest.approx(-lam)


def test_contrastive_hand_values():
    f = torch.tensor([[0.0, 0.0], [3.0, 4.0]])
    assert is_contrastive_term(f, torch.tensor([1, 1])).item() == pytest.approx(2.5)
    assert is_contrastive_term(f, torch.tensor([0, 1])).item() == pytest.approx(-2.5)
    assert is_contrastive_term(torch.ones(5, 3), torch.tensor([0, 1, 0, 1, 1])).item() == 0.0
    with pytest.raises(ValueError):
        is_contrastive_term(torch.ones(1, 3), torch.tensor([0]))


def test_contrastive_zero_distance_gradient_is_zero():
    f = torch.ones(4, 1, 3, 3, requires_grad=True)
    is_contrastive_term(f, torch.tensor([0, 1, 0, 1])).backward()
    assert torch.all(f.grad == 0) and torch.isfinite(f.grad).all()


def test_contrastive_cap():
    f = torch.tensor([[0.0, 0.0], [3.0, 4.0]])
    assert is_contrastive_term(f, torch.tensor([1, 1]), distance_cap=2.0).item() == pytest.approx(1.0)


@given(st.integers(2, 9), st.integers(0, 10**6))
def test_contrastive_permutation_invariant(b, seed):
    gen = torch.Generator().manual_seed(seed)
    f = torch.randn(b, 1, 4, 4, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 2, (b,), generator=gen)
    p = torch.randperm(b, generator=gen)
    assert is_contrastive_term(f, y).item() == pytest.approx(is_contrastive_term(f[p], y[p]).item(), rel=1e-9, abs=1e-12)


def test_adversary_step_freezes_and_descends():
    torch.manual_seed(0)
    head = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(16, 2))
    opt = torch.optim.SGD(head.parameters(), lr=1e-3)
    feats = torch.randn(32, 1, 4, 4, requires_grad=True)
    kernel_like = torch.nn.Parameter(torch.rand(3, 3))
    before = kernel_like.detach().clone()
    y = (feats.detach().flatten(1)[:, 0] > 0).long()
    losses = [adversary_step(feats, y, head, opt) for _ in range(20)]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
    assert feats.grad is None
    assert torch.equal(kernel_like.detach(), before)


def test_config_validation():
    with pytest.raises(ConfigError):
        GapConfig(lam=-0.1)
    with pytest.raises(ConfigError):
        GapConfig(n_adv_steps=0)
    with pytest.raises(ConfigError):
        IsConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    assert IsConfig().batch_size == 32 and GapConfig().batch_size == 64
    assert GapConfig().epochs == 100 and GapConfig().lr == 0.002


def test_grid_points():
    assert len(grid_points("gap", GapConfig())) == 15
    lams = [c.lam for c in grid_points("is", IsConfig())]
    assert lams == [0.01, 0.1, 0.5, 1.0, 2.0]
    with pytest.raises(ConfigError):
        grid_points("baseline", TrainConfig())


@pytest.fixture(scope="module")
def small():
    return synthesize_toy(200, 0)


def _box_hook(seen):
    def hook(optics, step):
        w = optics.weight.detach()
        assert 0.0 <= w.min().item() and w.max().item() <= 1.0, f"box violated at step {step}"
        seen.append(step)
    return hook


@pytest.mark.parametrize("strategy", ["baseline", "gap", "is"])
def test_box_feasible_after_every_step(small, strategy):
    seen = []
    kw = dict(step_hook=_box_hook(seen))
    if strategy == "baseline":
        s = train_baseline(small, "blob_side", SPEC, GEOM, TrainConfig(epochs=2, lr=0.05), **kw)
    elif strategy == "gap":
        s = train_gap(small, PAIR, SPEC, SPEC, GEOM, GapConfig(epochs=2, lr=0.05, lam=2.0, n_adv_steps=1), **kw)
    else:
        s = train_is(small, PAIR, SPEC, GEOM, IsConfig(epochs=2, lr=0.05, lam=2.0), **kw)
    assert len(seen) == len(s.batch_log) > 0
    assert len(s.history) == 2
    assert 0 <= s.kernel.weights.min() and s.kernel.weights.max() <= 1


def test_gap_history_streams(small):
    s = train_gap(small, PAIR, SPEC, SPEC, GEOM, GapConfig(epochs=1, n_adv_steps=2))
    row = s.history[0]
    for key in ("ce_desired", "ce_sensitive", "adversary", "val_desired_acc", "val_adversary_acc"):
        assert key in row
    assert s.adversary is not None


def test_lambda_zero_degeneracy(small):
    base = train_baseline(small, "blob_side", SPEC, GEOM, TrainConfig(epochs=2, seed=3))
    gap = train_gap(small, PAIR, SPEC, SPEC, GEOM, GapConfig(lam=0.0, n_adv_steps=1, epochs=2, seed=3))
    is_ = train_is(small, PAIR, SPEC, GEOM, IsConfig(lam=0.0, epochs=2, seed=3, batch_size=64))
    b = [r["ce_desired"] for r in base.batch_log]
    assert np.max(np.abs(np.array(b) - [r["loss"] for r in gap.batch_log])) <= 1e-6
    assert np.max(np.abs(np.array(b) - [r["loss"] for r in is_.batch_log])) <= 1e-6
    assert base.kernel.fingerprint() == gap.kernel.fingerprint() == is_.kernel.fingerprint()


def test_training_deterministic(small):
    a = train_baseline(small, "blob_side", SPEC, GEOM, TrainConfig(epochs=1, seed=1))
    b = train_baseline(small, "blob_side", SPEC, GEOM, TrainConfig(epochs=1, seed=1))
    assert a.kernel.fingerprint() == b.kernel.fingerprint()
    assert a.history[0]["ce_desired"] == b.history[0]["ce_desired"]


def test_divergence_guard(small):
    bad = small.train.images.copy()
    bad[:] = np.nan
    poisoned = DatasetSplit(SampleSet(bad, small.train.labels, small.train.ids), small.val, small.test)
    with pytest.raises(TrainingDivergence, match="non-finite"):
        train_baseline(poisoned, "blob_side", SPEC, GEOM, TrainConfig(epochs=1))


def test_missing_attribute(small):
    with pytest.raises(KeyError):
        train_gap(small, AttributePair("blob_side", "Male"), SPEC, SPEC, GEOM, GapConfig(epochs=1))
