import numpy as np
import pytest
import torch
from PIL import Image

from privoptics.attacks import (AttackReport, KernelMutated, _check_frozen, pixel_variance, reconstruct,
                                save_grid, sensor_features, train_post_adversary, train_reconstructor)
from privoptics.data import synthesize_toy, trivial_accuracy
from privoptics.models import ClassifierSpec, ReconstructorSpec, build_reconstructor
from privoptics.optics import OpticalKernel, SensorGeometry, init_kernel
from privoptics.training import TrainConfig


@pytest.fixture(scope="module")
def toy():
    return synthesize_toy(400, 1)


def test_zero_kernel_attacker_is_trivial(toy):
    kernel = OpticalKernel(np.zeros((100, 100)), SensorGeometry())
    rep = train_post_adversary(kernel, toy, "stripe_orient", ClassifierSpec(), TrainConfig(epochs=3))
    floor = trivial_accuracy(toy.test.labels_of("stripe_orient"))
    assert abs(rep.attacker_accuracy - floor) <= 0.02
    assert rep.kernel_fingerprint == kernel.fingerprint()
    assert len(rep.history) == 3


def test_attack_leaves_kernel_untouched(toy):
    kernel = init_kernel(SensorGeometry(), 2)
    before = kernel.weights.copy()
    rep = train_post_adversary(kernel, toy, "stripe_orient", ClassifierSpec(), TrainConfig(epochs=1))
    np.testing.assert_array_equal(kernel.weights, before)
    assert 0.0 <= rep.attacker_accuracy <= 1.0
    assert rep.attacker_accuracy >= rep.trivial_accuracy - 0.02


def test_mutation_detected():
    kernel = init_kernel(SensorGeometry(), 0)
    with pytest.raises(KernelMutated):
        _check_frozen(kernel, init_kernel(SensorGeometry(), 1).fingerprint())


def test_report_json_roundtrip():
    rep = AttackReport("Male", 0.75, 0.7, 0.613, "ab" * 32, {"backbone": "small-cnn"}, {"epochs": 3},
                       [{"epoch": 0, "loss": 0.5}], "cd" * 32)
    assert AttackReport.from_json(rep.to_json()) == rep


def test_pixel_variance_is_mean_image_mse(toy):
    imgs = toy.val.images.astype(np.float64)
    mse_of_mean = ((imgs - imgs.mean(0)) ** 2).mean()
    assert pixel_variance(toy.val) == pytest.approx(mse_of_mean, rel=1e-9)


def test_identity_encoder_reconstructs(toy):
    g = SensorGeometry(kernel_size=(1, 1), input_size=(64, 64), pad=0, stride=1)
    kernel = OpticalKernel(np.ones((1, 1)), g)
    decoder, info = train_reconstructor(kernel, toy, ReconstructorSpec(channels=8),
                                        TrainConfig(epochs=8, lr=0.002, batch_size=16))
    assert info["val_mse"] < 0.05 * info["val_pixel_variance"]
    assert info["kernel_fingerprint"] == kernel.fingerprint()


def test_reconstruct_contract():
    decoder = build_reconstructor(ReconstructorSpec(channels=2), SensorGeometry(), 0)
    feats = np.random.default_rng(0).uniform(0, 0.1, (3, 32, 32)).astype(np.float32)
    out = reconstruct(decoder, feats)
    assert out.shape == (3, 64, 64) and out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(out, reconstruct(decoder, feats))
    assert reconstruct(decoder, feats[0]).shape == (64, 64)
    assert reconstruct(decoder, torch.zeros(1, 1, 32, 32)).shape == (1, 64, 64)


def test_grid_layout(tmp_path):
    a = np.zeros((2, 4, 4))
    b = np.ones((2, 4, 4))
    path = save_grid(a, b, tmp_path / "g.png", gap=1)
    img = np.asarray(Image.open(path))
    assert img.shape == (2 * 4 + 1, 2 * 4 + 1)
    assert img[:4, :4].max() == 0 and img[:4, 5:].min() == 255
    with pytest.raises(ValueError):
        save_grid(a, b[:1], tmp_path / "bad.png")


def test_sensor_features_shape(toy):
    f = sensor_features(init_kernel(SensorGeometry(), 0), toy.val)
    assert f.shape == (len(toy.val), 1, 32, 32)
