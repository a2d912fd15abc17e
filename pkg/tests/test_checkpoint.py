import numpy as np
import pytest
import torch

from privoptics.checkpoint import (IntegrityError, load_decoder, load_kernel, load_system, save_decoder,
                                   save_kernel, save_system)
from privoptics.data import AttributePair, synthesize_toy
from privoptics.models import ClassifierSpec, ReconstructorSpec, build_reconstructor
from privoptics.optics import SensorGeometry, init_kernel
from privoptics.training import GapConfig, train_gap


@pytest.fixture(scope="module")
def system():
    data = synthesize_toy(40, 0)
    return train_gap(data, AttributePair("blob_side", "stripe_orient"), ClassifierSpec(), ClassifierSpec(),
                     SensorGeometry(), GapConfig(epochs=1, batch_size=16))


def test_system_roundtrip(tmp_path, system):
    path = save_system(tmp_path / "s.safetensors", system, ClassifierSpec(), ClassifierSpec(), "f" * 64)
    back, meta = load_system(path)
    assert back.kernel.fingerprint() == system.kernel.fingerprint()
    assert meta["config_fingerprint"] == "f" * 64 and meta["strategy"] == "gap"
    x = torch.rand(2, 1, 32, 32)
    with torch.no_grad():
        torch.testing.assert_close(back.analyzer.eval()(x), system.analyzer.eval()(x))
        torch.testing.assert_close(back.adversary.eval()(x), system.adversary.eval()(x))
    assert back.history == system.history
    k, _ = load_kernel(path)
    assert k.fingerprint() == system.kernel.fingerprint()


def _flip_byte(path, offset_from_end=10):
    raw = bytearray(path.read_bytes())
    raw[-offset_from_end] ^= 0xFF
    path.write_bytes(bytes(raw))


def test_corruption_detected(tmp_path):
    path = save_kernel(tmp_path / "k.safetensors", init_kernel(SensorGeometry(), 0))
    _flip_byte(path)
    with pytest.raises(IntegrityError):
        load_kernel(path)


def test_header_garbage_detected(tmp_path):
    path = save_kernel(tmp_path / "k.safetensors", init_kernel(SensorGeometry(), 0))
    path.write_bytes(b"\x00" * 3 + path.read_bytes()[3:])
    with pytest.raises(IntegrityError):
        load_kernel(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_kernel(tmp_path / "nope.safetensors")


def test_kind_checked(tmp_path):
    path = save_kernel(tmp_path / "k.safetensors", init_kernel(SensorGeometry(), 0))
    with pytest.raises(IntegrityError):
        load_system(path)
    with pytest.raises(IntegrityError):
        load_decoder(path)


def test_decoder_roundtrip(tmp_path):
    spec = ReconstructorSpec(channels=2)
    dec = build_reconstructor(spec, SensorGeometry(), 0)
    dec.fit_input(torch.rand(4, 1, 32, 32))
    path = save_decoder(tmp_path / "d.safetensors", dec, spec, {"config_fingerprint": "x"})
    back, meta = load_decoder(path)
    x = torch.rand(1, 1, 32, 32)
    with torch.no_grad():
        torch.testing.assert_close(back(x), dec.eval()(x))
    assert meta["config_fingerprint"] == "x"
