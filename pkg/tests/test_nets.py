"""Network construction, forward shapes, and checkpoint file format."""

import struct

import numpy as np
import pytest

from purifybench import tensor as T
from purifybench.nets import (MAGIC, ArchitectureMismatchError, BadMagicError,
                              ClassifierNet, EnergyNet, TruncatedCheckpointError,
                              VersionMismatchError, load_checkpoint, make_net,
                              save_checkpoint)
from purifybench.rng import Rng


def _x(b=3, seed=1, dtype=np.float64):
    return T.Tensor(Rng(seed, "x").uniform((b, 1, 16, 16)).astype(dtype))


@pytest.mark.parametrize("preset", ["energy-desk16", "energy-light16", "energy-mini16"])
def test_energy_output_shape(preset):
    net = make_net(preset).initialize(Rng(7, preset))
    e = net.energy(_x(5))
    assert e.data.shape == (5,)
    assert isinstance(net, EnergyNet)


def test_classifier_shapes_and_features():
    net = make_net("clf-desk16").initialize(Rng(7, "c"))
    assert isinstance(net, ClassifierNet)
    logits = net.logits(_x(4))
    assert logits.data.shape == (4, 4)
    feats = net.features(_x(4))
    assert feats.data.shape == (4, 64)


def test_initialize_deterministic_and_biases_zero():
    a = make_net("energy-mini16").initialize(Rng(3, "i"))
    b = make_net("energy-mini16").initialize(Rng(3, "i"))
    c = make_net("energy-mini16").initialize(Rng(4, "i"))
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
        if name.endswith("_b"):
            assert not a.params[name].data.any()
    assert not np.array_equal(a.params["conv0_w"].data, c.params["conv0_w"].data)


def test_input_shape_validation():
    net = make_net("energy-mini16").initialize(Rng(3, "i"))
    with pytest.raises(T.ShapeError):
        net.energy(T.Tensor(np.ones((2, 1, 8, 8))))


def test_astype_roundtrip():
    net = make_net("energy-mini16").initialize(Rng(3, "i"))
    n32 = net.astype(np.float32)
    assert n32.dtype == np.float32
    e64 = net.energy(_x(2)).data
    e32 = n32.energy(_x(2, dtype=np.float32)).data
    assert np.allclose(e32, e64, atol=1e-3)


def test_checkpoint_roundtrip_bitwise(tmp_path):
    net = make_net("clf-desk16").initialize(Rng(11, "ck"))
    p = tmp_path / "net.ckpt"
    save_checkpoint(net, p, step=1234, phase=1)
    loaded, step, phase = load_checkpoint(p, expect_kind="classifier")
    assert step == 1234 and phase == 1
    assert loaded.descriptor == net.descriptor
    for name in net.params:
        assert np.array_equal(loaded.params[name].data, net.params[name].data)


def test_checkpoint_layout_fields(tmp_path):
    net = make_net("energy-mini16").initialize(Rng(5, "ck"))
    p = tmp_path / "net.ckpt"
    save_checkpoint(net, p, step=7, phase=0)
    blob = p.read_bytes()
    assert blob[:8] == MAGIC
    assert struct.unpack("<I", blob[8:12])[0] == 1            # version
    dlen = struct.unpack("<H", blob[12:14])[0]
    assert blob[14:14 + dlen].decode() == net.descriptor
    assert struct.unpack("<Q", blob[-9:-1])[0] == 7           # trailing step
    assert blob[-1] == 0                                      # phase byte


def test_checkpoint_error_cases(tmp_path):
    net = make_net("energy-mini16").initialize(Rng(5, "ck"))
    p = tmp_path / "net.ckpt"
    save_checkpoint(net, p)
    blob = bytearray(p.read_bytes())

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTMAGIC" + bytes(blob[8:]))
    with pytest.raises(BadMagicError):
        load_checkpoint(bad)

    ver = bytearray(blob)
    ver[8:12] = struct.pack("<I", 99)
    bad.write_bytes(bytes(ver))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(bad)

    bad.write_bytes(bytes(blob[:len(blob) // 2]))
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(bad)

    with pytest.raises(ArchitectureMismatchError):
        load_checkpoint(p, expect_kind="classifier")


def test_kind_constructor_mismatch():
    with pytest.raises(ArchitectureMismatchError):
        EnergyNet("clf-desk16")
    with pytest.raises(ArchitectureMismatchError):
        ClassifierNet("energy-desk16")
