import numpy as np
import pytest

from channelkit import zoo
from channelkit.checkpoint import load_checkpoint, save_checkpoint
from channelkit.errors import FormatError
from channelkit.rng import seeded_normal


def test_round_trip_bit_identical_logits(tmp_path):
    spec = zoo.build_model_spec("v3", 0.125, 10, 32)
    net = zoo.build_network(spec, 3)
    x = seeded_normal((4, 3, 32, 32), 0)
    net.forward(x, "train", 0)
    net.update_running_stats()
    before = net.forward(x)
    save_checkpoint(tmp_path / "c.cnkt", net.state())
    other = zoo.build_network(spec, 99)
    other.load_state(load_checkpoint(tmp_path / "c.cnkt"))
    assert np.array_equal(other.forward(x), before)


def test_blocks_preserved(tmp_path):
    blocks = [("a", np.arange(6.0).reshape(2, 3)), ("b.c", np.array([np.pi])), ("s", np.zeros((0,)))]
    save_checkpoint(tmp_path / "x", blocks)
    got = load_checkpoint(tmp_path / "x")
    assert list(got) == ["a", "b.c", "s"]
    for name, arr in blocks:
        assert np.array_equal(got[name], arr) and got[name].shape == arr.shape


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
    (lambda b: b[:4] + b"\x07\0\0\0" + b[8:], "version"),
])
def test_corrupt_files(tmp_path, mutate, match):
    path = tmp_path / "c"
    save_checkpoint(path, [("w", np.ones((2, 2)))])
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=match):
        load_checkpoint(path)


def test_load_state_rejects_other_model(tmp_path):
    a = zoo.build_network(zoo.build_model_spec("v1", 0.125, 10, 32))
    b = zoo.build_network(zoo.build_model_spec("v3", 0.125, 10, 32))
    save_checkpoint(tmp_path / "a", a.state())
    with pytest.raises(FormatError):
        b.load_state(load_checkpoint(tmp_path / "a"))
