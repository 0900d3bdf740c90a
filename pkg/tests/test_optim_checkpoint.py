import numpy as np
import pytest

from mdfn.checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from mdfn.optim import SGD, grad_norm
from mdfn.tensor import Tensor, backward, tensor_sum


def param(value):
    return Tensor(np.array(value, dtype=float), requires_grad=True)


def test_plain_gradient_step():
    p = param([1.0, 2.0])
    opt = SGD([p], lr=0.1, momentum=0.0, weight_decay=0.0)
    p.grad = np.ones(2)
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, 1.9])


def test_decay_only_shrinks_toward_zero():
    p = param([1.0, -2.0])
    opt = SGD([p], lr=0.1, momentum=0.0, weight_decay=0.5)
    opt.zero_grad()
    opt.step()
    np.testing.assert_allclose(p.data, [0.95, -1.9])


def test_two_momentum_steps_hand_unrolled():
    p = param([1.0])
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.01)
    g1, g2 = 0.5, -0.2
    p.grad = np.array([g1])
    opt.step()
    v1 = -0.1 * (g1 + 0.01 * 1.0)
    x1 = 1.0 + v1
    p.grad = np.array([g2])
    opt.step()
    v2 = 0.9 * v1 - 0.1 * (g2 + 0.01 * x1)
    assert p.data[0] == pytest.approx(x1 + v2, abs=1e-15)


def test_missing_gradient_is_an_error():
    with pytest.raises(RuntimeError):
        SGD([param([1.0])], lr=0.1).step()


def test_disconnected_parameter_gets_zero_gradient():
    used, unused = param([1.0, 2.0]), param([3.0])
    opt = SGD([used, unused], lr=0.1)
    opt.zero_grad()
    backward(tensor_sum(used * used))
    np.testing.assert_array_equal(unused.grad, [0.0])
    assert grad_norm([used, unused]) == pytest.approx(np.sqrt(4 + 16))


def test_velocity_shapes_checked():
    opt = SGD([param([1.0, 2.0])], lr=0.1)
    with pytest.raises(ValueError):
        opt.load_velocity([np.zeros(3)])


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": np.array([np.pi, -0.0, 1e-310, np.inf]),
              "empty": np.zeros((0, 2))}
    save_checkpoint(tmp_path / "x.ckpt", arrays, {"iteration": 7})
    loaded, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"iteration": 7}
    for k, v in arrays.items():
        assert loaded[k].shape == v.shape
        assert loaded[k].tobytes() == v.astype("<f8").tobytes()
    man = read_manifest(tmp_path / "x.ckpt")
    assert [t["name"] for t in man["tensors"]] == ["a", "b", "empty"]
    assert man["tensors"][1]["offset"] == 96


def test_checkpoint_rejects_foreign_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")


def test_truncated_checkpoint(tmp_path, rng):
    save_checkpoint(tmp_path / "x.ckpt", {"a": rng.standard_normal(10)})
    raw = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "x.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")
