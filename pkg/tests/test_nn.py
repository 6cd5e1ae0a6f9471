import numpy as np
import pytest
from hypothesis import given, strategies as st

from adexsbi.errors import BadMagicError, ChecksumMismatchError, ShapeError, TruncatedPayloadError
from adexsbi.nn import (Adam, BatchNorm1d, Conv1d, Linear, LrSchedule, MaxPool1d, Parameter,
                        ReLU, Sequential, Upsample, load_checkpoint, lr_at, mse_loss,
                        mse_loss_backward, save_checkpoint)

import gradsuite


@pytest.mark.parametrize("name", sorted(gradsuite.LAYER_CASES))
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(name, seed):
    assert gradsuite.LAYER_CASES[name](seed) < 1e-4


def test_conv_identity_kernel():
    conv = Conv1d(1, 1, 3, dtype=np.float64)
    conv.weight.data[:] = [[[0.0, 1.0, 0.0]]]
    x = np.random.default_rng(0).standard_normal((2, 10, 1))
    assert np.array_equal(conv.forward(x), x)


def test_conv_same_padding_reference():
    rng = np.random.default_rng(1)
    conv = Conv1d(2, 3, 5, rng, np.float64)
    conv.bias.data[:] = rng.standard_normal(3)
    x = rng.standard_normal((1, 9, 2))
    xp = np.pad(x[0], ((2, 2), (0, 0)))
    ref = np.array([[np.sum(xp[t:t + 5].T * conv.weight.data[o]) + conv.bias.data[o]
                     for o in range(3)] for t in range(9)])
    assert np.allclose(conv.forward(x)[0], ref)


def test_parameter_counts():
    assert Conv1d(1, 32, 5).num_parameters() == 192
    assert Conv1d(64, 128, 13).num_parameters() == 106624
    assert BatchNorm1d(32).num_parameters() == 64


def test_shape_errors():
    with pytest.raises(ShapeError):
        Conv1d(2, 3, 3).forward(np.zeros((1, 8, 1), np.float32))
    with pytest.raises(ShapeError):
        Conv1d(1, 1, 4)
    with pytest.raises(ShapeError):
        BatchNorm1d(2).forward(np.zeros((1, 8, 2), np.float32))
    with pytest.raises(ShapeError):
        mse_loss(np.zeros(3), np.zeros(4))


def test_batchnorm_normalizes_and_eval_is_affine():
    rng = np.random.default_rng(2)
    bn = BatchNorm1d(4, dtype=np.float64)
    x = rng.normal(3.0, 2.0, (5, 16, 4))
    y = bn.forward(x).reshape(-1, 4)
    assert np.allclose(y.mean(0), 0, atol=1e-5) and np.allclose(y.var(0), 1, atol=1e-5)
    bn.eval()
    a = bn.forward(x[:1])
    b = bn.forward(x)[:1]
    assert np.array_equal(a, b)  # no batch dependence


def test_pool_upsample_constant_roundtrip():
    x = np.full((2, 16, 3), 0.25)
    assert np.array_equal(Upsample().forward(MaxPool1d().forward(x)), x)


def test_maxpool_ties_go_left():
    pool = MaxPool1d()
    pool.forward(np.ones((1, 4, 1)))
    g = pool.backward(np.ones((1, 2, 1)))
    assert g[0, :, 0].tolist() == [1, 0, 1, 0]


def test_no_nans_on_unit_inputs():
    rng = np.random.default_rng(3)
    net = Sequential(Conv1d(1, 4, 5, rng), ReLU(), BatchNorm1d(4), MaxPool1d(),
                     Conv1d(4, 1, 3, rng), Upsample())
    for _ in range(1000):
        out = net.forward(rng.uniform(0, 1, (2, 32, 1)).astype(np.float32))
        assert np.all(np.isfinite(out))


def test_mse_values():
    t = np.random.default_rng(0).standard_normal((3, 8, 1))
    assert mse_loss(t, t) == 0.0
    assert mse_loss(t + 0.1, t) == pytest.approx(0.01)
    assert np.allclose(mse_loss_backward(t + 0.1, t), 2 * 0.1 / t.size)


# -- optimizer ---------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(10):
        opt.step()
    assert p.data.tolist() == [1.0, -2.0]


@given(st.floats(1e-3, 1e3), st.floats(1e-5, 1e-1))
def test_adam_first_step_magnitude_is_lr(g, lr):
    p = Parameter(np.array([0.0]))
    p.grad[:] = g
    Adam({"p": p}, lr=lr).step()
    assert abs(p.data[0]) == pytest.approx(lr * g / (g + 1e-8), rel=1e-9)  # ~lr


def test_adam_minimizes_quadratic():
    p = Parameter(np.array([1.0]))
    opt = Adam({"p": p}, lr=1e-2)
    for _ in range(2000):
        p.grad[:] = 2 * p.data
        opt.step()
    assert abs(p.data[0]) < 1e-3


def test_adam_state_roundtrip():
    p = Parameter(np.array([1.0, 2.0]))
    opt = Adam({"p": p}, lr=1e-2)
    p.grad[:] = [0.5, -1.0]
    opt.step()
    other = Adam({"p": Parameter(p.data.copy())}, lr=1e-2)
    other.load_state_dict(opt.state_dict())
    opt.step()
    other.params["p"].grad[:] = p.grad
    other.step()
    assert np.array_equal(other.params["p"].data, p.data)


def test_lr_schedule_values():
    s = LrSchedule()
    assert lr_at(s, 0, 1) == pytest.approx(1e-8)
    assert lr_at(s, 1000, 1) == pytest.approx(1e-8 + 0.5 * (1e-4 - 1e-8))
    assert lr_at(s, 2000, 70) == pytest.approx(1e-4)
    assert lr_at(s, 2000, 71) == pytest.approx(1e-4 * 0.94)
    assert lr_at(s, 10**6, 72) == pytest.approx(8.836e-5)


def test_compressed_schedule_keeps_total_decay():
    s = LrSchedule.compressed(30, 125)
    assert s.warmup_batches == 50 and s.decay_start_epoch == 14
    assert s.decay_factor ** 16 == pytest.approx(0.94 ** 80, rel=1e-9)


# -- checkpoint ------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    state = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.int64),
             "c": rng.standard_normal(7)}
    optim = {"t": np.array([3], dtype=np.int64), "m.a": rng.standard_normal((3, 4)).astype(np.float32)}
    save_checkpoint(tmp_path / "x.ckpt", state, optim)
    s2, o2 = load_checkpoint(tmp_path / "x.ckpt")
    for k in state:
        assert s2[k].dtype == state[k].dtype and s2[k].tobytes() == state[k].tobytes()
    assert o2["t"].tolist() == [3] and np.array_equal(o2["m.a"], optim["m.a"])


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"w": np.ones(100, dtype=np.float32)})
    data = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"X" + data[1:])
    with pytest.raises(BadMagicError):
        load_checkpoint(tmp_path / "magic")
    (tmp_path / "trunc").write_bytes(data[:60])
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(tmp_path / "trunc")
    flipped = bytearray(data)
    flipped[40] ^= 1
    (tmp_path / "flip").write_bytes(bytes(flipped))
    with pytest.raises(ChecksumMismatchError):
        load_checkpoint(tmp_path / "flip")


def test_linear_mask_blocks_gradient():
    mask = np.array([[1.0, 0.0], [1.0, 1.0]])
    lin = Linear(2, 2, mask=mask, dtype=np.float64)
    lin.forward(np.ones((3, 2)))
    lin.backward(np.ones((3, 2)))
    assert lin.weight.grad[0, 1] == 0.0
