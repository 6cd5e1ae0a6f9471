import numpy as np
import pytest

from adexsbi import autoencoder as A
from adexsbi.errors import ShapeError, TrainingError
from adexsbi.nn import LrSchedule, ReLU

import gradsuite
import layer_table


def test_parameter_total_and_rows():
    model = A.build(0)
    assert model.num_parameters() == layer_table.TOTAL
    assert [(n, s) for n, s, _ in layer_table.ROWS] == model.shape_probe()
    assert [(n, p) for n, _, p in layer_table.ROWS if p] == model.layer_parameter_counts()


def test_activation_layout():
    model = A.build(0)
    relu_after = [isinstance(b, ReLU) for a, b in zip(model.decoder, list(model.decoder)[1:])]
    # every decoder conv but the last is followed by a ReLU
    assert relu_after[-2] is False and sum(relu_after) == 4


def test_encode_shapes_and_mode():
    model = A.build(1)
    x = np.random.default_rng(0).uniform(0, 1, (3, 1024)).astype(np.float32)
    assert model.eval().encode(x).shape == (3, 32)
    assert A.encode(model, x[0]).shape == (32,)
    assert A.reconstruct(model, x[0]).shape == (1024,)
    with pytest.raises(ShapeError):
        model.encode(np.zeros(1000))


def test_full_model_gradient():
    assert gradsuite.autoencoder_case(0) < 1e-4


def test_save_load_bit_exact(tmp_path):
    model = A.build(2)
    model.train().forward(np.random.default_rng(0).uniform(0, 1, (4, 1024)))  # move BN stats
    model.save(tmp_path / "m.ckpt")
    back = A.Autoencoder.load(tmp_path / "m.ckpt")
    for k, v in model.state_dict().items():
        assert back.state_dict()[k].tobytes() == v.tobytes()
    x = np.random.default_rng(1).uniform(0, 1, (2, 1024)).astype(np.float32)
    assert np.array_equal(model.eval().encode(x), back.encode(x))


def _toy_traces(n, seed):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 1, 1024)
    f = rng.uniform(2, 6, (n, 1))
    return (0.5 + 0.3 * np.sin(2 * np.pi * f * t)).astype(np.float32)


def test_training_reduces_loss_and_checkpoints(tmp_path):
    tr, va = _toy_traces(96, 0), _toy_traces(32, 1)
    model = A.build(0)
    rep = A.train(model, tr, va, epochs=3, batch_size=16, schedule=LrSchedule(base_lr=1e-3,
                  warmup_batches=2), seed=0, checkpoint_dir=tmp_path, log_csv=tmp_path / "log.csv",
                  keep_first=True)
    assert rep.val_loss[-1] < rep.val_loss[0]
    assert rep.best_val_loss == min(rep.val_loss)
    assert (tmp_path / "best.ckpt").is_file() and (tmp_path / "epoch1.ckpt").is_file()
    rows = (tmp_path / "log.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,val_loss,val_std,lr" and len(rows) == 4
    best = A.Autoencoder.load(tmp_path / "best.ckpt")
    assert np.mean(A.evaluate(best, va, 16)) == pytest.approx(rep.best_val_loss, rel=1e-5)


def test_training_is_reproducible():
    tr, va = _toy_traces(64, 0), _toy_traces(16, 1)
    runs = []
    for _ in range(2):
        runs.append(A.train(A.build(0), tr, va, epochs=2, batch_size=16, seed=3).val_loss)
    assert runs[0] == runs[1]


def test_non_finite_loss_raises():
    tr = _toy_traces(32, 0)
    tr[3, 10] = np.nan
    with pytest.raises(TrainingError):
        A.train(A.build(0), tr, tr[:16], epochs=1, batch_size=16)
