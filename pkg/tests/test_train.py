import struct

import numpy as np
import pytest

from icnt.backbone import BackboneConfig
from icnt.data import LoadedSplit, load_split, scan_image_folder, split_dataset
from icnt.head import HeadConfig, Model, ModelConfig
from icnt.tensor import Tensor
from icnt.train import (
    AdamState,
    CheckpointError,
    EpochLog,
    TrainConfig,
    adam_step,
    fit,
    load_checkpoint,
    read_epoch_csv,
    run_epoch,
    save_checkpoint,
    select_best,
    write_epoch_csv,
)


def small_model(seed=0, n_class=3):
    cfg = ModelConfig("convnext", 32, BackboneConfig(1, [1, 1, 1, 1], [4, 4, 8, 8]), HeadConfig(n_class=n_class))
    return Model.init(cfg, np.random.default_rng(seed))


@pytest.fixture(scope="module")
def splits(small_root):
    idx = scan_image_folder(small_root)
    tr, va, te = split_dataset(idx)
    return load_split(tr, 32), load_split(va, 32), load_split(te, 32)


def test_adam_zero_grad_no_move():
    p = {"w": Tensor(np.array([1.0, -2.0]))}
    adam_step(p, AdamState(), TrainConfig(learning_rate=0.1), {"w": np.zeros(2)})
    assert p["w"].data.tolist() == [1.0, -2.0]


def test_adam_first_step_is_lr_sign():
    p = {"w": Tensor(np.array([0.0, 0.0, 0.0]), dtype=np.float64)}
    adam_step(p, AdamState(), TrainConfig(learning_rate=0.01), {"w": np.array([3.0, -0.5, 1e-3])})
    np.testing.assert_allclose(p["w"].data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_minimizes_square():
    p = {"w": Tensor(np.array([1.0]), dtype=np.float64)}
    st, cfg = AdamState(), TrainConfig(learning_rate=0.1)
    for step in range(200):
        adam_step(p, st, cfg, {"w": 2 * p["w"].data})
        if abs(p["w"].item()) < 0.1:
            break
    assert abs(p["w"].item()) < 0.1
    assert st.t == step + 1 and (st.v["w"] >= 0).all()


def test_adam_tiny_lr_keeps_params():
    p = {"w": Tensor(np.array([0.5]), dtype=np.float64)}
    adam_step(p, AdamState(), TrainConfig(learning_rate=1e-300), {"w": np.array([4.0])})
    assert p["w"].item() == 0.5


def test_adam_nan_names_param():
    p = {"layer.weight": Tensor(np.ones(2))}
    with pytest.raises(FloatingPointError, match="layer.weight"):
        adam_step(p, AdamState(), TrainConfig(), {"layer.weight": np.array([np.nan, 0.0])})


def test_train_config_validation():
    for kw in ({"learning_rate": 0}, {"beta1": 1.0}, {"epochs": 0}, {"worker_threads": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_select_best():
    assert select_best([0.5, 0.9, 0.7]) == 2
    assert select_best([0.8, 0.8]) == 1


def test_eval_epoch_deterministic(splits):
    m = small_model()
    a = run_epoch(m, splits[0], TrainConfig())
    b = run_epoch(m, splits[0], TrainConfig())
    assert a == b


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_untrained_accuracy_near_chance(splits, seed):
    cfg = ModelConfig("convnext", 32, BackboneConfig(1, [1, 1, 1, 1], [4, 4, 8, 8]), HeadConfig(n_class=3))
    big = LoadedSplit(
        np.concatenate([s.images for s in splits]), np.concatenate([s.labels for s in splits]),
        [], splits[0].class_names,
    )
    acc = run_epoch(Model.init(cfg, np.random.default_rng(seed)), big, TrainConfig()).acc
    assert 0.05 <= acc <= 0.60


def test_single_batch_loss_decreases(splits):
    tr = splits[0]
    first = [int(np.flatnonzero(tr.labels == c)[0]) for c in range(3)]
    idx = np.array(first + [first[0] + 1])  # one batch, 3 classes
    one = LoadedSplit(tr.images[idx], tr.labels[idx], [tr.paths[i] for i in idx], tr.class_names)
    m = small_model(1)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4)
    state, rng = AdamState(), np.random.default_rng(0)
    losses = [run_epoch(m, one, cfg, "train", rng, state, e).loss for e in range(5)]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_class_count_mismatch(splits):
    with pytest.raises(ValueError, match="classes"):
        run_epoch(small_model(n_class=4), splits[0], TrainConfig())


def test_nan_loss_reports_batch(splits):
    m = small_model()
    m.params["cls.fc2.bias"].data[:] = np.nan
    with pytest.raises(FloatingPointError, match="batch"):
        run_epoch(m, splits[1], TrainConfig())


def test_fit_contract(splits, tmp_path):
    m = small_model()
    cfg = TrainConfig(learning_rate=1e-3, epochs=3)
    seen = []
    res = fit(m, splits[0], splits[1], cfg, tmp_path / "e.csv", seen.append)
    assert len(res.logs) == 3 == len(seen)
    accs = [e.val_acc for e in res.logs]
    assert res.best_val_acc == max(accs) and res.best_epoch == select_best(accs)
    logged = read_epoch_csv(tmp_path / "e.csv")
    assert [e.epoch for e in logged] == [1, 2, 3]
    # the retained snapshot reproduces the logged best accuracy exactly
    m.load_arrays(res.best_params)
    assert run_epoch(m, splits[1], cfg).acc == res.best_val_acc
    for e in res.logs:
        assert 0 <= e.train_acc <= 1 and e.train_ce >= 0 and e.train_fsl >= 0


def test_epoch_csv_format(tmp_path):
    logs = [EpochLog(1, 1.0, 0.9, 2.0, 0.25, 1.1, 0.5, 3.25)]
    write_epoch_csv(tmp_path / "x.csv", logs)
    assert (tmp_path / "x.csv").read_text().splitlines() == [
        "epoch,train_loss,train_ce,train_fsl,train_acc,val_loss,val_acc,seconds",
        "1,1.000000,0.900000,2.000000,0.250000,1.100000,0.500000,3.250000",
    ]


# ---- checkpoints ---------------------------------------------------------

def _params(rng):
    return {
        "a.weight": rng.standard_normal((3, 2)).astype(np.float32),
        "b": rng.standard_normal(4),
        "scalar": np.array(1.5, np.float32),
    }


def test_checkpoint_roundtrip(tmp_path, rng):
    p = _params(rng)
    save_checkpoint(p, "k = v\n", tmp_path / "c.ckpt")
    got, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == "k = v\n" and list(got) == list(p)
    for k in p:
        assert got[k].dtype == p[k].dtype and got[k].tobytes() == p[k].tobytes()


def test_checkpoint_layout(tmp_path):
    save_checkpoint({"w": np.array([1.0], np.float32)}, "m", tmp_path / "c.ckpt")
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:4] == b"ICNT"
    assert struct.unpack("<II", raw[4:12]) == (1, 1) and raw[12:13] == b"m"
    assert struct.unpack("<IH", raw[13:19]) == (1, 1) and raw[19:20] == b"w"
    assert struct.unpack("<BBQ", raw[20:30]) == (0, 1, 1)
    assert np.frombuffer(raw[30:], "<f4").tolist() == [1.0]


def test_checkpoint_errors(tmp_path, rng):
    path = tmp_path / "c.ckpt"
    save_checkpoint(_params(rng), "meta", path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError, match="'a.weight'"):
        load_checkpoint(path, {"a.weight": (2, 3), "b": (4,), "scalar": ()})
