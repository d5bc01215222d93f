import json
import struct

import numpy as np
import pytest

from routenet import train as T
from routenet.data import SyntheticSpec, make_synthetic
from routenet.model import ArchSpec, ConfigError, build
from routenet.tensor import Rng

LAYERS = [{"kind": "connector", "paths": 2, "hidden": 4}, {"kind": "conv", "filters": 4},
          {"kind": "cc", "hidden": 4}, {"kind": "pool"}, {"kind": "gap"},
          {"kind": "dense", "units": 2, "relu": False}, {"kind": "merge"}]


def tiny_spec(seed=0):
    return ArchSpec(family="custom", input=(8, 8, 3), classes=2, seed=seed, layers=LAYERS)


def tiny_data(n=24, seed=0, split="train"):
    return make_synthetic(SyntheticSpec(samples_per_class=n, seed=seed, height=8, width=8), split)


def cfg(**kw):
    base = dict(epochs=2, batch_size=10, lr0=0.05, max_shift_px=1, dtype="float64")
    base.update(kw)
    return T.TrainConfig(**base)


def test_step_schedules():
    c = T.TrainConfig(lr0=0.1, lr_decay_epochs=[80, 150])
    assert [T.learning_rate(c, e) for e in (0, 79, 80, 149, 150, 199)] == \
        pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001, 0.001], rel=1e-12)
    c = T.TrainConfig(lr0=0.1, lr_decay_epochs=[150, 250])
    assert [T.learning_rate(c, e) for e in (149, 150, 249, 250, 349)] == \
        pytest.approx([0.1, 0.01, 0.01, 0.001, 0.001], rel=1e-12)
    assert T.learning_rate(T.TrainConfig(lr0=0.3), 1000) == 0.3


def test_config_validation():
    for kw in ({"lr0": 0}, {"momentum": 1.0}, {"lr_decay_epochs": [5, 5]}, {"batch_size": 0},
               {"max_shift_px": -1}, {"dtype": "int8"}):
        with pytest.raises((ConfigError, ValueError)):
            T.TrainConfig(**kw)
    with pytest.raises(ConfigError, match="unknown"):
        T.TrainConfig.from_dict({"lr": 0.1})
    c = T.TrainConfig(lr_decay_epochs=[3, 7])
    assert T.TrainConfig.from_dict(c.to_dict()) == c


def test_sgd_closed_form_and_zero_lr():
    w = {"a": np.array([1.0, -2.0])}
    g = {"a": np.array([0.5, 0.25])}
    v = {}
    T.sgd_step(w, g, v, lr=0.1, momentum=0.9)
    np.testing.assert_allclose(w["a"], [0.95, -2.025])
    T.sgd_step(w, g, v, lr=0.1, momentum=0.9)
    # v2 = 0.9 * v1 - 0.1 g
    np.testing.assert_allclose(v["a"], 0.9 * np.array([-0.05, -0.025]) - 0.1 * g["a"])
    frozen = {"a": np.array([3.0])}
    T.sgd_step(frozen, {"a": np.array([7.0])}, {}, lr=0.0, momentum=0.9)
    assert frozen["a"][0] == 3.0
    with pytest.raises(KeyError):
        T.sgd_step({"b": np.zeros(1)}, {}, {}, 0.1, 0.9)


def test_shift_and_flip():
    img = np.arange(2 * 3 * 1, dtype=np.float32).reshape(2, 3, 1) + 1
    np.testing.assert_array_equal(T.shift_image(img, 0, 0), img)
    np.testing.assert_array_equal(T.shift_image(img, 0, 1)[..., 0], [[0, 1, 2], [0, 4, 5]])
    np.testing.assert_array_equal(T.shift_image(img, -1, 0)[..., 0], [[4, 5, 6], [0, 0, 0]])
    assert not T.shift_image(img, 5, 0).any()
    np.testing.assert_array_equal(img[:, ::-1][:, ::-1], img)


def test_augment_is_identity_when_disabled():
    x = np.random.default_rng(0).random((4, 8, 8, 3)).astype(np.float32)
    c = cfg(max_shift_px=0, horizontal_flip=False)
    assert T.augment_batch(x, Rng(0), c) is x


def test_augment_shifts_stay_in_range():
    x = np.ones((200, 8, 8, 1), np.float32)
    out = T.augment_batch(x, Rng(3), cfg(max_shift_px=2, horizontal_flip=False))
    zero_rows = (out[:, :, 4, 0] == 0).sum(axis=1)
    assert zero_rows.max() == 2 and zero_rows.min() == 0
    one = T.augment(x[0], Rng(1), cfg(max_shift_px=0))
    np.testing.assert_array_equal(one, x[0])  # flipping a constant image changes nothing


def test_untrained_eval_near_chance():
    g = build(ArchSpec(family="basecnn_cc", paths=2))
    ds = make_synthetic(SyntheticSpec(clusters=[[0.5] * 3] * 10, noise_std=0.2, samples_per_class=4))
    acc, loss = T.evaluate(g, ds)
    assert 0 <= acc <= 0.5
    assert abs(loss - np.log(10)) < 0.5


def test_training_is_deterministic_and_learns():
    ds, val = tiny_data(), tiny_data(8, seed=1, split="val")
    a, sa = T.train(build(tiny_spec()), ds, cfg(epochs=3), val)
    b, sb = T.train(build(tiny_spec()), ds, cfg(epochs=3), val)
    assert sa.metrics == sb.metrics
    pa, pb = a.named_params(), b.named_params()
    assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)
    assert sa.metrics[-1]["train_loss"] < sa.metrics[0]["train_loss"]
    assert set(sa.metrics[0]) == {"epoch", "lr", "steps", "train_loss", "train_acc", "val_acc", "val_loss"}
    assert sa.step == 3 * 5  # 48 samples, batch 10, last partial batch kept


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    g, s = T.train(build(tiny_spec()), tiny_data(), cfg(epochs=1))
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    T.save_checkpoint(p1, g, s, cfg(epochs=1))
    g2, s2 = T.build_from_checkpoint(T.load_checkpoint(p1))
    T.save_checkpoint(p2, g2, s2, cfg(epochs=1))
    assert p1.read_bytes() == p2.read_bytes()
    assert g2.dtype is np.float64


def test_split_run_matches_straight_run(tmp_path):
    ds = tiny_data()
    _, straight = T.train(build(tiny_spec()), ds, cfg(epochs=3))
    ck = tmp_path / "run.ckpt"
    T.train(build(tiny_spec()), ds, cfg(epochs=1), checkpoint_path=ck)
    g, st = T.build_from_checkpoint(T.load_checkpoint(ck))
    g, resumed = T.train(g, ds, cfg(epochs=3), state=st)
    assert resumed.metrics == straight.metrics
    assert resumed.step == straight.step


def test_checkpoint_errors(tmp_path):
    g, s = T.train(build(tiny_spec()), tiny_data(), cfg(epochs=1))
    p = tmp_path / "c.ckpt"
    T.save_checkpoint(p, g, s)
    data = p.read_bytes()
    with pytest.raises(T.CheckpointError, match="architecture"):
        T.restore(build(tiny_spec(seed=9)), T.load_checkpoint(p))
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(data[:-7])
    with pytest.raises(T.CheckpointError, match=f"truncated at offset {len(data) - 7}"):
        T.load_checkpoint(cut)
    cut.write_bytes(data[:5])
    with pytest.raises(T.CheckpointError, match="offset 5"):
        T.load_checkpoint(cut)
    bad = tmp_path / "v.ckpt"
    magic, _, hlen = struct.unpack_from("<8sIQ", data)
    bad.write_bytes(struct.pack("<8sIQ", magic, 99, hlen) + data[20:])
    with pytest.raises(T.CheckpointError, match="version 99"):
        T.load_checkpoint(bad)
    bad.write_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(T.CheckpointError, match="magic"):
        T.load_checkpoint(bad)
    bad.write_bytes(data + b"\0")
    with pytest.raises(T.CheckpointError, match="trailing"):
        T.load_checkpoint(bad)


def test_checkpoint_header_is_self_describing(tmp_path):
    g, s = T.train(build(tiny_spec()), tiny_data(), cfg(epochs=1))
    p = tmp_path / "h.ckpt"
    T.save_checkpoint(p, g, s, cfg(epochs=1))
    data = p.read_bytes()
    _, _, hlen = struct.unpack_from("<8sIQ", data)
    header = json.loads(data[20:20 + hlen])
    assert header["arch"]["family"] == "custom" and header["epoch"] == 1
    groups = {t["group"] for t in header["tensors"]}
    assert groups == {"param", "velocity"}
    assert all(t["dtype"] == "<f8" for t in header["tensors"])


def test_divergence_names_first_nonfinite_node():
    g = build(tiny_spec())
    g.astype("float64")
    g.set_array("01.conv1.p0.0.conv.b", np.full(4, np.nan))
    with pytest.raises(T.DivergenceError, match="01.conv1"):
        T.train(g, tiny_data(), cfg(epochs=1))


def test_label_range_mismatch():
    with pytest.raises(ValueError, match="outputs"):
        T.train(build(tiny_spec()), make_synthetic(SyntheticSpec(clusters=[[0.1] * 3] * 3, height=8, width=8)), cfg())


def test_max_steps_stops_early():
    _, s = T.train(build(tiny_spec()), tiny_data(), cfg(epochs=5, max_steps=7))
    assert s.step == 7


def test_zero_lr_many_steps_and_plain_sgd_closed_form():
    g = build(tiny_spec())
    before = {k: v.copy() for k, v in g.named_params().items()}
    x = tiny_data().images[:8]
    vel = {}
    for _ in range(10):
        g.forward(x, train=True)
        g.backward(np.ones((8, 2), np.float32))
        T.sgd_step(g.named_params(), g.named_grads(), vel, lr=0.0, momentum=0.9)
    assert all(np.array_equal(before[k], v) for k, v in g.named_params().items())
    # 1-parameter linear model L = w * x: gradient x, so w' = w - lr * x with mu = 0
    w = {"w": np.array([2.0])}
    T.sgd_step(w, {"w": np.array([3.0])}, {}, lr=0.1, momentum=0.0)
    assert w["w"][0] == 2.0 - 0.1 * 3.0


def test_chance_level_and_memorized_eval():
    g = build(ArchSpec(family="basecnn_cc", paths=2, seed=11))
    balanced = make_synthetic(SyntheticSpec(clusters=[[0.5] * 3] * 10, noise_std=0.2, samples_per_class=20))
    acc, _ = T.evaluate(g, balanced)
    assert abs(acc - 0.1) <= 0.05
    ds = tiny_data(8)
    net, _ = T.train(build(tiny_spec()), ds, cfg(epochs=40, batch_size=16, max_shift_px=0, horizontal_flip=False))
    assert T.evaluate(net, ds)[0] == 1.0


def test_fixed_checkpoint_eval_is_bit_identical(tmp_path):
    g, s = T.train(build(tiny_spec()), tiny_data(), cfg(epochs=1))
    p = tmp_path / "e.ckpt"
    T.save_checkpoint(p, g, s)
    val = tiny_data(10, seed=4, split="val")
    losses = [T.evaluate(T.build_from_checkpoint(T.load_checkpoint(p))[0], val)[1] for _ in range(2)]
    assert losses[0] == losses[1]
