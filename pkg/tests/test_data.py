import numpy as np
import pytest

from routenet import data as D


def fake_batch(n, seed, classes=10):
    r = np.random.default_rng(seed)
    return r.integers(0, 256, (n, 32, 32, 3), dtype=np.uint8), r.integers(0, classes, n)


def test_record_sizes():
    assert D.C10_RECORD == 3073 and D.C100_RECORD == 3074
    assert D.C10_BATCH_BYTES == 30_730_000


def test_write_read_roundtrip_and_planar_layout(tmp_path):
    x, y = fake_batch(5, 0)
    p = tmp_path / "b.bin"
    D.write_cifar_file(p, x, y)
    raw = p.read_bytes()
    assert len(raw) == 5 * 3073
    assert raw[0] == y[0]
    # first 1024 bytes after the label are the red plane, row-major
    assert raw[1] == x[0, 0, 0, 0] and raw[2] == x[0, 0, 1, 0] and raw[1 + 1024] == x[0, 0, 0, 1]
    xi, yi, co = D.read_cifar_file(p, "c10", 5)
    np.testing.assert_array_equal(xi, x)
    np.testing.assert_array_equal(yi, y)
    assert co is None


def test_c100_records(tmp_path):
    x, y = fake_batch(3, 1, classes=100)
    p = tmp_path / "t.bin"
    D.write_cifar_file(p, x, y, "c100", coarse=[1, 2, 3])
    assert p.stat().st_size == 3 * 3074
    xi, yi, co = D.read_cifar_file(p, "c100")
    np.testing.assert_array_equal(yi, y)
    np.testing.assert_array_equal(co, [1, 2, 3])
    np.testing.assert_array_equal(xi, x)


@pytest.mark.parametrize("delta", [-1, 1])
def test_off_by_one_size_rejected(tmp_path, delta):
    x, y = fake_batch(4, 2)
    p = tmp_path / "b.bin"
    D.write_cifar_file(p, x, y)
    raw = p.read_bytes()
    p.write_bytes(raw[:-1] if delta < 0 else raw + b"\0")
    with pytest.raises(D.CifarFormatError, match=f"expected 12,292 bytes.*found {12292 + delta:,}"):
        D.read_cifar_file(p, "c10", 4)
    with pytest.raises(D.CifarFormatError, match="multiple"):
        D.read_cifar_file(p, "c10")


def make_release(root, per_file=20):
    d = root / "cifar-10-batches-bin"
    d.mkdir()
    for k, name in enumerate(D.C10_TRAIN_FILES + [D.C10_TEST_FILE]):
        x, y = fake_batch(per_file, k)
        D.write_cifar_file(d / name, x, y)
    return d


def test_load_cifar_checks_official_sizes(tmp_path, monkeypatch):
    make_release(tmp_path)
    with pytest.raises(D.CifarFormatError, match="30,730,000"):
        D.load_cifar(tmp_path)
    monkeypatch.delenv("CIFAR10_DIR", raising=False)
    with pytest.raises(FileNotFoundError, match="CIFAR10_DIR"):
        D.load_cifar()
    with pytest.raises(FileNotFoundError):
        D.load_cifar(tmp_path / "nowhere")


def test_load_cifar_on_small_release(tmp_path, monkeypatch):
    make_release(tmp_path)
    monkeypatch.setattr(D, "C10_BATCH_RECORDS", 20)
    monkeypatch.setenv("CIFAR10_DIR", str(tmp_path))
    tr, va = D.load_cifar()
    assert tr.images.shape == (100, 32, 32, 3) and va.images.shape == (20, 32, 32, 3)
    assert tr.images.dtype == np.float32 and tr.class_names[0] == "airplane"
    flat = tr.images.reshape(-1, 3).astype(np.float64)
    np.testing.assert_allclose(flat.mean(0), 0, atol=1e-5)
    np.testing.assert_allclose(flat.std(0), 1, atol=1e-5)
    raw, _ = D.load_cifar(tmp_path, standardize=False)
    assert raw.images.min() >= 0 and raw.images.max() <= 1
    back = D.destandardize(tr.images, tr.mean, tr.std)
    assert np.abs(back - raw.images).max() <= 1e-6


def test_subset_is_stratified_and_seeded():
    ds = D.make_synthetic(D.SyntheticSpec(clusters=[[0.1], [0.5], [0.9]], samples_per_class=30))
    a = D.subset(ds, 10, seed=1)
    assert a.class_counts().tolist() == [10, 10, 10]
    b = D.subset(ds, 10, seed=1)
    np.testing.assert_array_equal(a.images, b.images)
    c = D.subset(ds, 10, seed=2)
    assert not np.array_equal(a.images, c.images)
    with pytest.raises(ValueError, match="exceeds"):
        D.subset(ds, 31)


def test_synthetic_properties():
    spec = D.SyntheticSpec(clusters=[[0.8, 0.3, 0.2], [0.2, 0.3, 0.8]], noise_std=0.05, samples_per_class=50)
    ds = D.make_synthetic(spec)
    assert ds.class_counts().tolist() == [50, 50]
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    for c, mu in enumerate(spec.clusters):
        np.testing.assert_allclose(ds.images[ds.labels == c].mean((0, 1, 2)), mu, atol=0.01)
    again = D.make_synthetic(spec)
    np.testing.assert_array_equal(ds.images, again.images)
    flat = D.make_synthetic(D.SyntheticSpec(noise_std=0.0, samples_per_class=2))
    assert len(np.unique(flat.images[flat.labels == 0])) == 3
    with pytest.raises(ValueError, match="unknown"):
        D.SyntheticSpec.from_dict({"mean": 1})
    with pytest.raises(ValueError):
        D.SyntheticSpec(clusters=[[0.5]])


def test_dataset_validation_and_range():
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((2, 4, 4, 3)), [0], ["a", "b"])
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((1, 4, 4, 3)), [2], ["a", "b"])
    ds = D.Dataset(np.random.default_rng(0).random((10, 4, 4, 3), dtype=np.float32), np.arange(10) % 2, ["a", "b"])
    (st,) = D.standardize_pair(ds)
    lo, hi = st.valid_range
    np.testing.assert_allclose(D.destandardize(lo, st.mean, st.std), 0, atol=1e-12)
    np.testing.assert_allclose(D.destandardize(hi, st.mean, st.std), 1, atol=1e-12)
    with pytest.raises(ValueError, match="already"):
        D.apply_standardization(st, st.mean, st.std)


def test_label_byte_is_label(tmp_path):
    x, _ = fake_batch(10, 3)
    p = tmp_path / "b.bin"
    D.write_cifar_file(p, x, np.arange(10))
    raw = p.read_bytes()
    _, y, _ = D.read_cifar_file(p)
    for k in range(10):
        assert raw[k * 3073] == k == y[k]


def test_opposite_clusters_separable_by_channel_means():
    ds = D.make_synthetic(D.SyntheticSpec(clusters=[[1, 0, 0], [0, 0, 1]], noise_std=0.2, samples_per_class=40))
    m = ds.images.mean(axis=(1, 2))
    pred = (m[:, 2] > m[:, 0]).astype(int)
    np.testing.assert_array_equal(pred, ds.labels)
