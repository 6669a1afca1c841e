"""Synthetic data, pixel normalization, SGDS/SGCK formats, image dumps."""
import struct

import numpy as np
import pytest

from growgan import data as D
from growgan import train as TR

rng = np.random.default_rng(999)


# -- synthetic generation --------------------------------------------------------


def test_class_counts():
    ds = D.generate_synthetic(D.SyntheticSpec(classes=4, per_class=100, noise_std=10), seed=0)
    assert len(ds) == 400
    np.testing.assert_array_equal(np.bincount(ds.labels), [100, 100, 100, 100])


def test_noiseless_samples_identical_within_class():
    ds = D.generate_synthetic(D.SyntheticSpec(classes=4, per_class=3, noise_std=0.0), seed=0)
    for cls in range(4):
        idx = np.flatnonzero(ds.labels == cls)
        for i in idx[1:]:
            np.testing.assert_array_equal(ds.pixels[i], ds.pixels[idx[0]])


def test_generation_deterministic_per_seed():
    spec = D.SyntheticSpec(per_class=5, noise_std=30)
    a = D.generate_synthetic(spec, seed=9)
    b = D.generate_synthetic(spec, seed=9)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, D.generate_synthetic(spec, seed=10).pixels)


def centroid_accuracy(train_ds, test_ds):
    """Oracle: nearest class-centroid classifier in raw pixel space."""
    centroids = np.stack(
        [
            train_ds.pixels[train_ds.labels == c].astype(np.float64).mean(axis=0)
            for c in range(train_ds.num_classes)
        ]
    )
    flat_c = centroids.reshape(train_ds.num_classes, -1)
    flat_x = test_ds.pixels.astype(np.float64).reshape(len(test_ds), -1)
    d2 = ((flat_x[:, None, :] - flat_c[None, :, :]) ** 2).sum(axis=2)
    pred = d2.argmin(axis=1)
    return float((pred == test_ds.labels).mean())


def test_noiseless_classes_linearly_separable_by_centroids():
    ds = D.generate_synthetic(D.SyntheticSpec(per_class=10, noise_std=0.0), seed=1)
    assert centroid_accuracy(ds, ds) == 1.0


def test_centroid_accuracy_degrades_with_noise():
    # Pixel clipping plus 30-sample centroids keep the oracle perfect until the
    # noise dwarfs the 175-count pattern contrast, then accuracy falls off.
    accs = []
    for noise in (0.0, 240.0, 600.0, 900.0, 1400.0):
        train = D.generate_synthetic(D.SyntheticSpec(per_class=30, noise_std=noise), seed=2)
        test = D.generate_synthetic(D.SyntheticSpec(per_class=30, noise_std=noise), seed=3)
        accs.append(centroid_accuracy(train, test))
    assert accs[0] == 1.0
    assert all(b <= a + 1e-9 for a, b in zip(accs, accs[1:]))
    assert accs[-1] < 0.5


# -- normalization ----------------------------------------------------------------


def test_normalize_endpoints():
    arr = np.array([[[[0], [255]]]], dtype=np.uint8)
    out = D.normalize_pixels(arr)
    assert out.ravel()[0] == -1.0
    assert out.ravel()[1] == 1.0


def test_normalize_midpoint_neighbour():
    arr = np.full((1, 1, 1, 1), 128, dtype=np.uint8)
    assert D.normalize_pixels(arr).ravel()[0] == pytest.approx(128 / 127.5 - 1.0)
    assert D.normalize_pixels(arr).ravel()[0] == pytest.approx(0.00392, abs=1e-5)


def test_normalize_round_trip_exhaustive():
    values = np.arange(256, dtype=np.uint8).reshape(1, 16, 16, 1)
    restored = D.denormalize_pixels(D.normalize_pixels(values))
    assert np.abs(restored.astype(int) - values.astype(int)).max() <= 1


# -- SGDS -------------------------------------------------------------------------


def test_sgds_round_trip(tmp_path):
    ds = D.generate_synthetic(D.SyntheticSpec(per_class=7, noise_std=25), seed=4)
    ds.labels[3] = -1
    path = tmp_path / "d.sgds"
    D.save_dataset(ds, path)
    again = D.load_dataset(path)
    np.testing.assert_array_equal(again.pixels, ds.pixels)
    np.testing.assert_array_equal(again.labels, ds.labels)
    assert again.num_classes == ds.num_classes


def test_sgds_bad_magic(tmp_path):
    path = tmp_path / "bad.sgds"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(D.BadMagicError):
        D.load_dataset(path)


def test_sgds_bad_version(tmp_path):
    path = tmp_path / "bad.sgds"
    path.write_bytes(D.SGDS_MAGIC + struct.pack("<I", 99) + b"\x00" * 16)
    with pytest.raises(D.BadVersionError):
        D.load_dataset(path)


def test_sgds_truncated(tmp_path):
    ds = D.generate_synthetic(D.SyntheticSpec(per_class=4, noise_std=5), seed=5)
    path = tmp_path / "d.sgds"
    D.save_dataset(ds, path)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(D.TruncatedFileError):
        D.load_dataset(path)


def test_sgds_files_identical_for_identical_data(tmp_path):
    ds = D.generate_synthetic(D.SyntheticSpec(per_class=4, noise_std=5), seed=6)
    D.save_dataset(ds, tmp_path / "a.sgds")
    D.save_dataset(ds, tmp_path / "b.sgds")
    assert (tmp_path / "a.sgds").read_bytes() == (tmp_path / "b.sgds").read_bytes()


# -- images -----------------------------------------------------------------------


def test_ppm_header_and_extremes(tmp_path):
    img = np.full((3, 16, 16), -1.0)
    path = tmp_path / "dark.ppm"
    D.write_image(img, path)
    blob = path.read_bytes()
    assert blob.startswith(b"P6\n16 16\n255\n")
    assert set(blob[len(b"P6\n16 16\n255\n") :]) == {0}

    D.write_image(np.full((3, 4, 4), 1.0), tmp_path / "bright.ppm")
    body = (tmp_path / "bright.ppm").read_bytes().split(b"\n", 3)[3]
    assert set(body) == {255}


def test_pgm_single_channel(tmp_path):
    D.write_image(np.zeros((1, 8, 8)), tmp_path / "g.pgm")
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5\n8 8\n255\n")


# -- SGCK -------------------------------------------------------------------------


def _fresh_run(tmp_path, epochs=1, route=("baby",), seed=3):
    ds = D.generate_synthetic(D.SyntheticSpec(per_class=30, noise_std=60), seed=8)
    cfg = TR.TrainConfig(
        route=route,
        epochs_per_stage=epochs,
        batch_size=8,
        labels_per_class=4,
        test_per_class=6,
        seed=seed,
        scale=0.0625,
        per_class_cap=8,
    )
    return ds, TR.TrainRun(cfg, ds)


def test_checkpoint_round_trip_bitwise(tmp_path):
    ds, run = _fresh_run(tmp_path)
    run.run_epoch()
    path = tmp_path / "c.sgck"
    run.save(path)
    ck = D.load_checkpoint(path)
    want = {f"d/{n}": a for n, a in run.cell.discriminator.named_arrays().items()}
    got = {f"d/{n}": a for n, a in ck.d_model.named_arrays().items()}
    assert want.keys() == got.keys()
    for name in want:
        np.testing.assert_array_equal(want[name], got[name], err_msg=name)
    for n, a in run.cell.generator.named_arrays().items():
        np.testing.assert_array_equal(a, dict(ck.g_model.named_arrays())[n], err_msg=n)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "x.sgck"
    path.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(D.BadMagicError):
        D.load_checkpoint(path)


def test_checkpoint_bad_version(tmp_path):
    path = tmp_path / "x.sgck"
    path.write_bytes(D.SGCK_MAGIC + struct.pack("<I", 9) + b"\x00" * 8)
    with pytest.raises(D.BadVersionError):
        D.load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    ds, run = _fresh_run(tmp_path)
    run.run_epoch()
    path = tmp_path / "c.sgck"
    run.save(path)
    blob = path.read_bytes()
    (tmp_path / "t.sgck").write_bytes(blob[: int(len(blob) * 0.7)])
    with pytest.raises(D.TruncatedFileError):
        D.load_checkpoint(tmp_path / "t.sgck")


def test_resume_matches_uninterrupted_run_bitwise(tmp_path):
    ds, run_a = _fresh_run(tmp_path)
    run_a.run_epoch()
    run_a.run_epoch()
    uninterrupted = TR.format_metrics_csv(run_a.rows)

    ds_b, run_b = _fresh_run(tmp_path)
    run_b.run_epoch()
    path = tmp_path / "mid.sgck"
    run_b.save(path)
    resumed = TR.TrainRun.resume(path, ds_b)
    resumed.run_epoch()
    assert TR.format_metrics_csv(resumed.rows) == uninterrupted
    assert resumed.cell.discriminator.param_hash() == run_a.cell.discriminator.param_hash()
    assert resumed.cell.generator.param_hash() == run_a.cell.generator.param_hash()


def test_resume_across_growth_boundary(tmp_path):
    ds, run_a = _fresh_run(tmp_path, route=("baby", "junior"))
    run_a.run_epoch()
    run_a.advance_stage()
    run_a.run_epoch()
    uninterrupted = TR.format_metrics_csv(run_a.rows)

    ds_b, run_b = _fresh_run(tmp_path, route=("baby", "junior"))
    run_b.run_epoch()
    run_b.advance_stage()
    path = tmp_path / "grown.sgck"
    run_b.save(path)
    resumed = TR.TrainRun.resume(path, ds_b)
    assert resumed.cell.stage == "junior"
    resumed.run_epoch()
    assert TR.format_metrics_csv(resumed.rows) == uninterrupted
    assert resumed.cell.discriminator.param_hash() == run_a.cell.discriminator.param_hash()


def test_f32_checkpoint_mode_halves_payload(tmp_path):
    ds, run = _fresh_run(tmp_path)
    run.run_epoch()
    run.save(tmp_path / "f64.sgck")
    D.save_checkpoint(
        tmp_path / "f32.sgck",
        run.cell.discriminator,
        run.cell.generator,
        meta={"note": "export"},
        dtype="f32",
    )
    assert (tmp_path / "f32.sgck").stat().st_size < 0.6 * (tmp_path / "f64.sgck").stat().st_size
    ck = D.load_checkpoint(tmp_path / "f32.sgck")
    arr = next(iter(ck.d_model.named_arrays().values()))
    assert arr.dtype == np.float64  # loading upcasts
