import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diorvit.data import (HEADER_SIZE, DataConfigError, Dataset, DatasetFormatError, SynthConfig,
                          augment, dataset_bytes, generate_synthetic, parse_dataset, read_dataset,
                          split, synth_image, write_dataset)


def random_dataset(rng, n=None):
    n = int(rng.integers(0, 12)) if n is None else n
    C, H, W = (int(v) for v in rng.integers(1, 5, size=3))
    K = int(rng.integers(2, 10))
    images = rng.normal(size=(n, C, H, W)).astype(np.float32)
    return Dataset(images, rng.integers(1, K + 1, size=n), K)


# -------------------------------------------------------------- generator

def test_generator_deterministic():
    cfg = SynthConfig(per_class=10, image_size=16)
    assert generate_synthetic(cfg).equals(generate_synthetic(cfg))


def test_generator_seed_matters():
    a = generate_synthetic(SynthConfig(per_class=5, image_size=8, seed=1))
    b = generate_synthetic(SynthConfig(per_class=5, image_size=8, seed=2))
    assert not a.equals(b)


@pytest.mark.parametrize("grade", [1, 2, 3, 4])
def test_noise_free_origin_pixel(grade):
    assert synth_image(grade, 32, 1, 0.0)[0, 0, 0] == 0.5


def test_class_counts_and_range():
    ds = generate_synthetic(SynthConfig(num_classes=3, per_class=7, image_size=8, channels=2))
    assert ds.class_counts() == [7, 7, 7]
    assert ds.images.shape == (21, 2, 8, 8)
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_bad_synth_config():
    with pytest.raises(DataConfigError):
        SynthConfig(per_class=0)


def test_one_nearest_neighbour_learns_the_task():
    ds = generate_synthetic(SynthConfig(per_class=100, noise_sigma=0.08, seed=3))
    train, _, test = split(ds, (0.5, 0.0, 0.5), seed=3)
    a = train.images.reshape(len(train), -1).astype(np.float64)
    b = test.images.reshape(len(test), -1).astype(np.float64)
    d = (b ** 2).sum(1)[:, None] - 2 * b @ a.T + (a ** 2).sum(1)[None, :]
    acc = np.mean(train.labels[d.argmin(axis=1)] == test.labels)
    assert acc > 0.5


# ------------------------------------------------------------------ format

def test_file_size(tmp_path):
    ds = Dataset(np.zeros((2, 1, 4, 4)), [1, 2], 2)
    write_dataset(ds, tmp_path / "d.dold")
    assert HEADER_SIZE == 16
    assert (tmp_path / "d.dold").stat().st_size == 16 + 2 * (1 + 64)


def test_round_trip_random(tmp_path, rng):
    for k in range(50):
        ds = random_dataset(rng)
        path = tmp_path / f"{k}.dold"
        write_dataset(ds, path)
        back = read_dataset(path)
        assert back.equals(ds)
        assert dataset_bytes(back) == path.read_bytes()


def test_short_file():
    with pytest.raises(DatasetFormatError) as exc:
        parse_dataset(b"DOLD")
    assert exc.value.offset == 4


def test_bad_magic(rng):
    raw = bytearray(dataset_bytes(random_dataset(rng, 2)))
    raw[:4] = b"NOPE"
    with pytest.raises(DatasetFormatError, match="magic"):
        parse_dataset(bytes(raw))


def test_truncated_reports_offset():
    raw = dataset_bytes(Dataset(np.zeros((3, 1, 2, 2)), [1, 2, 1], 2))
    with pytest.raises(DatasetFormatError) as exc:
        parse_dataset(raw[:-1])
    assert exc.value.offset == 16 + 2 * 17


def test_label_out_of_range_reports_offset():
    raw = bytearray(dataset_bytes(Dataset(np.zeros((3, 1, 2, 2)), [1, 2, 1], 2)))
    raw[16 + 17] = 9
    with pytest.raises(DatasetFormatError) as exc:
        parse_dataset(bytes(raw))
    assert exc.value.offset == 16 + 17


# ----------------------------------------------------------- augmentation

@settings(max_examples=25)
@given(st.integers(0, 2 ** 32 - 1))
def test_flips_are_involutions(seed):
    img = np.random.default_rng(seed).normal(size=(2, 5, 5))
    for mode in ("hflip", "vflip"):
        np.testing.assert_array_equal(augment(augment(img, mode), mode), img)


def test_symmetric_image_hflip_identity():
    img = np.array([[[1.0, 2.0, 1.0], [3.0, 0.0, 3.0]]])
    np.testing.assert_array_equal(augment(img, "hflip"), img)


def test_random_augment_is_seeded(rng):
    img = rng.normal(size=(1, 4, 4))
    assert np.array_equal(augment(img, "random", 5), augment(img, "random", 5))


def test_unknown_mode():
    with pytest.raises(DataConfigError):
        augment(np.zeros((1, 2, 2)), "rotate")


# ------------------------------------------------------------------- split

def _ids(ds):
    return {bytes(img.tobytes()) for img in ds.images}


def test_split_partitions_and_stratifies():
    ds = generate_synthetic(SynthConfig(per_class=37, image_size=8, seed=4))
    parts = split(ds, (0.7, 0.15, 0.15), seed=9)
    assert sum(len(p) for p in parts) == len(ds)
    ids = [_ids(p) for p in parts]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    assert set().union(*ids) == _ids(ds)
    for p, f in zip(parts, (0.7, 0.15, 0.15)):
        for count in p.class_counts():
            assert abs(count - f * 37) <= 1


def test_split_deterministic():
    ds = generate_synthetic(SynthConfig(per_class=10, image_size=8))
    a, b = split(ds, seed=3), split(ds, seed=3)
    assert all(x.equals(y) for x, y in zip(a, b))


def test_split_all_train():
    ds = generate_synthetic(SynthConfig(per_class=3, image_size=8))
    train, val, test = split(ds, (1, 0, 0))
    assert len(train) == len(ds) and len(val) == len(test) == 0


def test_split_too_few_samples():
    ds = Dataset(np.zeros((4, 1, 2, 2)), [1, 1, 1, 2], 2)
    with pytest.raises(DataConfigError):
        split(ds)
