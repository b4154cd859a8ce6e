import numpy as np
import pytest

from ahl import synthdata as sd
from ahl.errors import ConfigurationError, FormatError


# ---------------------------------------------------------------------------
# gen_dataset
# ---------------------------------------------------------------------------

def test_same_seed_bitwise_identical():
    a = sd.gen_dataset(12, 32, 32, 4, seed=3)
    b = sd.gen_dataset(12, 32, 32, 4, seed=3)
    for sa, sb in zip(a.all_samples, b.all_samples):
        assert sa.image.tobytes() == sb.image.tobytes()
        assert sa.landmarks.coords.tobytes() == sb.landmarks.coords.tobytes()


def test_different_seed_differs():
    a = sd.gen_dataset(10, 32, 32, 4, seed=1)
    b = sd.gen_dataset(10, 32, 32, 4, seed=2)
    assert any(sa.image.tobytes() != sb.image.tobytes()
               for sa, sb in zip(a.all_samples, b.all_samples))


def test_split_sizes_60_20_20():
    split = sd.gen_dataset(400, 16, 16, 1, seed=0)
    assert (len(split.train), len(split.validation), len(split.test)) == (240, 80, 80)


def test_landmarks_respect_border_margin_over_many_samples():
    split = sd.gen_dataset(1000, 32, 32, 8, seed=5)
    for s in split.all_samples:
        coords = s.landmarks.coords
        assert (coords >= sd.BORDER_MARGIN).all()
        assert (coords[:, 0] <= 31 - sd.BORDER_MARGIN).all()
        assert (coords[:, 1] <= 31 - sd.BORDER_MARGIN).all()


def test_pixels_are_in_unit_interval_and_quantized():
    split = sd.gen_dataset(10, 32, 32, 4, seed=9)
    for s in split.all_samples:
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        q = np.round(s.image * 65535.0) / 65535.0
        assert q.tobytes() == s.image.tobytes()


def test_preconditions():
    with pytest.raises(ConfigurationError):
        sd.gen_dataset(5, 32, 32, 4, seed=0)
    with pytest.raises(ConfigurationError):
        sd.gen_dataset(10, 32, 32, 9, seed=0)
    with pytest.raises(ConfigurationError):
        sd.gen_dataset(10, 32, 32, 0, seed=0)


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------

def _sample():
    return sd.gen_dataset(10, 32, 32, 4, seed=21).train[0]


def test_identity_params_leave_sample_unchanged():
    s = _sample()
    out = sd.apply_augment(s, sd.AugmentParams.identity())
    assert out.image.tobytes() == s.image.tobytes()
    assert out.landmarks.coords.tobytes() == s.landmarks.coords.tobytes()


def test_double_flip_restores_coordinates():
    s = _sample()
    once = sd.apply_augment(s, sd.AugmentParams(flip=True))
    twice = sd.apply_augment(once, sd.AugmentParams(flip=True))
    assert twice.landmarks.coords.tobytes() == s.landmarks.coords.tobytes()
    assert twice.image.tobytes() == s.image.tobytes()


def test_flip_mirrors_columns():
    s = _sample()
    out = sd.apply_augment(s, sd.AugmentParams(flip=True))
    np.testing.assert_array_equal(out.landmarks.coords[:, 0], s.landmarks.coords[:, 0])
    np.testing.assert_array_equal(out.landmarks.coords[:, 1],
                                  (s.width - 1) - s.landmarks.coords[:, 1])


def test_pure_translation_shifts_landmarks_exactly():
    s = _sample()
    params = sd.AugmentParams(translate=(5.0, -3.0))
    out = sd.apply_augment(s, params)
    expected = s.landmarks.coords + np.array([5.0, -3.0])
    assert out.landmarks.coords.tobytes() == expected.tobytes()
    # integer translation moves pixels exactly
    np.testing.assert_array_equal(out.image[0, 5:, :-3], s.image[0, :-5, 3:])


def test_augment_deterministic_and_in_bounds():
    s = _sample()
    rng1 = np.random.default_rng(4)
    rng2 = np.random.default_rng(4)
    a = sd.augment(s, rng1)
    b = sd.augment(s, rng2)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.landmarks.coords.tobytes() == b.landmarks.coords.tobytes()
    rng = np.random.default_rng(0)
    for _ in range(100):
        out = sd.augment(s, rng)
        coords = out.landmarks.coords
        assert (coords >= sd.BORDER_MARGIN).all()
        assert (coords[:, 0] <= out.height - 1 - sd.BORDER_MARGIN).all()
        assert (coords[:, 1] <= out.width - 1 - sd.BORDER_MARGIN).all()
        assert out.image.min() >= 0.0 and out.image.max() <= 1.0


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------

def test_round_trip_is_bitwise_identical(tmp_path):
    split = sd.gen_dataset(10, 32, 32, 4, seed=13)
    sd.save_dataset(tmp_path / "ds", split)
    loaded = sd.load_dataset(tmp_path / "ds")
    assert loaded.seed == 13
    assert [s.id for s in loaded.train] == [s.id for s in split.train]
    for a, b in zip(split.all_samples, loaded.all_samples):
        assert a.id == b.id
        assert a.image.tobytes() == b.image.tobytes()
        assert a.landmarks.coords.tobytes() == b.landmarks.coords.tobytes()


def test_truncated_image_is_format_error(tmp_path):
    split = sd.gen_dataset(10, 32, 32, 2, seed=13)
    sd.save_dataset(tmp_path / "ds", split)
    victim = tmp_path / "ds" / "images" / f"{split.train[0].id}.pgm"
    victim.write_bytes(victim.read_bytes()[:100])
    with pytest.raises(FormatError) as err:
        sd.load_dataset(tmp_path / "ds")
    assert "byte" in str(err.value)


def test_out_of_bounds_landmark_is_rejected_on_load(tmp_path):
    split = sd.gen_dataset(10, 32, 32, 2, seed=13)
    sd.save_dataset(tmp_path / "ds", split)
    lm = tmp_path / "ds" / "landmarks.csv"
    lines = lm.read_text().splitlines()
    parts = lines[1].split(",")
    parts[2] = "99.0"
    lines[1] = ",".join(parts)
    lm.write_text("\n".join(lines) + "\n")
    with pytest.raises(ConfigurationError):
        sd.load_dataset(tmp_path / "ds")


def test_malformed_landmark_row_is_format_error(tmp_path):
    split = sd.gen_dataset(10, 32, 32, 2, seed=13)
    sd.save_dataset(tmp_path / "ds", split)
    lm = tmp_path / "ds" / "landmarks.csv"
    lm.write_text(lm.read_text() + "garbage-row\n")
    with pytest.raises(FormatError):
        sd.load_dataset(tmp_path / "ds")


def test_overlapping_split_ids_rejected():
    split = sd.gen_dataset(10, 32, 32, 2, seed=13)
    with pytest.raises(ConfigurationError):
        sd.DatasetSplit(train=split.train, validation=split.train, test=split.test)
