import json
import shutil
import time

import numpy as np
import pytest

from vtryon.errors import LoadError, ValidationError
from vtryon.synthdata import (AGNOSTIC_FILL, SceneConfig, SyntheticDataset, generate_dataset, generate_scene,
                              read_sample, write_sample)


def test_same_seed_bit_identical():
    a = generate_scene(SceneConfig(seed=5))
    b = generate_scene(SceneConfig(seed=5))
    assert a.equals(b) and a.meta == b.meta
    assert not a.equals(generate_scene(SceneConfig(seed=6)))


def test_shapes_and_dtypes():
    s = generate_scene(SceneConfig(seed=1))
    assert s.source.shape == (8, 64, 48, 3) and s.source.dtype == np.uint8
    assert s.masks.shape == (8, 64, 48) and set(np.unique(s.masks)) <= {0, 1}
    assert s.pose.shape == (8, 64, 48, 3) and s.garment.shape == (64, 48, 3)
    t = s.tensors()
    assert t["source"].shape == (8, 3, 64, 48) and 0 <= t["source"].min() and t["source"].max() <= 1


def test_mask_area_within_range_over_100_seeds():
    lo, hi = 0.1, 0.35
    for seed in range(100):
        s = generate_scene(SceneConfig(seed=seed, frames=4, mask_area=(lo, hi)))
        for f in range(s.num_frames):
            count = 0
            for row in s.masks[f]:
                count += int(sum(int(v) for v in row))
            frac = count / (64 * 48)
            assert lo <= frac <= hi, (seed, f, frac)


def test_agnostic_matches_source_outside_mask():
    s = generate_scene(SceneConfig(seed=3))
    out = s.masks == 0
    assert np.array_equal(s.agnostic[out], s.source[out])
    assert np.all(s.agnostic[s.masks == 1] == AGNOSTIC_FILL)


def test_static_scene_reproduces_garment_texture():
    s = generate_scene(SceneConfig(seed=8, motion=0.0, frames=2))
    inside = s.masks[0] == 1
    assert np.array_equal(s.source[0][inside], s.garment[inside])
    assert np.array_equal(s.masks[0], s.masks[1])


def test_config_rejections():
    with pytest.raises(ValidationError):
        generate_scene(SceneConfig(mask_area=(0.1, 0.6)))
    with pytest.raises(ValidationError):
        generate_scene(SceneConfig(texture="paisley"))
    with pytest.raises(ValidationError):
        generate_scene(SceneConfig(motion=-1))


def test_round_trip(tmp_path):
    s = generate_scene(SceneConfig(seed=4, frames=3))
    back = read_sample(write_sample(s, tmp_path / "s"))
    assert back.equals(s) and back.meta == s.meta


def test_truncated_directory(tmp_path):
    p = write_sample(generate_scene(SceneConfig(seed=4, frames=3)), tmp_path / "s")
    (p / "pose" / "frame_0002.png").unlink()
    with pytest.raises(LoadError) as e:
        read_sample(p)
    assert "frame_0002.png" in str(e.value)


def test_corrupt_file_and_meta(tmp_path):
    p = write_sample(generate_scene(SceneConfig(seed=4, frames=2)), tmp_path / "s")
    (p / "source" / "frame_0000.png").write_bytes(b"\x89PNG\r\n")
    with pytest.raises(LoadError) as e:
        read_sample(p)
    assert e.value.path == str(p / "source" / "frame_0000.png")
    q = write_sample(generate_scene(SceneConfig(seed=4, frames=2)), tmp_path / "q")
    (q / "meta.json").write_text("{not json")
    with pytest.raises(LoadError):
        read_sample(q)


def test_non_binary_mask_rejected(tmp_path):
    from PIL import Image
    p = write_sample(generate_scene(SceneConfig(seed=4, frames=2)), tmp_path / "s")
    m = np.asarray(Image.open(p / "mask" / "frame_0001.png")).copy()
    m[0, 0] = 17
    Image.fromarray(m).save(p / "mask" / "frame_0001.png")
    with pytest.raises(LoadError):
        read_sample(p)


def test_dataset_order_and_determinism(tmp_path):
    cfg = SceneConfig(height=32, width=32, frames=2, mask_area=(0.1, 0.3))
    generate_dataset(tmp_path / "a", 4, 7, cfg)
    generate_dataset(tmp_path / "b", 4, 7, cfg)
    a, b = SyntheticDataset(tmp_path / "a"), SyntheticDataset(tmp_path / "b")
    assert all(x.equals(y) for x, y in zip(a.samples, b.samples))
    assert a.order(3) == a.order(3) and sorted(a.order(3)) == [0, 1, 2, 3]
    assert a.order(None) == [0, 1, 2, 3]
    with pytest.raises(LoadError):
        SyntheticDataset(tmp_path / "missing")


@pytest.mark.slow
def test_200_samples_under_two_minutes(tmp_path):
    t0 = time.perf_counter()
    generate_dataset(tmp_path / "d", 200, 0, SceneConfig(height=64, width=48, frames=8))
    ds = SyntheticDataset(tmp_path / "d")
    for s in ds.samples:
        s.validate()
    assert len(ds) == 200
    assert time.perf_counter() - t0 < 120
