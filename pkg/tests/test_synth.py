import numpy as np
import pytest

from sphg.errors import ConfigError, DatasetParseError, MissingInputError
from sphg.synth import (TRAIN_FRACTION, Dataset, SceneParams, format_labels, generate_dataset,
                        generate_scene, load_scene, make_scenes, parse_labels, random_scene_spec,
                        read_pgm, read_split, split_indices, write_pgm)


class TestSplit:
    def test_reference_ratio_on_1000_scenes(self):
        train, val = split_indices(1000, seed=0)
        assert (len(train), len(val)) == (817, 183)

    def test_desk_size(self):
        train, val = split_indices(980, seed=0)
        assert (len(train), len(val)) == (800, 180)

    def test_disjoint_and_complete(self):
        train, val = split_indices(50, seed=3)
        assert sorted(train + val) == list(range(50)) and not set(train) & set(val)

    def test_fraction_constant(self):
        assert TRAIN_FRACTION == 9527 / 11665


class TestScenes:
    def test_deterministic_given_seed(self):
        a = make_scenes(3, seed=5)
        b = make_scenes(3, seed=5)
        for (ia, ga), (ib, gb) in zip(a, b):
            np.testing.assert_array_equal(ia, ib)
            assert format_labels(ga) == format_labels(gb)

    def test_geometry_inside_image(self):
        for img, gt in make_scenes(30, seed=1):
            assert img.shape == (1, 64, 64)
            for s in gt.slots:
                for a, b in s.separating_segments():
                    assert 0 <= min(a + b) and max(a + b) <= 63

    def test_slots_share_corners_in_a_row(self):
        rng = np.random.default_rng(0)
        spec = None
        for _ in range(50):
            spec = random_scene_spec(rng, SceneParams(max_slots=2))
            if len(spec.slots) == 2:
                break
        assert spec.slots[0].p2 == spec.slots[1].p1

    def test_impossible_params_raise(self):
        with pytest.raises(ConfigError):
            random_scene_spec(np.random.default_rng(0), SceneParams(width_min=80, width_max=90))

    def test_image_is_8bit_quantized(self):
        img, _ = make_scenes(1, seed=2)[0]
        np.testing.assert_allclose(img * 255, np.round(img * 255), atol=1e-9)


class TestFiles:
    def test_pgm_roundtrip(self, tmp_path):
        img, _ = make_scenes(1, seed=2)[0]
        write_pgm(tmp_path / "a.pgm", img)
        np.testing.assert_allclose(read_pgm(tmp_path / "a.pgm"), img, atol=1e-12)

    def test_truncated_pgm_reports_offset(self, tmp_path):
        img, _ = make_scenes(1, seed=2)[0]
        write_pgm(tmp_path / "a.pgm", img)
        data = (tmp_path / "a.pgm").read_bytes()
        (tmp_path / "b.pgm").write_bytes(data[:-10])
        with pytest.raises(DatasetParseError) as e:
            read_pgm(tmp_path / "b.pgm")
        assert e.value.offset is not None

    def test_label_roundtrip_is_exact(self):
        _, gt = make_scenes(1, seed=4)[0]
        assert format_labels(parse_labels(format_labels(gt))) == format_labels(gt)

    @pytest.mark.parametrize("bad", ["slot 1 2 3\n", "size 64 64\nslot a b c d 90 1\n", "bogus 1\n"])
    def test_bad_labels(self, bad):
        with pytest.raises(DatasetParseError):
            parse_labels("# sphg labels v1\nsize 64 64\n" + bad)

    def test_dataset_dir_roundtrip(self, tmp_path):
        train, val = generate_dataset(tmp_path, 6, seed=1)
        assert read_split(tmp_path) == (train, val)
        img, gt = load_scene(tmp_path, 0)
        ref_img, ref_gt = make_scenes(1, seed=1)[0]
        np.testing.assert_allclose(img, ref_img, atol=1e-12)
        ds = Dataset.from_dir(tmp_path, train)
        x, t = ds.batch([0, 1])
        assert x.shape == (2, 1, 64, 64) and t.corners.shape == (2, 1, 64, 64)
        assert t.corners.max() == pytest.approx(1.0)

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(MissingInputError):
            read_split(tmp_path)
