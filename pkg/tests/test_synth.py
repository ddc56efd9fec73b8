import numpy as np
import pytest

from lesioncl import patches as pt
from lesioncl import synth
from lesioncl.synth import SynthConfig


@pytest.fixture(scope="module")
def samples():
    return synth.generate(SynthConfig(count=500, seed=3, image_size=96, radius_range=(2.0, 4.0)))


def test_grade_zero_rule_gives_no_lesions():
    cfg = SynthConfig(count=30, grades=2, lesion_counts=((0, 0), (1, 3)), seed=1)
    for s in synth.generate(cfg):
        if s.grade == 0:
            assert s.lesions == []
        else:
            assert 1 <= len(s.lesions) <= 3


def test_same_seed_identical():
    cfg = SynthConfig(count=5, image_size=96, radius_range=(2.0, 4.0), seed=9)
    a, b = synth.generate(cfg), synth.generate(cfg)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.detection == y.detection
    c = synth.generate(SynthConfig(count=5, image_size=96, radius_range=(2.0, 4.0), seed=10))
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_count_monotone_in_grade(samples):
    by_grade = [[len(s.lesions) for s in samples if s.grade == g] for g in range(3)]
    means = [np.mean(v) for v in by_grade]
    assert all(len(v) > 100 for v in by_grade)
    assert means[0] < means[1] < means[2]


def test_grade_is_function_of_count(samples):
    cfg = SynthConfig()
    for s in samples:
        assert s.grade == cfg.grade_for_count(len(s.lesions))


def test_lesion_area_below_five_percent(samples):
    assert max(synth.lesion_fraction(s) for s in samples) < 0.05


def test_default_size_area_budget():
    for s in synth.generate(SynthConfig(count=40, seed=4)):
        assert synth.lesion_fraction(s) < 0.05
        assert s.image.shape == (256, 256, 3)
        assert 0 <= s.image.min() and s.image.max() <= 1


def test_image_layout():
    (s,) = synth.generate(SynthConfig(count=1, seed=2))
    assert s.image[0, 0].max() == 0.0  # black corner outside the disc
    c = s.image[128, 128]
    assert c[0] > c[1] > c[2]  # orange-ish disc


def test_false_positives_below_point_seven(samples):
    for s in samples:
        true = {b.coords for b in s.lesion_boxes}
        for b in s.detection.boxes:
            if b.coords in true:
                assert 0.6 <= b.confidence <= 1.0
            else:
                assert 0.3 <= b.confidence < 0.7


def test_infeasible_placement():
    cfg = SynthConfig(count=1, grades=1, lesion_counts=((40, 40),), image_size=64,
                      radius_range=(6.0, 8.0), max_lesion_fraction=0.9)
    with pytest.raises(synth.SynthError):
        synth.generate(cfg)


def test_config_validation():
    with pytest.raises(ValueError, match="disjoint"):
        SynthConfig(lesion_counts=((0, 2), (2, 4), (5, 8)))
    with pytest.raises(ValueError, match="grades"):
        SynthConfig(grades=2)
    with pytest.raises(ValueError):
        SynthConfig(count=0)
    cfg = SynthConfig(count=7, seed=5)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        SynthConfig.from_dict({"vessels": True})


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    samples = synth.generate(SynthConfig(count=12, seed=6, image_size=128, radius_range=(2.0, 5.0)))
    synth.export(samples, out)
    return samples, out


class TestExport:
    def test_file_count(self, exported):
        samples, out = exported
        assert len(list(out.iterdir())) == len(samples) + 2

    def test_detection_round_trip(self, exported):
        samples, out = exported
        recs = pt.read_detections(out / "detections.jsonl")
        for s, r in zip(samples, recs):
            assert r.image_id == s.image_id and (r.width, r.height) == (128, 128)
            for a, b in zip(s.detection.boxes, r.boxes):
                np.testing.assert_allclose(a.coords, b.coords, atol=1e-9, rtol=0)
                assert a.confidence == b.confidence and a.class_label == b.class_label

    def test_threshold_matches_generator(self, exported):
        samples, out = exported
        recs = pt.read_detections(out / "detections.jsonl")
        for t in (0.7, 0.8, 0.9):
            own = sum(b.confidence >= t for s in samples for b in s.detection.boxes)
            assert pt.filter_by_confidence(recs, t)[1].num_lesions == own

    def test_labels_and_images(self, exported):
        samples, out = exported
        rows = synth.read_labels(out / "labels.csv")
        assert [g for _, g in rows] == [s.grade for s in samples]
        imgs, grades = synth.load_labeled_images(out / "labels.csv", 64)
        assert imgs.shape == (12, 64, 64, 3) and imgs.dtype == np.float32
        assert (grades == [s.grade for s in samples]).all()

    def test_png_quantization(self, exported):
        from lesioncl.imageops import read_image

        samples, out = exported
        back = read_image(out / f"{samples[0].image_id}.png")
        assert np.abs(back - samples[0].image).max() <= 0.5 / 255 + 1e-12

    def test_patch_pipeline_consumes_export(self, exported):
        samples, out = exported
        recs = pt.read_detections(out / "detections.jsonl")
        specs = pt.build_patch_dataset(recs, 0.9, 0, root=out)
        assert len(specs) == sum(b.confidence >= 0.9 for s in samples for b in s.detection.boxes)
        assert all(pt.window_covers(s) for s in specs)


def test_export_error_names_path(tmp_path):
    samples = synth.generate(SynthConfig(count=1, image_size=96, radius_range=(2.0, 4.0)))
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        synth.export(samples, blocker)
