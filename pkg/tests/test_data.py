import json

import numpy as np
import pytest

from mdfn.data import (CLASSES, SMALL_AREA, GenerationError, SceneSpec, ShapeInstance, augment, dataset_statistics,
                       export_dataset, generate, hflip, load_dataset, read_ppm, render_scene, shape_mask, write_ppm)


def test_generation_is_deterministic():
    spec = SceneSpec(seed=9)
    img1, ann1 = generate(spec, 5)
    img2, ann2 = generate(spec, 5)
    np.testing.assert_array_equal(img1, img2)
    assert ann1.to_json() == ann2.to_json()
    assert generate(SceneSpec(seed=10), 5)[1].to_json() != ann1.to_json()


def test_images_and_boxes_in_range():
    spec = SceneSpec(seed=1)
    for i in range(50):
        img, ann = generate(spec, i)
        assert img.shape == (3, 64, 64) and img.min() >= 0.0 and img.max() <= 1.0
        lo, hi = spec.objects_per_image
        assert lo <= len(ann.objects) <= hi
        for o in ann.objects:
            x1, y1, x2, y2 = o.box.corners
            assert 0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0
            assert 0.0 <= o.occluded_fraction <= 1.0


def test_all_small_spec():
    spec = SceneSpec(seed=2, small_fraction=1.0)
    for i in range(100):
        assert all(o.area < SMALL_AREA for o in generate(spec, i)[1].objects)


def test_half_covered_disc_pixel_count():
    H = W = 64
    disc = ShapeInstance(1, 32.0, 32.0, 30.0, 30.0, (1.0, 0.0, 0.0))
    # rect covering exactly the right half of the disc's extent
    cover = ShapeInstance(0, 40.0, 32.0, 16.0, 40.0, (0.0, 0.0, 1.0))
    _, ann = render_scene([disc, cover], (H, W))
    # independent pixel count: centres inside the disc and inside the rect
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    in_disc = (xx - 32) ** 2 + (yy - 32) ** 2 <= 15 ** 2
    in_rect = (np.abs(xx - 40) <= 8) & (np.abs(yy - 32) <= 20)
    oracle = (in_disc & in_rect).sum() / in_disc.sum()
    assert ann.objects[0].occluded_fraction == pytest.approx(oracle, abs=1e-12)
    assert abs(ann.objects[0].occluded_fraction - 0.5) <= 0.02
    assert ann.objects[1].occluded_fraction == 0.0


def test_boxes_bound_full_shape_even_when_hidden():
    tri = ShapeInstance(2, 20.0, 20.0, 16.0, 12.0, (1.0, 1.0, 0.0))
    cover = ShapeInstance(0, 20.0, 20.0, 10.0, 10.0, (0.0, 0.0, 0.0))
    _, ann = render_scene([tri, cover], (64, 64))
    mask = shape_mask(tri, "triangle", 64, 64)
    rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
    x1, y1, x2, y2 = ann.objects[0].box.corners
    assert (x1, y1, x2, y2) == pytest.approx((cols[0] / 64, rows[0] / 64, (cols[-1] + 1) / 64, (rows[-1] + 1) / 64))


@pytest.mark.parametrize("kw", [{}, {"small_fraction": 0.6, "occlusion_fraction": 0.3}])
def test_statistics_track_spec(kw):
    spec = SceneSpec(seed=7, **kw)
    stats = dataset_statistics([generate(spec, i)[1] for i in range(1000)])
    assert abs(stats["small_fraction"] - spec.small_fraction) <= 0.05
    assert abs(stats["occlusion_fraction"] - spec.occlusion_fraction) <= 0.05


def test_invalid_specs():
    with pytest.raises(ValueError):
        SceneSpec(objects_per_image=(0, 3))
    with pytest.raises(ValueError):
        SceneSpec(objects_per_image=(1, 1), occlusion_fraction=0.2)
    with pytest.raises(ValueError):
        SceneSpec(objects_per_image=(1, 2), occlusion_fraction=0.9)
    with pytest.raises(ValueError):
        SceneSpec(classes=("hexagon",))


def test_unpackable_scene_errors_instead_of_looping():
    spec = SceneSpec(image_size=(8, 8), objects_per_image=(6, 6), small_fraction=0.0, occlusion_fraction=0.0)
    with pytest.raises(GenerationError):
        generate(spec, 0)


def test_flip_involution_and_mirror(rng):
    img, ann = generate(SceneSpec(seed=4), 0)
    f_img, f_ann = hflip(img, ann)
    b_img, b_ann = hflip(f_img, f_ann)
    np.testing.assert_array_equal(b_img, img)
    for o, f in zip(ann.objects, f_ann.objects):
        assert f.box.cx == pytest.approx(1.0 - o.box.cx)
        assert f.box.w == o.box.w
    for o, b in zip(ann.objects, b_ann.objects):
        assert b.box.as_array() == pytest.approx(o.box.as_array(), abs=1e-15)
    same_img, same_ann = augment(img, ann, rng, p_flip=0.0)
    assert same_img is img and same_ann is ann


def test_flip_specific_box():
    from mdfn.boxes import Box
    from mdfn.data import Annotation, ObjectAnnotation

    ann = Annotation(0, [ObjectAnnotation(0, Box(0.2, 0.5, 0.1, 0.1), 0.0)])
    assert hflip(np.zeros((3, 4, 4)), ann)[1].objects[0].box.cx == pytest.approx(0.8)


def test_ppm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, size=(3, 5, 7)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
    (tmp_path / "b.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "b.ppm")


def test_export_and_reload(tmp_path):
    spec = SceneSpec(seed=11)
    export_dataset(tmp_path, spec, 6)
    assert len(list((tmp_path / "images").glob("*.ppm"))) == 6
    lines = (tmp_path / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 6 and json.loads(lines[2])["image_id"] == 2
    ds = load_dataset(tmp_path)
    assert len(ds) == 6 and ds.spec == spec
    img, ann = ds[3]
    assert ann.to_json() == generate(spec, 3)[1].to_json()
    assert np.abs(img - generate(spec, 3)[0]).max() <= 0.5 / 255 + 1e-12


def test_class_ids_cover_all_shapes():
    stats = dataset_statistics([generate(SceneSpec(seed=5), i)[1] for i in range(200)])
    assert set(stats["per_class"]) == set(CLASSES) and min(stats["per_class"].values()) > 50
