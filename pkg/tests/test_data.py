import json

import numpy as np
import pytest

from edgeattnet.data import (AnnotationRecord, Sample, SyntheticConfig,
                             build_samples, generate_synthetic,
                             load_annotations, load_sample_cache,
                             rasterize_polygon, render_filament, split,
                             write_sample_cache)
from edgeattnet.imgio import read_gray, read_mask, write_mask_png, write_png
from edgeattnet.preprocess import GrayImage

from brute import point_in_polygon


# ---------------------------------------------------------------------------
# rasterization


def test_rasterize_axis_aligned_square():
    bits = rasterize_polygon([1, 1, 4, 1, 4, 4, 1, 4], 6, 6)
    assert bits.sum() == 9
    assert bits[1:4, 1:4].all()


def test_rasterize_triangle_area_close_to_shoelace():
    poly = [0.0, 0.0, 8.0, 0.0, 0.0, 6.0]
    bits = rasterize_polygon(poly, 10, 10)
    # shoelace area of the triangle
    area = 0.5 * abs(8.0 * 6.0)
    assert abs(bits.sum() - area) <= max(1.0, 0.15 * area)


def test_rasterize_orientation_independent():
    cw = [1, 1, 5, 2, 4, 6, 1, 4]
    ccw = list(np.array(cw).reshape(-1, 2)[::-1].ravel())
    assert np.array_equal(rasterize_polygon(cw, 8, 8),
                          rasterize_polygon(ccw, 8, 8))


def test_rasterize_degenerate_polygon_is_empty():
    bits = rasterize_polygon([2, 2, 2, 2, 2, 2], 4, 4)
    assert not bits.any()


def test_rasterize_rejects_too_few_vertices():
    with pytest.raises(ValueError):
        rasterize_polygon([0, 0, 1, 1], 4, 4)


def test_rasterize_matches_point_in_polygon_oracle(rng):
    for trial in range(50):
        n = int(rng.integers(3, 8))
        poly = [(float(rng.uniform(0.2, 15.8)), float(rng.uniform(0.2, 15.8)))
                for _ in range(n)]
        flat = [c for xy in poly for c in xy]
        bits = rasterize_polygon(flat, 16, 16)
        for y in range(16):
            for x in range(16):
                assert bits[y, x] == point_in_polygon(x + 0.5, y + 0.5, poly), \
                    (trial, x, y)


# ---------------------------------------------------------------------------
# COCO-style loading


def coco_doc():
    return {
        "images": [
            {"id": 1, "file_name": "a.png", "width": 16, "height": 16},
            {"id": 2, "file_name": "b.png", "width": 16, "height": 16},
            {"id": 3, "file_name": "c.png", "width": 16, "height": 16},
        ],
        "annotations": [
            {"id": 10, "image_id": 1, "segmentation": [[2, 2, 9, 2, 9, 9, 2, 9]]},
            {"id": 11, "image_id": 2, "segmentation": [[1, 1, 6, 1, 6, 5, 1, 5]]},
            {"id": 12, "image_id": 2, "segmentation": [[3, 3, 8, 3, 8, 7, 3, 7]]},
        ],
    }


def test_load_annotations_drops_unannotated(tmp_path):
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(coco_doc()))
    records, warnings = load_annotations(path)
    assert [r.image_id for r in records] == ["1", "2"]
    assert warnings == 0
    assert len(records[1].polygons) == 2


def test_load_annotations_empty_document(tmp_path):
    path = tmp_path / "ann.json"
    path.write_text(json.dumps({"images": [], "annotations": []}))
    records, _ = load_annotations(path)
    assert records == []


def test_load_annotations_counts_malformed(tmp_path):
    doc = coco_doc()
    doc["annotations"].append({"id": 13, "image_id": 1, "segmentation": [[1, 2, 3]]})
    doc["annotations"].append({"id": 14, "image_id": 99,
                               "segmentation": [[0, 0, 4, 0, 4, 4, 0, 4]]})
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(doc))
    records, warnings = load_annotations(path)
    assert warnings == 2
    assert len(records) == 2


def test_build_samples_overlapping_instances_kept_separate(tmp_path, rng):
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(coco_doc()))
    records, _ = load_annotations(path)
    for name in ("a.png", "b.png"):
        write_png(tmp_path / name, rng.random((16, 16)))
    samples, warnings = build_samples(records, tmp_path)
    assert len(samples) == 2
    two = next(s for s in samples if s.image_id == "2")
    assert len(two.instances) == 2  # overlapping duplicates not merged
    assert np.array_equal(two.union, two.instances[0].bits | two.instances[1].bits)
    assert all(s.union.any() for s in samples)


def test_build_samples_missing_file_skipped(tmp_path, rng):
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(coco_doc()))
    records, _ = load_annotations(path)
    write_png(tmp_path / "a.png", rng.random((16, 16)))
    samples, warnings = build_samples(records, tmp_path)  # b.png missing
    assert [s.image_id for s in samples] == ["1"]
    assert warnings == 1


# ---------------------------------------------------------------------------
# splits


def make_samples(n):
    img = GrayImage(np.zeros((8, 8)))
    union = np.zeros((8, 8), bool)
    union[0, 0] = True
    return [Sample(image_id=f"s{i}", image=img, instances=[], union=union)
            for i in range(n)]


def test_split_disjoint_and_exhaustive():
    samples = make_samples(10)
    tr, va, te = split(samples, 6, 2, 2, seed=0)
    ids = [s.image_id for s in tr + va + te]
    assert len(ids) == 10 and len(set(ids)) == 10


def test_split_deterministic_per_seed():
    samples = make_samples(12)
    a = split(samples, 8, 2, 2, seed=5)
    b = split(samples, 8, 2, 2, seed=5)
    assert [s.image_id for s in a[0]] == [s.image_id for s in b[0]]


def test_split_varies_across_seeds():
    samples = make_samples(12)
    orders = {tuple(s.image_id for s in split(samples, 8, 2, 2, seed=k)[0])
              for k in range(5)}
    assert len(orders) > 1


def test_split_rejects_oversubscription():
    with pytest.raises(ValueError):
        split(make_samples(4), 3, 1, 1, seed=0)


# ---------------------------------------------------------------------------
# synthetic generator


def test_synthetic_deterministic_per_seed():
    cfg = SyntheticConfig(n_images=3, seed=9)
    a = generate_synthetic(cfg)
    b = generate_synthetic(cfg)
    for (ia, ma), (ib, mb) in zip(a, b):
        assert np.array_equal(ia.pixels, ib.pixels)
        assert len(ma.instances) == len(mb.instances)
        for x, y in zip(ma.instances, mb.instances):
            assert np.array_equal(x.bits, y.bits)


def test_synthetic_zero_barbs_is_spine_only():
    cfg = SyntheticConfig(barbs_per_filament=(0, 0), seed=3)
    rng = np.random.default_rng(1)
    shape = render_filament(rng, cfg, 32.0, 32.0, 28.0)
    assert not shape.barb_bits.any()
    assert np.array_equal(shape.bits, shape.spine_bits)
    assert shape.spine_bits.any()


def test_synthetic_filaments_darker_than_disk_by_contrast():
    cfg = SyntheticConfig(n_images=6, image_size=64, seed=11)
    for image, mask_set in generate_synthetic(cfg):
        if not mask_set.instances:
            continue
        fil = np.zeros((64, 64), bool)
        for inst in mask_set.instances:
            fil |= inst.bits
        disk = image.pixels > 0.05
        disk_only = disk & ~fil
        gap = image.pixels[disk_only].mean() - image.pixels[fil].mean()
        assert gap >= cfg.contrast, gap


def test_synthetic_every_sample_has_geometry_inside_frame():
    cfg = SyntheticConfig(n_images=4, image_size=48, seed=2)
    for image, mask_set in generate_synthetic(cfg):
        assert image.pixels.shape == (48, 48)
        assert image.pixels.min() >= 0.0 and image.pixels.max() <= 1.0
        for inst in mask_set.instances:
            assert inst.bits.any()


# ---------------------------------------------------------------------------
# cache round-trip


def test_sample_cache_roundtrip(tmp_path):
    cfg = SyntheticConfig(n_images=3, seed=4)
    items = generate_synthetic(cfg)
    write_sample_cache(tmp_path, items)
    samples = load_sample_cache(tmp_path)
    assert [s.image_id for s in samples] == [m.image_id for _, m in items]
    for sample, (image, mask_set) in zip(samples, items):
        # PNG quantization bounds the image error by half a gray level
        assert np.abs(sample.image.pixels - image.pixels).max() <= 0.5 / 255.0
        assert len(sample.instances) == len(mask_set.instances)
        for got, want in zip(sample.instances, mask_set.instances):
            assert np.array_equal(got.bits, want.bits)


def test_cache_rewrite_is_byte_identical(tmp_path):
    items = generate_synthetic(SyntheticConfig(n_images=2, seed=6))
    d1, d2 = tmp_path / "one", tmp_path / "two"
    write_sample_cache(d1, items)
    write_sample_cache(d2, items)
    for rel in ("index.json", "images/synth_0000.png", "masks/synth_0000_inst00.png"):
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes()


# ---------------------------------------------------------------------------
# image IO


def test_pgm_roundtrip(tmp_path, rng):
    arr = (rng.random((7, 9)) * 255).astype(np.uint8)
    header = f"P5\n# comment\n9 7\n255\n".encode()
    (tmp_path / "img.pgm").write_bytes(header + arr.tobytes())
    img = read_gray(tmp_path / "img.pgm")
    assert img.pixels.shape == (7, 9)
    assert np.array_equal(np.rint(img.pixels * 255).astype(np.uint8), arr)


def test_png_roundtrip(tmp_path, rng):
    arr = rng.random((12, 10))
    write_png(tmp_path / "img.png", arr)
    back = read_gray(tmp_path / "img.png")
    assert np.abs(back.pixels - arr).max() <= 0.5 / 255.0


def test_mask_png_roundtrip(tmp_path, rng):
    bits = rng.random((9, 9)) < 0.3
    write_mask_png(tmp_path / "m.png", bits)
    assert np.array_equal(read_mask(tmp_path / "m.png"), bits)
