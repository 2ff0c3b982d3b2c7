import filecmp
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtuda.data import (STRONG, WEAK, AugmentationPolicy, CropTooLargeError, DatasetFormatError,
                        GeneratorConfig, GeneratorConfigError, InvalidWindowError, LabeledImage,
                        TargetLabelAccess, augment, center_crop, firewall, gen_synthetic_domains,
                        hu_window, load_dataset, local_background_mean, save_dataset, split_cases)

from conftest import SMALL_GEN


# --- hu_window ---------------------------------------------------------------

def test_hu_window_examples():
    out = hu_window(np.array([[-1000, 500, 150]]))
    assert out.tolist() == [[0.0, 1.0, 0.5]]


def test_hu_window_rejects_bad_window():
    with pytest.raises(InvalidWindowError):
        hu_window(np.zeros((2, 2)), lo=5, hi=5)


@given(arrays(np.int64, (6,), elements=st.integers(-3000, 3000)))
def test_hu_window_monotone_and_idempotent(raw):
    order = np.argsort(raw, kind="stable")
    out = hu_window(raw)
    assert np.all(np.diff(out[order]) >= 0)
    assert np.array_equal(hu_window(out, 0, 1), out)


# --- center_crop -------------------------------------------------------------

def test_center_crop_offsets():
    img = np.arange(512 * 512).reshape(512, 512)
    out = center_crop(img, (416, 416))
    assert out.shape == (416, 416)
    assert out[0, 0] == img[48, 48]
    assert np.array_equal(center_crop(img, (512, 512)), img)
    with pytest.raises(CropTooLargeError):
        center_crop(img, (600, 600))


@given(st.integers(1, 20), st.integers(1, 20), st.data())
def test_center_crop_idempotent(H, W, data):
    h = data.draw(st.integers(1, H))
    w = data.draw(st.integers(1, W))
    img = np.arange(H * W).reshape(H, W)
    once = center_crop(img, (h, w))
    assert np.array_equal(center_crop(once, (h, w)), once)


# --- augment -----------------------------------------------------------------

def _image(rng, n=10):
    px = rng.random((n, n)).astype(np.float32)
    mask = (rng.random((n, n)) > 0.7).astype(np.uint8)
    return LabeledImage(px, mask, "source", "c0")


def test_identity_policy(rng):
    img = _image(rng)
    out = augment(img, AugmentationPolicy(), 7)
    assert np.array_equal(out.pixels, img.pixels)
    assert np.array_equal(out.mask, img.mask)


def test_augment_deterministic(rng):
    img = _image(rng)
    a, b = augment(img, STRONG, 11), augment(img, STRONG, 11)
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.mask, b.mask)


def test_dropout_count_matches_permutation_oracle():
    px = np.full((10, 10), 0.5, dtype=np.float32)
    img = LabeledImage(px, np.zeros((10, 10), np.uint8), "source", "c")
    policy = AugmentationPolicy(dropout_fraction=0.1)
    out = augment(img, policy, 5)
    assert int((out.pixels == 0).sum()) == 10
    # oracle: replay the documented draw order
    rng = np.random.default_rng(5)
    rng.uniform(0, 0)
    rng.uniform(0, 0)
    expected = np.zeros(100, bool)
    expected[rng.permutation(100)[:10]] = True
    assert np.array_equal(out.pixels.reshape(-1) == 0, expected)


def test_photometric_ops_leave_mask_alone(rng):
    img = _image(rng, 16)
    out = augment(img, AugmentationPolicy(blur_sigma_range=(0.5, 1.0), dropout_fraction=0.2), 3)
    assert np.array_equal(out.mask, img.mask)
    assert not np.array_equal(out.pixels, img.pixels)


def test_rotation_keeps_mask_integral_and_aligned(rng):
    img = _image(rng, 24)
    a = augment(img, WEAK, 9)
    b = augment(img, STRONG, 9)
    assert set(np.unique(a.mask)) <= {0, 1}
    assert np.array_equal(a.mask, b.mask)


def test_policy_validation():
    with pytest.raises(ValueError):
        AugmentationPolicy(blur_sigma_range=(1.0, 0.5))
    with pytest.raises(ValueError):
        AugmentationPolicy(dropout_fraction=1.0)


# --- split -------------------------------------------------------------------

@given(st.lists(st.text("abc", min_size=1, max_size=4), min_size=1, max_size=15, unique=True),
       st.floats(0, 0.9), st.integers(0, 100))
def test_split_is_a_partition(ids, frac, seed):
    s = split_cases(ids, frac, seed)
    assert not set(s.train) & set(s.val)
    assert sorted(s.train + s.val) == sorted(ids)


# --- generator ---------------------------------------------------------------

def test_counts_and_determinism():
    cfg = GeneratorConfig(num_cases=20, slices_per_case=8, image_size=32, lesion_radius=(2.0, 3.0))
    src, tgt = gen_synthetic_domains(cfg, 0)
    assert len(src) == len(tgt) == 160
    src2, _ = gen_synthetic_domains(cfg, 0)
    assert all(np.array_equal(a.pixels, b.pixels) and np.array_equal(a.mask, b.mask) for a, b in zip(src, src2))


def test_zero_lesions_gives_empty_masks():
    cfg = GeneratorConfig(image_size=32, num_cases=2, slices_per_case=2, lesion_count=(0, 0),
                          lesion_radius=(2.0, 3.0))
    src, tgt = gen_synthetic_domains(cfg, 1)
    assert all(c.mask.max() == 0 for c in src + tgt)


def test_degenerate_config_rejected():
    with pytest.raises(GeneratorConfigError):
        gen_synthetic_domains(GeneratorConfig(image_size=16, lesion_radius=(4.0, 9.0)), 0)


def test_lesions_brighter_than_local_background(small_domains):
    for c in small_domains[0] + small_domains[1]:
        c.validate(2)
        les = c.mask == 1
        if les.any():
            bg = local_background_mean(c.pixels, c.mask)
            assert np.all(c.pixels[les] > bg[les])


def test_domains_differ_in_style(small_domains):
    src, tgt = small_domains
    assert abs(np.mean([c.pixels.mean() for c in src]) - np.mean([c.pixels.mean() for c in tgt])) > 0.05


# --- disk format -------------------------------------------------------------

def test_round_trip(tmp_path, small_domains):
    src, tgt = small_domains
    save_dataset(src + tgt, tmp_path)
    loaded = load_dataset(tmp_path)
    key = lambda c: (c.domain_tag, c.case_id, c.slice_index)
    for a, b in zip(sorted(src + tgt, key=key), sorted(loaded, key=key)):
        assert key(a) == key(b)
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.mask, b.mask)


def test_gen_twice_identical_trees(tmp_path):
    for name in ("a", "b"):
        save_dataset(sum(gen_synthetic_domains(SMALL_GEN, 4), []), tmp_path / name)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")

    def same(c):
        return not (c.left_only or c.right_only or c.diff_files) and all(same(s) for s in c.subdirs.values())
    assert same(cmp)


def test_target_without_mask_loads(tmp_path, small_domains):
    tgt = [LabeledImage(c.pixels, None, "target", c.case_id, c.slice_index) for c in small_domains[1][:2]]
    save_dataset(tgt, tmp_path)
    loaded = load_dataset(tmp_path, "target")
    assert len(loaded) == 2 and all(c.mask is None for c in loaded)


def test_masks_not_opened_when_disabled(tmp_path, small_domains):
    save_dataset(small_domains[1][:2], tmp_path)
    assert all(c.mask is None for c in load_dataset(tmp_path, "target", masks=False))


def test_missing_source_mask_is_format_error(tmp_path, small_domains):
    save_dataset(small_domains[0][:1], tmp_path)
    mask = next(tmp_path.rglob("*_mask.png"))
    mask.unlink()
    with pytest.raises(DatasetFormatError) as exc:
        load_dataset(tmp_path)
    assert str(mask) in str(exc.value)


def test_corrupt_image_reports_path(tmp_path, small_domains):
    save_dataset(small_domains[0][:1], tmp_path)
    img = next(p for p in tmp_path.rglob("slice_*.png") if "mask" not in p.name)
    img.write_bytes(b"not a png")
    with pytest.raises(DatasetFormatError) as exc:
        load_dataset(tmp_path)
    assert str(img) in str(exc.value)


def test_manifest_records_domain_and_order(tmp_path, small_domains):
    save_dataset(small_domains[0][:2], tmp_path)
    m = json.loads(next(tmp_path.rglob("manifest.json")).read_text())
    assert m["domain"] == "source"
    assert [s["index"] for s in m["slices"]] == sorted(s["index"] for s in m["slices"])


# --- firewall ----------------------------------------------------------------

def test_firewall_counts_and_raises(small_domains):
    strict = firewall(small_domains[1][:1])[0]
    _ = strict.pixels
    with pytest.raises(TargetLabelAccess):
        _ = strict.mask
    assert strict.mask_reads == 1
    lenient = firewall(small_domains[1][:1], strict=False)[0]
    assert lenient.mask is not None and lenient.mask_reads == 1
