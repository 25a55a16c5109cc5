import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsnodule.augment import GROUP, IDENTITY, augment_pair
from tsnodule.cohort import load_study_set, read_manifest, synth_study_set, write_cohort
from tsnodule.errors import BadMagicError, DimensionMismatchError, FormatError, TruncatedPayloadError, \
    UnsupportedVersionError
from tsnodule.splits import stratified_kfold, stratified_split
from tsnodule.synth import MIN_DIAMETER_MM, SynthConfig, draw_growth, study_labels, synthesize_study
from tsnodule.rng import rng_for
from tsnodule.volume import Volume, clip_normalize, decode_volume, encode_volume, extract_patch, read_volume, \
    write_volume


def cohort_ids(n_mal=103, n_ben=58):
    ids = [f"S{i:04d}" for i in range(n_mal + n_ben)]
    return ids, np.array([1] * n_mal + [0] * n_ben)


# -- volumes ------------------------------------------------------------------

def test_volume_round_trip(tmp_path):
    vol = Volume(np.random.default_rng(0).normal(-500, 300, (5, 6, 7)), (0.7, 0.8, 1.25))
    write_volume(tmp_path / "v.nvol", vol)
    back = read_volume(tmp_path / "v.nvol")
    assert np.array_equal(back.voxels, vol.voxels)
    assert back.spacing_mm == tuple(float(np.float32(s)) for s in vol.spacing_mm)
    assert back.dims == (7, 6, 5) and back.at(6, 0, 0) == vol.voxels[0, 0, 6]
    assert encode_volume(back) == (tmp_path / "v.nvol").read_bytes()


def test_volume_corruptions_raise_distinct_errors():
    data = encode_volume(Volume(np.zeros((64, 64, 64))))
    with pytest.raises(BadMagicError):
        decode_volume(b"XXXX" + data[4:])
    with pytest.raises(TruncatedPayloadError):
        decode_volume(data[:-4])
    with pytest.raises(DimensionMismatchError):
        decode_volume(data + b"\0\0\0\0")
    with pytest.raises(UnsupportedVersionError):
        decode_volume(data[:4] + b"\x02\x00" + data[6:])
    kinds = {BadMagicError, TruncatedPayloadError, DimensionMismatchError, UnsupportedVersionError}
    assert len(kinds) == 4 and all(issubclass(k, FormatError) for k in kinds)


def test_clip_normalize_examples():
    out = clip_normalize(np.array([-1200.0, 600.0, -2000.0, 0.0, 5000.0]))
    np.testing.assert_allclose(out, [0.0, 1.0, 0.0, 1200 / 1800, 1.0], rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        clip_normalize(np.array([np.nan]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e5, 1e5), min_size=2, max_size=20))
def test_clip_normalize_is_monotone_into_unit_interval(values):
    x = np.sort(np.array(values))
    y = clip_normalize(x)
    assert np.all((y >= 0) & (y <= 1)) and np.all(np.diff(y) >= 0)


def test_extract_patch_interior_is_pure_crop():
    vox = np.random.default_rng(1).normal(-400, 400, (64, 64, 64)).astype(np.float32)
    p = extract_patch(Volume(vox), (32, 32, 32))
    assert p.shape == (1, 32, 32, 32)
    assert np.array_equal(p[0], clip_normalize(vox[16:48, 16:48, 16:48]))


def test_extract_patch_corner_fills_seven_eighths():
    p = extract_patch(Volume(np.full((64, 64, 64), 600.0)), (0, 0, 0))
    assert np.sum(p == 0.0) == 7 * 16 ** 3 and np.sum(p == 1.0) == 16 ** 3
    with pytest.raises(ValueError):
        extract_patch(Volume(np.zeros((8, 8, 8))), (8, 0, 0))


def test_extract_patch_axis_order():
    vox = np.zeros((64, 64, 64), np.float32)
    vox[20, 30, 40] = 600.0  # (z, y, x)
    p = extract_patch(Volume(vox), (40, 30, 20))
    assert p[0, 16, 16, 16] == 1.0


# -- augmentation ---------------------------------------------------------------

def test_group_has_48_distinct_elements():
    x = np.arange(27.0).reshape(3, 3, 3)
    assert len({g.apply(x).tobytes() for g in GROUP}) == 48
    assert sum(g.is_rotation for g in GROUP) == 24


def test_identity_and_inverse():
    rng = np.random.default_rng(2)
    a, b = rng.random((2, 1, 4, 4, 4))
    assert np.array_equal(IDENTITY.apply(a), a)
    for g in GROUP:
        assert np.array_equal(g.inverse().apply(g.apply(a)), a)


def test_augment_pair_applies_same_element():
    rng = np.random.default_rng(3)
    a = rng.random((1, 6, 6, 6))
    for s in range(20):
        x, y = augment_pair(a, a.copy(), (s, 0))
        assert np.array_equal(x, y)
        assert any(np.array_equal(x, g.apply(a)) for g in GROUP)
    with pytest.raises(ValueError):
        augment_pair(np.zeros((4, 4, 5)), np.zeros((4, 4, 5)), rng)


def test_augmentation_preserves_voxel_multiset():
    a = np.random.default_rng(4).random((1, 5, 5, 5))
    x, _ = augment_pair(a, a, np.random.default_rng(0))
    assert np.array_equal(np.sort(x.ravel()), np.sort(a.ravel()))


# -- synthetic cohort ---------------------------------------------------------

def test_synth_is_deterministic():
    cfg = SynthConfig(seed=4)
    s1, a1, b1 = synthesize_study(cfg, 7)
    s2, a2, b2 = synthesize_study(cfg, 7)
    assert s1 == s2 and np.array_equal(a1.voxels, a2.voxels) and np.array_equal(b1.voxels, b2.voxels)


def test_default_label_counts():
    labels = study_labels(SynthConfig())
    assert labels.sum() == 103 and (labels == 0).sum() == 58


@pytest.mark.slow
def test_default_cohort_statistics():
    cfg = SynthConfig()
    growth, intervals = [], []
    for i in range(cfg.n_studies):
        s, _, _ = synthesize_study(cfg, i)
        assert s.t1.diameter_mm >= MIN_DIAMETER_MM and s.t2.diameter_mm >= MIN_DIAMETER_MM
        assert all(0 <= c < cfg.dims for c in (*s.t1.center_voxel, *s.t2.center_voxel))
        growth.append(s.t2.diameter_mm - s.t1.diameter_mm)
        intervals.append(s.interval_days)
    assert abs(np.mean(growth) - 2.65) < 0.5
    assert 32 <= min(intervals) and max(intervals) <= 2464


def test_raw_malignant_growth_mean():
    cfg = SynthConfig()
    rng = rng_for(0, "growth-test")
    draws = np.array([draw_growth(cfg, True, rng) for _ in range(10_000)])
    assert abs(draws.mean() - 4.1) < 3 * 3.0 / np.sqrt(10_000)


def test_malignant_nodule_is_denser_and_larger_at_t2():
    cfg = SynthConfig(seed=1)
    idx = int(np.argmax(study_labels(cfg)))
    s, v1, v2 = synthesize_study(cfg, idx)
    assert s.label == "malignant" and s.t2.diameter_mm >= s.t1.diameter_mm
    assert v2.at(*s.t2.center_voxel) > v1.at(*s.t1.center_voxel) - 100


def test_cohort_disk_round_trip(tmp_path):
    cfg = SynthConfig(n_studies=6, n_malignant=3, seed=2)
    write_cohort(tmp_path, cfg)
    disk = load_study_set(tmp_path)
    mem = synth_study_set(cfg)
    assert disk.ids == mem.ids and np.array_equal(disk.labels, mem.labels)
    assert np.array_equal(disk.t1, mem.t1) and np.array_equal(disk.t2, mem.t2)
    assert read_manifest(tmp_path / "S0000.json").study_id == "S0000"
    with pytest.raises(KeyError):
        disk.subset(["S9999"])


def test_bad_manifest_is_format_error(tmp_path):
    (tmp_path / "m.json").write_text('{"study_id": "S1"}')
    with pytest.raises(FormatError):
        read_manifest(tmp_path / "m.json")


# -- splits -------------------------------------------------------------------

def test_split_counts_on_default_cohort():
    ids, y = cohort_ids()
    plan = stratified_split(ids, y, 0.7, seed=0)
    pos = dict(zip(ids, y))
    assert len(plan.train_ids) == 113 and len(plan.test_ids) == 48
    assert sum(pos[s] for s in plan.train_ids) == 72 and sum(pos[s] for s in plan.test_ids) == 31
    assert sorted(plan.train_ids + plan.test_ids) == sorted(ids)
    again = stratified_split(ids, y, 0.7, seed=0)
    other = stratified_split(ids, y, 0.7, seed=1)
    assert again == plan and other.train_ids != plan.train_ids
    assert sum(pos[s] for s in other.train_ids) == 72
    for bad in (0.0, 1.0):
        with pytest.raises(ValueError):
            stratified_split(ids, y, bad)
    with pytest.raises(ValueError):
        stratified_split(ids[:3], [1, 1, 1])


def test_kfold_on_training_portion():
    ids, y = cohort_ids(72, 41)
    plan = stratified_kfold(ids, y, 10)
    pos = dict(zip(ids, y))
    assert {len(f) for f in plan.folds} <= {11, 12}
    assert {sum(pos[s] for s in f) for f in plan.folds} <= {7, 8}
    assert {sum(1 - pos[s] for s in f) for f in plan.folds} <= {4, 5}
    assert sorted(s for f in plan.folds for s in f) == sorted(ids)
    assert len(plan.train_ids(0)) == 113 - len(plan.folds[0])
    with pytest.raises(ValueError):
        stratified_kfold(ids, y, 1)
    with pytest.raises(ValueError):
        stratified_kfold(ids[:75], y[:75], 10)


def split_and_fold_violations(n_vectors=100, seed=0):
    """Stratification invariants over random label vectors; returns a list of failures."""
    rng = np.random.default_rng(seed)
    bad = []
    for t in range(n_vectors):
        n = int(rng.integers(20, 200))
        y = rng.integers(0, 2, n)
        if min(y.sum(), n - y.sum()) < 10:
            y[:10], y[10:20] = 1, 0
        ids = [f"x{i}" for i in range(n)]
        plan = stratified_split(ids, y, 0.7, seed=t)
        lab = dict(zip(ids, y))
        ok = sorted(plan.train_ids + plan.test_ids) == sorted(ids)
        for c in (0, 1):
            size = int(np.sum(y == c))
            ok &= sum(lab[s] == c for s in plan.train_ids) == round(0.7 * size)
        folds = stratified_kfold(ids, y, 10, seed=t).folds
        for c in (0, 1):
            counts = [sum(lab[s] == c for s in f) for f in folds]
            ok &= max(counts) - min(counts) <= 1
        ok &= sorted(s for f in folds for s in f) == sorted(ids)
        if not ok:
            bad.append(t)
    return bad


def test_stratification_properties_on_random_labels():
    assert split_and_fold_violations() == []
