import numpy as np
import pytest

from descsel.errors import InvalidInputError
from descsel.synthetic import SyntheticSpec, generate_synthetic, synthetic_samples


def spec(**kw):
    base = dict(classes=4, descriptor_dim=8, grid=(3, 3), signal_fraction=0.5,
                cluster_separation=4.0, noise_scale=1.0, seed=0,
                samples_per_class=6)
    base.update(kw)
    return SyntheticSpec(**base)


def test_same_seed_is_bit_identical():
    a_samples, a_masks = generate_synthetic(spec())
    b_samples, b_masks = generate_synthetic(spec())
    assert sorted(a_samples) == sorted(b_samples)
    for name in a_samples:
        for x, y in zip(a_samples[name], b_samples[name]):
            assert x.tobytes() == y.tobytes()
    for key in a_masks:
        assert np.array_equal(a_masks[key], b_masks[key])


def test_different_seed_differs():
    a, _ = generate_synthetic(spec(seed=0))
    b, _ = generate_synthetic(spec(seed=1))
    assert a["class_000"][0].tobytes() != b["class_000"][0].tobytes()


def test_shapes_and_dtype():
    by_class, masks = generate_synthetic(spec())
    assert sorted(by_class) == [f"class_{c:03d}" for c in range(4)]
    for grids in by_class.values():
        assert len(grids) == 6
        for g in grids:
            assert g.shape == (3, 3, 8) and g.dtype == np.float32
    assert len(masks) == 24


def test_mask_counts_floor_of_fraction():
    s = spec(signal_fraction=0.3, grid=(6, 6))  # floor(0.3 * 36) = 10
    assert s.signal_rows == 10
    _, masks = generate_synthetic(s)
    for key, m in masks.items():
        assert m.dtype == bool and m.shape == (36,)
        assert m.sum() == 10


def test_zero_signal_fraction_has_empty_masks():
    _, masks = generate_synthetic(spec(signal_fraction=0.0))
    assert all(m.sum() == 0 for m in masks.values())


def test_full_signal_fraction_marks_everything():
    _, masks = generate_synthetic(spec(signal_fraction=1.0))
    assert all(m.all() for m in masks.values())


def test_signal_rows_sit_near_their_class_center():
    s = spec(signal_fraction=0.5, cluster_separation=30.0, noise_scale=0.1)
    by_class, masks = generate_synthetic(s)
    # recover each center as the mean of flagged rows, then check every
    # flagged row lands far closer to its own center than to any other
    centers = {}
    for name, grids in by_class.items():
        rows = [g.reshape(-1, 8)[masks[f"{name}/{i:04d}"]]
                for i, g in enumerate(grids)]
        centers[name] = np.concatenate(rows).mean(axis=0)
    for name, grids in by_class.items():
        flagged = np.concatenate([g.reshape(-1, 8)[masks[f"{name}/{i:04d}"]]
                                  for i, g in enumerate(grids)])
        for row in flagged:
            dists = {n: np.linalg.norm(row - c) for n, c in centers.items()}
            assert min(dists, key=dists.get) == name


def test_zero_signal_rows_live_on_distractor_shell():
    s = spec(signal_fraction=0.0, noise_scale=0.01, cluster_separation=2.0,
             distractor_radius_factor=3.0)
    by_class, _ = generate_synthetic(s)
    radius = s.cluster_separation / np.sqrt(2) * 3.0
    rows = np.concatenate([g.reshape(-1, 8) for g in by_class["class_000"]])
    norms = np.linalg.norm(rows, axis=1)
    assert np.all(np.abs(norms - radius) < 0.2)


def test_distractors_recur_across_classes():
    # a tight pool forces the same distractor vectors to appear in
    # different classes' samples; near-duplicates across classes prove it
    s = spec(signal_fraction=0.0, noise_scale=0.0, distractor_pool_size=4)
    by_class, _ = generate_synthetic(s)
    a = np.unique(np.round(np.concatenate(
        [g.reshape(-1, 8) for g in by_class["class_000"]]), 5), axis=0)
    b = np.unique(np.round(np.concatenate(
        [g.reshape(-1, 8) for g in by_class["class_001"]]), 5), axis=0)
    assert len(a) <= 4 and len(b) <= 4
    shared = {tuple(r) for r in a} & {tuple(r) for r in b}
    assert shared


def test_synthetic_samples_orders_names_and_ids():
    samples, names, masks = synthetic_samples(spec(classes=3, samples_per_class=2))
    assert names == ["class_000", "class_001", "class_002"]
    assert len(samples) == 6
    assert [s.class_id for s in samples] == [0, 0, 1, 1, 2, 2]
    assert samples[0].descriptor_set.m == 9


@pytest.mark.parametrize("kw", [
    dict(classes=1), dict(descriptor_dim=0), dict(signal_fraction=-0.1),
    dict(signal_fraction=1.1), dict(cluster_separation=-1.0),
    dict(noise_scale=-0.5), dict(samples_per_class=0),
    dict(distractor_pool_size=0), dict(distractor_radius_factor=0.0),
])
def test_spec_validation(kw):
    with pytest.raises(InvalidInputError):
        spec(**kw)


def test_pool_size_defaults_to_rows():
    s = spec(grid=(5, 4))
    assert s.pool_size == 20
    assert spec(distractor_pool_size=7).pool_size == 7
