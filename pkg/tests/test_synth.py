import numpy as np
import pytest
from scipy import ndimage

from wsid import synth
from wsid.evaluation import iou
from wsid.synth import STRESSOR, SceneSpec


def test_same_seed_bit_identical():
    a, b = synth.make_dataset([3], with_pseudo=True)[0], synth.make_dataset([3], with_pseudo=True)[0]
    assert a.image.tobytes() == b.image.tobytes()
    assert all(np.array_equal(x, y) for x, y in zip(a.gt_instances, b.gt_instances))
    assert a.pseudo.offsets.tobytes() == b.pseudo.offsets.tobytes()
    assert a.class_ids == b.class_ids


def test_seed_seven_two_instances():
    s = synth.gen_scene(7, SceneSpec(n_min=2, n_max=2))
    assert s.t_star == 2 and len(s.class_ids) == 2
    assert not (s.gt_instances[0] & s.gt_instances[1]).any()
    assert s.image.shape == (3, 64, 64) and 0 <= s.image.min() and s.image.max() <= 1


@pytest.mark.parametrize("spec", [SceneSpec(), STRESSOR])
def test_instances_never_overlap(spec):
    bad = 0
    for seed in range(1000 if spec is STRESSOR else 500):
        s = synth.gen_scene(seed, spec)
        total = np.sum(s.gt_instances, axis=0)
        bad += int(total.max() > 1) + int(s.t_star < 1) + int(any(not m.any() for m in s.gt_instances))
    assert bad == 0


def test_stressor_pair_is_adjacent_and_same_class():
    for seed in range(50):
        s = synth.gen_scene(seed, STRESSOR)
        i, j = s.adjacent_pair
        assert s.class_ids[i] == s.class_ids[j]
        gap = ndimage.distance_transform_cdt(~s.gt_instances[i], metric="chessboard")[s.gt_instances[j]].min()
        assert 2 <= gap <= 3  # 1 or 2 background pixels in between


def test_cam_trivial_cases():
    s = synth.gen_scene(5)
    union = s.label_map() > 0
    cam = synth.simulate_cam(s, blur=0.0, noise=0.0, erosion=0)
    np.testing.assert_array_equal(cam, union.astype(float))
    heavy = synth.simulate_cam(s, blur=0.0, noise=0.0, erosion=3)
    assert np.all(union[heavy > 0]) and heavy.sum() < union.sum()
    default = synth.simulate_cam(s)
    assert default.min() >= 0 and default.max() == 1.0


def test_pseudo_boundary_next_to_sign_change():
    eight = np.ones((3, 3), bool)
    for seed in range(20):
        p = synth.make_dataset([seed])[0].pseudo
        comps = p.components
        change = np.zeros(comps.shape, bool)
        for k in np.unique(comps):
            m = comps == k
            change |= ndimage.binary_dilation(m, eight) & ~m
        assert np.all(ndimage.binary_dilation(change, eight)[p.boundary > 0])
        assert np.all(p.saliency[p.boundary > 0])


def test_separated_instances_give_two_components():
    s = synth.gen_scene(7, SceneSpec(n_min=2, n_max=2, min_gap=6))
    comps = synth.merged_components(s.label_map() > 0)
    assert len(np.unique(comps[comps > 0])) == 2
    off = synth.centroid_offsets(comps)
    for m in s.gt_instances:
        ys, xs = np.nonzero(m)
        cx = xs + off[0][m] * 32
        cy = ys + off[1][m] * 32
        np.testing.assert_allclose([cx.std(), cy.std()], 0, atol=1e-9)
        np.testing.assert_allclose([cx[0], cy[0]], [xs.mean(), ys.mean()], atol=1e-9)


def test_adjacent_same_class_pair_merges():
    for seed in range(20):
        s = synth.gen_scene(seed, STRESSOR)
        i, j = s.adjacent_pair
        comps = synth.merged_components(s.label_map() > 0)
        a = np.unique(comps[s.gt_instances[i]])
        b = np.unique(comps[s.gt_instances[j]])
        assert len(a) == 1 and np.array_equal(a, b)


def test_pseudo_saliency_quality():
    scores = [iou(s.pseudo.saliency, s.label_map() > 0) for s in synth.make_dataset(range(100))]
    assert np.median(scores) >= 0.85


def test_spec_text_round_trip():
    spec = SceneSpec(n_min=2, n_max=3, classes=("disk", "square"), texture=0.1, allow_adjacent_same_class=True)
    assert SceneSpec.from_text(spec.to_text()) == spec
    with pytest.raises(ValueError):
        SceneSpec.from_text("colour=red\n")
    with pytest.raises(ValueError):
        SceneSpec(n_min=3, n_max=2)


def test_training_data_shapes():
    td = synth.training_data(synth.make_dataset(range(2)))
    assert td.images.shape == (2, 3, 64, 64)
    assert td.saliency.shape == td.boundary.shape == (2, 1, 64, 64)
    assert td.offsets.shape == (2, 2, 64, 64) and td.edges.shape[0] == 2
