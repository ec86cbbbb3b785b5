import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stenomil import myo
from stenomil import synthgen as sg
from stenomil.myo import MyoCAE


@pytest.fixture(scope="module")
def ring():
    mask, tmap = sg.myocardium_geometry(np.random.default_rng(0))
    return mask, tmap


@pytest.fixture(scope="module")
def clusters(ring):
    return myo.cluster_myocardium(ring[0], seed=0)


@pytest.fixture(scope="module")
def trained_cae():
    patients = list(sg.iter_cohort(sg.CohortConfig(patients=4, seed=0), stream=1))
    model, losses = myo.pretrain_myo_cae([p.myo_volume for p in patients], [p.myo_mask for p in patients],
                                         iterations=300, batch_size=64, patches=4000, seed=0)
    return model, losses


# -- patch CAE -------------------------------------------------------------------------

def test_cae_code_is_128_and_deterministic():
    model = MyoCAE(np.random.default_rng(0))
    patches = np.random.default_rng(1).normal(120, 20, (3, 16, 16))
    a, b = myo.myo_cae_encode(model, patches), myo.myo_cae_encode(model, patches)
    assert a.shape == (3, 128) and np.array_equal(a, b)


def test_identical_patches_identical_codes():
    model = MyoCAE(np.random.default_rng(0))
    p = np.random.default_rng(1).normal(120, 20, (16, 16))
    codes = myo.myo_cae_encode(model, np.stack([p, p, p]))
    assert np.array_equal(codes[0], codes[1]) and np.array_equal(codes[0], codes[2])


def test_extract_patches_centered_and_zero_outside():
    vol = np.arange(2 * 20 * 20, dtype=np.float32).reshape(2, 20, 20)
    patch = myo.extract_patches(vol, [(1, 10, 10)])[0]
    assert patch.shape == (16, 16)
    assert patch[8, 8] == vol[1, 10, 10] and patch[0, 0] == vol[1, 2, 2]
    corner = myo.extract_patches(vol, [(0, 0, 0)])[0]
    assert np.all(corner[:8] == 0) and corner[8, 8] == vol[0, 0, 0]


def test_pretraining_halves_heldout_reconstruction_error(trained_cae):
    model, _ = trained_cae
    held = next(sg.iter_cohort(sg.CohortConfig(patients=1, seed=0), stream=0))
    patches = myo.sample_myo_patches([held.myo_volume], [held.myo_mask], 500, np.random.default_rng(3))

    def mse(m):
        rec = myo.myo_cae_decode(m, myo.myo_cae_encode(m, patches))
        return np.mean((myo.normalize_hu(rec) - myo.normalize_hu(patches)) ** 2)

    assert mse(model) <= 0.5 * mse(MyoCAE(np.random.default_rng(77)))


# -- clustering -------------------------------------------------------------------------

def test_exactly_500_clusters_each_connected(clusters):
    assert clusters.n_clusters == 500
    for members in clusters.clusters():
        assert myo.is_connected(members)


def test_clusters_partition_mask(ring, clusters):
    mask = ring[0]
    sizes = np.bincount(clusters.labels)
    assert sizes.sum() == mask.sum() and np.all(sizes > 0)
    assert set(map(tuple, clusters.voxels)) == set(map(tuple, np.argwhere(mask)))
    assert len({tuple(v) for v in clusters.voxels}) == len(clusters.voxels)


def test_500_isolated_voxels_become_singletons():
    mask = np.zeros((10, 20, 20), dtype=bool)
    mask[::2, ::2, ::2] = True
    assert mask.sum() == 500
    cs = myo.cluster_myocardium(mask, seed=0)
    assert cs.n_clusters == 500 and np.all(np.bincount(cs.labels) == 1)


def test_small_mask_rejected():
    mask = np.zeros((5, 10, 10), dtype=bool)
    mask[:4] = True  # 400 voxels
    with pytest.raises(ValueError, match="500"):
        myo.cluster_myocardium(mask)


def test_clustering_deterministic_per_seed(ring):
    a = myo.cluster_myocardium(ring[0], seed=3)
    b = myo.cluster_myocardium(ring[0], seed=3)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.voxels, b.voxels)


def test_centroids_in_mm(clusters):
    c = clusters.centroids()
    assert c.shape == (500, 3)
    assert c[:, 0].max() <= (sg.MYO_SHAPE[0] - 1) * sg.MYO_SPACING[0] + 1e-9


def test_is_connected_uses_26_neighbourhood():
    assert myo.is_connected(np.array([[0, 0, 0], [1, 1, 1]]))
    assert not myo.is_connected(np.array([[0, 0, 0], [2, 0, 0]]))


def test_repair_merges_fragments_into_adjacent_cluster():
    lab = np.zeros((1, 1, 7), dtype=np.int64)
    lab[0, 0, :] = [0, 0, 1, 1, 0, 2, 2]  # cluster 0 has a stray voxel at x = 4
    cs = myo.MyoClusterSet(np.argwhere(lab >= 0), lab.ravel(), (1.0, 1.0, 1.0))
    myo._repair(lab, cs.centroids(), np.ones(3))
    for c in np.unique(lab):
        assert myo.is_connected(np.argwhere(lab == c))
    assert lab[0, 0, 4] in (1, 2)


# -- features -------------------------------------------------------------------------------

def test_identical_cluster_latents_give_degenerate_statistics():
    v = np.random.default_rng(0).normal(size=128)
    feat = myo.cluster_statistics(np.tile(v, (500, 1)))
    assert feat.shape == (512,)
    np.testing.assert_allclose(feat[:128], v, rtol=1e-12, atol=1e-12)
    assert np.all(feat[128:256] < 1e-12)
    assert np.array_equal(feat[256:384], v) and np.array_equal(feat[384:], v)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 40), st.integers(1, 8)), elements=st.floats(-1e3, 1e3)))
def test_min_le_mean_le_max(latents):
    d = latents.shape[1]
    f = myo.cluster_statistics(latents)
    mean, sd, lo, hi = f[:d], f[d:2 * d], f[2 * d:3 * d], f[3 * d:]
    assert np.all(lo <= mean + 1e-9) and np.all(mean <= hi + 1e-9) and np.all(sd >= 0)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 50), st.integers(1, 6)), elements=st.floats(-1e3, 1e3)), st.randoms())
def test_cluster_order_never_changes_features(latents, rnd):
    perm = list(range(len(latents)))
    rnd.shuffle(perm)
    assert np.array_equal(myo.cluster_statistics(latents), myo.cluster_statistics(latents[perm]))


def test_features_length_512_finite(ring, clusters):
    vol, _ = sg.render_myocardium(ring[1], np.ones(4), 60.0, 15.0, 0)
    feat = myo.myo_features(vol, clusters, MyoCAE(np.random.default_rng(0)))
    assert feat.shape == (512,) and np.all(np.isfinite(feat))


def test_cluster_latents_use_at_most_32_patches(ring, clusters, monkeypatch):
    seen = []
    real = myo.extract_patches
    monkeypatch.setattr(myo, "extract_patches", lambda v, vox: (seen.append(len(vox)), real(v, vox))[1])
    vol, _ = sg.render_myocardium(ring[1], np.ones(4), 60.0, 15.0, 0)
    myo.cluster_latents(vol, clusters, MyoCAE(np.random.default_rng(0)))
    sizes = np.bincount(clusters.labels)
    assert seen == [int(np.minimum(sizes, 32).sum())]


def test_ischemia_increases_sd_block(ring, clusters, trained_cae):
    model, _ = trained_cae
    healthy, _ = sg.render_myocardium(ring[1], np.ones(4), 60.0, 15.0, 21)
    ischemic, _ = sg.render_myocardium(ring[1], np.array([1.0, 0.6, 1.0, 1.0]), 60.0, 15.0, 21)
    sd = slice(128, 256)
    f_h = myo.myo_features(healthy, clusters, model, seed=0)
    f_i = myo.myo_features(ischemic, clusters, model, seed=0)
    assert np.linalg.norm(f_i[sd]) > np.linalg.norm(f_h[sd])
