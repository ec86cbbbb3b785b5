import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stenomil import formats
from stenomil.mil import (
    Bag,
    MilModel,
    attention_pool,
    checkpoint_iterations,
    classify_patient,
    embed_instances,
    predict_bags,
    train_mil,
)
from stenomil.tensor import TrainConfig, backward, bce_loss


def random_bag(rng, n, label=0, scale=1.0):
    return Bag(rng.normal(size=(n, 1024)) * scale, rng.normal(size=512) * scale, label)


# -- instance embedding ----------------------------------------------------------------

def test_identical_arteries_identical_instances():
    rng = np.random.default_rng(0)
    model = MilModel("combined", seed=0, dtype=np.float64).eval()
    row = rng.normal(size=1024)
    inst = embed_instances(np.stack([row, row, rng.normal(size=1024)]), rng.normal(size=512), model)
    assert np.array_equal(inst[0], inst[1]) and not np.array_equal(inst[0], inst[2])


@pytest.mark.parametrize("n", [1, 2, 17, 30])
def test_instance_shape_and_shared_myo_half(n):
    rng = np.random.default_rng(n)
    model = MilModel("combined", seed=1).eval()
    inst = embed_instances(rng.normal(size=(n, 1024)), rng.normal(size=512), model)
    assert inst.shape == (n, 128)
    assert np.all(inst[:, 64:] == inst[0, 64:])


def test_arteries_mode_uses_64_wide_instances():
    rng = np.random.default_rng(0)
    model = MilModel("arteries", seed=0)
    assert model.attn_V.shape == (32, 64) and model.fcn_myo is None
    assert embed_instances(rng.normal(size=(5, 1024)), rng.normal(size=512), model).shape == (5, 64)


def test_myo_mode_is_single_instance():
    rng = np.random.default_rng(0)
    model = MilModel("myo", seed=0)
    assert model.fcn_art is None
    inst = embed_instances(rng.normal(size=(9, 1024)), rng.normal(size=512), model)
    assert inst.shape == (1, 64)


def test_attention_shapes_match_architecture():
    model = MilModel("combined", seed=0)
    assert model.attn_V.shape == (32, 128) and model.attn_w.shape == (32,)
    assert model.head.weight.shape == (1, 128)
    for fcn in (model.fcn_art, model.fcn_myo):
        assert [l.weight.shape[0] for l in fcn.layers] == [64, 64, 64]


# -- attention pooling -------------------------------------------------------------------

def test_single_instance_weight_exactly_one():
    model = MilModel("combined", seed=0)
    _, w = attention_pool(np.random.default_rng(0).normal(size=(1, 128)), model)
    assert w.tolist() == [1.0]


def test_identical_instances_uniform_weights():
    model = MilModel("combined", seed=0, dtype=np.float64)
    inst = np.tile(np.random.default_rng(0).normal(size=128), (7, 1))
    _, w = attention_pool(inst, model)
    np.testing.assert_allclose(w, 1 / 7, rtol=1e-14)


def test_pooled_is_weighted_average():
    model = MilModel("combined", seed=3, dtype=np.float64)
    inst = np.random.default_rng(1).normal(size=(6, 128))
    pooled, w = attention_pool(inst, model)
    scores = np.tanh(inst @ model.attn_V.data.T) @ model.attn_w.data
    ref = np.exp(scores - scores.max())
    ref /= ref.sum()
    np.testing.assert_allclose(w, ref, rtol=1e-12)
    np.testing.assert_allclose(pooled, ref @ inst, rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_attention_weights_on_simplex_f32(n, seed):
    rng = np.random.default_rng(seed)
    model = MilModel("combined", seed=seed % 7)
    _, w = attention_pool(rng.normal(size=(n, 128)) * 5, model)
    assert w.dtype == np.float32
    assert np.all(w >= 0) and abs(float(w.sum(dtype=np.float64)) - 1.0) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_permutation_permutes_weights_and_keeps_embedding(n, seed):
    rng = np.random.default_rng(seed)
    model = MilModel("combined", seed=seed % 5, dtype=np.float64)
    inst = rng.normal(size=(n, 128))
    perm = rng.permutation(n)
    p1, w1 = attention_pool(inst, model)
    p2, w2 = attention_pool(inst[perm], model)
    np.testing.assert_allclose(w2, w1[perm], rtol=0, atol=1e-15)
    assert np.max(np.abs(p1 - p2)) <= 1e-9


def test_wrong_instance_width_rejected():
    with pytest.raises(ValueError):
        attention_pool(np.zeros((3, 64)), MilModel("combined", seed=0))


# -- classification -------------------------------------------------------------------------

def test_zero_head_gives_one_half():
    rng = np.random.default_rng(0)
    model = MilModel("combined", seed=0)
    model.head.weight.data[...] = 0
    model.head.bias.data[...] = 0
    for n in (1, 4, 30):
        assert classify_patient(random_bag(rng, n), model) == 0.5


@pytest.mark.parametrize("mode", ["combined", "arteries", "myo"])
def test_probability_invariant_to_artery_order(mode):
    rng = np.random.default_rng(1)
    model = MilModel(mode, seed=2, dtype=np.float64)
    bag = random_bag(rng, 12)
    for _ in range(5):
        perm = rng.permutation(12)
        p = classify_patient(Bag(bag.arteries[perm], bag.myo), model)
        assert abs(p - classify_patient(bag, model)) <= 1e-9


def test_inference_repeatable_and_in_unit_interval():
    rng = np.random.default_rng(2)
    model = MilModel("combined", seed=0)
    model.train()  # predict switches dropout off by itself
    bag = random_bag(rng, 5)
    a, b = classify_patient(bag, model), classify_patient(bag, model)
    assert a == b and 0 < a < 1
    assert model.training


def test_mode_mismatch_rejected():
    with pytest.raises(ValueError):
        classify_patient(random_bag(np.random.default_rng(0), 2), MilModel("combined", seed=0), "arteries_only")


def test_parameter_count_independent_of_bag_size():
    model = MilModel("combined", seed=0)
    count = model.num_parameters()
    rng = np.random.default_rng(0)
    for n in (1, 30):
        classify_patient(random_bag(rng, n), model)
        assert model.num_parameters() == count
    fcn = 1024 * 64 + 64 + 2 * (64 * 64 + 64) + 3 * 64
    fcn_myo = 512 * 64 + 64 + 2 * (64 * 64 + 64) + 3 * 64
    assert count == fcn + fcn_myo + 32 * 128 + 32 + 128 + 1


def test_gradient_reaches_every_parameter_group():
    rng = np.random.default_rng(0)
    model = MilModel("combined", seed=0, dropout=0.0, dtype=np.float64)
    model.train()
    prob, _ = model(random_bag(rng, 6, label=1))
    backward(bce_loss(prob, 1.0))
    for group in ("fcn_art.", "fcn_myo.", "attn_", "head."):
        grads = [p.grad for k, p in model.named_parameters() if k.startswith(group)]
        assert grads and all(g is not None for g in grads)
        assert any(np.abs(g).max() > 0 for g in grads), group


def test_size_generalization_30_after_training_on_20():
    rng = np.random.default_rng(0)
    bags = [random_bag(rng, int(rng.integers(1, 21)), label=i % 2) for i in range(8)]
    snaps = train_mil(bags, TrainConfig(iterations=40, checkpoint_interval=20))
    p = predict_bags(snaps[-1], [random_bag(rng, 30)])
    assert p.shape == (1,) and 0 < p[0] < 1


# -- training -------------------------------------------------------------------------------

def test_schedule_counts():
    assert len(checkpoint_iterations(20_000, 1000)) == 20
    assert len(checkpoint_iterations(200_000, 1000)) == 200
    with pytest.raises(ValueError):
        checkpoint_iterations(20_000, 999)


def test_train_returns_one_snapshot_per_interval():
    rng = np.random.default_rng(0)
    bags = [random_bag(rng, 3, label=i % 2) for i in range(4)]
    snaps = train_mil(bags, TrainConfig(iterations=60, checkpoint_interval=20), "arteries")
    assert [int(s["train.iteration"]) for s in snaps] == [20, 40, 60]
    assert all("optim.step" in s and "norm.art_mean" in s for s in snaps)


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train_mil([], TrainConfig(iterations=10, checkpoint_interval=10))


def test_separable_toy_cohort_reaches_low_bce():
    # label = some artery has a positive first coordinate
    rng = np.random.default_rng(0)
    bags = []
    for i in range(40):
        n = int(rng.integers(2, 8))
        art = rng.normal(size=(n, 1024)) * 0.1
        art[:, 0] = -np.abs(rng.normal(size=n)) - 0.5
        label = i % 2
        if label:
            art[rng.integers(n), 0] = np.abs(rng.normal()) + 0.5
        bags.append(Bag(art, rng.normal(size=512) * 0.1, label))
    cfg = TrainConfig(iterations=3000, checkpoint_interval=1000, learning_rate=1e-3, dropout=0.0, seed=1)
    snaps = train_mil(bags, cfg, "arteries")
    p = np.clip(predict_bags(snaps[-1], bags), 1e-7, 1 - 1e-7)
    y = np.array([b.label for b in bags])
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert bce < 0.1


def _weight_norm(state):
    return np.sqrt(sum(float(np.sum(v.astype(np.float64) ** 2)) for k, v in state.items()
                       if k.endswith("weight") or k in ("attn_V", "attn_w")))


def test_l2_shrinks_final_weight_norm():
    rng = np.random.default_rng(0)
    bags = [random_bag(rng, 4, label=i % 2) for i in range(10)]
    base = dict(iterations=500, checkpoint_interval=500, learning_rate=1e-3, seed=3)
    free = train_mil(bags, TrainConfig(l2=0.0, **base))[-1]
    decayed = train_mil(bags, TrainConfig(l2=0.001, **base))[-1]
    assert _weight_norm(decayed) < _weight_norm(free)


def test_training_deterministic():
    rng = np.random.default_rng(0)
    bags = [random_bag(rng, 3, label=i % 2) for i in range(5)]
    cfg = TrainConfig(iterations=30, checkpoint_interval=10, seed=4)
    a, b = train_mil(bags, cfg), train_mil(bags, cfg)
    assert all(np.array_equal(a[-1][k], b[-1][k]) for k in a[-1])


def test_checkpoint_round_trip_identical_inference(tmp_path):
    rng = np.random.default_rng(0)
    bags = [random_bag(rng, 3, label=i % 2) for i in range(5)]
    snap = train_mil(bags, TrainConfig(iterations=20, checkpoint_interval=20))[-1]
    formats.save_checkpoint(tmp_path / "m.ckpt", snap)
    back = formats.load_checkpoint(tmp_path / "m.ckpt")
    assert np.array_equal(predict_bags(snap, bags), predict_bags(back, bags))
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"MILCKPT1"


def test_loading_wrong_mode_rejected():
    state = MilModel("arteries", seed=0).state_dict()
    with pytest.raises(ValueError):
        MilModel("combined", seed=0).load_state_dict(state)
