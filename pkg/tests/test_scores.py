import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from failband.core import ScoreMethodId
from failband.flow import FlowConfig, FlowModel, Normalizer, train_flow
from failband.nn import Activation, Mlp, init_mlp
from failband.scores import (
    CfmScorer,
    LogpzoScorer,
    SparcScorer,
    StacConfig,
    StacScorer,
    config_hash,
    load_scorer,
    save_scorer,
    train_scorer,
)
from failband.scores.cfm import CfmConfig, CfmModel, cfm_score, cfm_train, consistency_term, grid_variance
from failband.scores.pca_kmeans import PcaKmeansModel, kmeans, pca, pca_kmeans_fit, pca_kmeans_score
from failband.scores.rnd import RndConfig, RndModel, rnd_score, rnd_train
from failband.scores.sparc import sparc, sparc_chunk, speed_profile
from failband.scores.stac import (
    cumulative_quantile,
    median_bandwidth,
    mmd2,
    overlap_segments,
    stac_calibrate_threshold,
    stac_score,
)
from oracles import rbf_mmd2_unbiased, reference_sparc

# -- RND ---------------------------------------------------------------------------


def _rnd_data(n=400, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 4, 2)) * 0.1, rng.normal(size=(n, 3))


def test_rnd_identical_nets_score_zero():
    acts, obs = _rnd_data(50)
    net = init_mlp([11, 16, 8], seed=0)
    model = RndModel(net, copy.deepcopy(net), Normalizer.identity(11))
    assert np.all(rnd_score(model, acts, obs) == 0.0)


def test_rnd_equal_seeds_train_to_zero_loss():
    acts, obs = _rnd_data(50)
    cfg = RndConfig(epochs=2, hidden=(8,), out_dim=4, target_seed=5, predictor_seed=5)
    model = rnd_train(acts, obs, cfg)
    assert np.all(rnd_score(model, acts, obs) == 0.0)


def test_rnd_unit_output_difference():
    w_t = np.zeros((3, 2))
    b_t = np.array([1.0, 0.0, 0.0])
    target = Mlp((2, 3), [w_t], [b_t], Activation.IDENTITY)
    pred = Mlp((2, 3), [w_t.copy()], [np.zeros(3)], Activation.IDENTITY)
    model = RndModel(target, pred, Normalizer.identity(2))
    assert rnd_score(model, np.zeros((1, 1)), np.zeros(1)) == 1.0


def test_rnd_seeded_and_ood():
    acts, obs = _rnd_data()
    cfg = RndConfig(epochs=30, hidden=(32, 32), out_dim=16)
    a, b = rnd_train(acts, obs, cfg), rnd_train(acts, obs, cfg)
    for p, q in zip(a.predictor.params(), b.predictor.params()):
        assert np.array_equal(p, q)
    train_scores = rnd_score(a, acts, obs)
    far = rnd_score(a, np.full((1, 4, 2), 3.0), np.full((1, 3), 8.0))
    assert far[0] > np.percentile(train_scores, 95)


def test_rnd_dim_mismatch():
    acts, obs = _rnd_data(20)
    model = rnd_train(acts, obs, RndConfig(epochs=1, hidden=(4,), out_dim=2))
    with pytest.raises(ValueError):
        rnd_score(model, acts[:, :2], obs)


# -- CFM ---------------------------------------------------------------------------


def constant_flow(c):
    """f(x, s) = c: every path is a straight line with slope c."""
    c = np.asarray(c, dtype=np.float64)
    d = len(c)
    net = Mlp((d + 1, d), [np.zeros((d, d + 1))], [c.copy()], Activation.IDENTITY)
    return FlowModel(net, Normalizer.identity(d))


def test_straight_field_has_zero_consistency_term():
    # f(x, s) = Z0 - x0 along the path from x0 to Z0: implied noise is Z0 at every s
    rng = np.random.default_rng(0)
    x0, z0 = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    flow = constant_flow((z0 - x0)[0])
    val = consistency_term(flow.field, x0, z0, np.array([0.1]), np.array([0.8]))
    assert val == pytest.approx(0.0, abs=1e-24)


def test_straight_flow_cfm_score_zero():
    model = CfmModel(constant_flow([0.5, -1.0, 2.0]))
    x = np.random.default_rng(1).normal(size=(4, 3))
    assert np.allclose(cfm_score(model, x), 0.0, atol=1e-24)


def test_two_point_grid_variance():
    d = 5
    zhat = np.zeros((2, 1, d))
    zhat[1, 0, 0] = 2.0
    # sample variance of {0, 2} is 2 in one dimension, 0 elsewhere
    assert grid_variance(zhat)[0] == pytest.approx(2.0 / d)


def test_cfm_linear_field_closed_form():
    # f = -x on grid (0, 1): implied noise 0 at s=0 and e^-1 x at s=1
    d = 3
    w = np.hstack([-np.eye(d), np.zeros((d, 1))])
    flow = FlowModel(Mlp((d + 1, d), [w], [np.zeros(d)], Activation.IDENTITY), Normalizer.identity(d))
    model = CfmModel(flow, (0.0, 1.0), ode_steps=32)
    x = np.array([1.0, -2.0, 0.5])
    assert cfm_score(model, x) == pytest.approx(math.exp(-2) * (x @ x) / (2 * d), rel=1e-7)


def test_cfm_zero_weight_matches_plain_flow_matching():
    x = np.random.default_rng(2).normal(size=(300, 2))
    cfg = dict(epochs=5, hidden=(16,), seed=3)
    plain = train_flow(x, FlowConfig(**cfg))
    cfm = cfm_train(x, CfmConfig(consistency_weight=0.0, **cfg))
    for p, q in zip(plain.velocity.params(), cfm.flow.velocity.params()):
        assert p.tobytes() == q.tobytes()


def test_cfm_ood_above_id():
    x = np.random.default_rng(4).normal(size=(1500, 2))
    model = cfm_train(x, CfmConfig(epochs=30, hidden=(64, 64), seed=0))
    id_score = np.median(cfm_score(model, x[:50]))
    assert cfm_score(model, np.array([8.0, 8.0])) > id_score


def test_cfm_bad_grid():
    with pytest.raises(ValueError):
        CfmModel(constant_flow([1.0]), (0.5,))


# -- SPARC -------------------------------------------------------------------------


def test_speed_profile():
    chunk = np.array([[0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    assert speed_profile(chunk).tolist() == [5.0, 0.0]


def test_sparc_zero_signal():
    assert sparc(np.zeros(10)) == 0.0
    with pytest.raises(ValueError):
        sparc(np.ones(1))


def test_sparc_constant_speed_matches_reference():
    # unpadded power-of-two FFT of a constant is a lone DC bin; the adaptive band keeps only it
    assert sparc(np.ones(16), pad_level=0) == 0.0
    assert reference_sparc(np.ones(16), 1.0, 0, 10.0, 0.05) == 0.0
    # padded: the boxcar's sinc sidelobes stay above the amplitude threshold
    for n in (15, 16):
        assert sparc(np.ones(n)) == pytest.approx(reference_sparc(np.ones(n), 1.0, 2, 10.0, 0.05), rel=1e-12)
    assert sparc(np.ones(15)) == pytest.approx(2.4142387551088, abs=1e-12)


@pytest.mark.parametrize("pad", [0, 2, 4])
def test_sparc_matches_reference(pad):
    rng = np.random.default_rng(pad)
    for _ in range(10):
        v = np.abs(rng.normal(size=int(rng.integers(5, 40)))) + 0.1
        assert sparc(v, pad_level=pad) == pytest.approx(reference_sparc(v, 1.0, pad, 10.0, 0.05), rel=1e-12)


def test_sparc_jitter_is_rougher():
    t = np.arange(15)
    smooth = 1.0 + 0.5 * np.sin(2 * np.pi * t / 15)
    jitter = smooth + 0.3 * np.cos(np.pi * t)
    assert sparc(jitter) > sparc(smooth)
    assert sparc(jitter) == pytest.approx(reference_sparc(jitter, 1.0, 2, 10.0, 0.05))


@settings(max_examples=40, deadline=None)
@given(
    v=st.lists(st.floats(0.0, 5.0), min_size=2, max_size=30).filter(lambda v: max(v) > 1e-3),
    c=st.floats(0.01, 100.0),
)
def test_property_sparc_scale_invariant_and_nonnegative(v, c):
    v = np.array(v)
    s = sparc(v)
    assert s >= 0
    assert sparc(c * v) == pytest.approx(s, rel=1e-9, abs=1e-12)


def test_sparc_scorer_per_chunk():
    chunks = np.random.default_rng(0).normal(size=(3, 16, 3))
    got = SparcScorer().score_batch(np.zeros((3, 2)), chunks)
    assert np.allclose(got, [sparc_chunk(c) for c in chunks])


# -- PCA + k-means -----------------------------------------------------------------


def test_pca_is_rotation_when_m_equals_d():
    x = np.random.default_rng(0).normal(size=(50, 4)) @ np.diag([3.0, 2.0, 1.0, 0.5])
    mean, comps = pca(x, 4)
    assert np.allclose(comps @ comps.T, np.eye(4), atol=1e-12)
    emb = (x - mean) @ comps.T
    d_raw = np.linalg.norm(x[:, None] - x[None], axis=2)
    d_emb = np.linalg.norm(emb[:, None] - emb[None], axis=2)
    assert np.allclose(d_raw, d_emb, atol=1e-10)


def test_pca_variance_ratio_choice():
    x = np.random.default_rng(1).normal(size=(500, 3)) * np.array([10.0, 1.0, 0.1])
    _, comps = pca(x, None, 0.95)
    assert comps.shape[0] == 1
    assert abs(comps[0, 0]) > 0.99


def test_kmeans_k_equals_n_zero_inertia():
    x = np.random.default_rng(2).normal(size=(12, 3))
    _, inertia = kmeans(x, 12, np.random.default_rng(0))
    assert inertia == pytest.approx(0.0, abs=1e-12)


def test_kmeans_recovers_blobs():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(200, 2)) * 0.3
    b = rng.normal(size=(200, 2)) * 0.3 + np.array([8.0, 0.0])
    model = pca_kmeans_fit(np.vstack([a, b]), m=2, k=2, seed=1)
    cents = model.centroids @ model.components + model.mean
    cents = cents[np.argsort(cents[:, 0])]
    assert np.linalg.norm(cents[0] - a.mean(0)) < 0.2
    assert np.linalg.norm(cents[1] - b.mean(0)) < 0.2


def test_pca_kmeans_score_examples():
    model = PcaKmeansModel(np.zeros(2), np.eye(2), np.array([[0.0, 0.0], [10.0, 0.0]]))
    assert pca_kmeans_score(model, np.array([1.0, 0.0])) == 1.0
    assert pca_kmeans_score(model, np.array([10.0, 0.0])) == 0.0
    fitted = pca_kmeans_fit(np.random.default_rng(4).normal(size=(300, 5)), m=3, k=8)
    inv = fitted.centroids[2] @ fitted.components + fitted.mean
    assert pca_kmeans_score(fitted, inv) == pytest.approx(0.0, abs=1e-7)


def test_pca_kmeans_far_ood_and_errors():
    x = np.random.default_rng(5).normal(size=(300, 5))
    model = pca_kmeans_fit(x, k=16)
    assert pca_kmeans_score(model, np.full(5, 20.0)) > pca_kmeans_score(model, x).max()
    with pytest.raises(ValueError):
        pca_kmeans_fit(x[:10], k=16)
    with pytest.raises(ValueError):
        pca_kmeans_score(model, np.zeros(4))


# -- MMD / STAC --------------------------------------------------------------------


def test_mmd_identical_batches():
    x = np.random.default_rng(0).normal(size=(20, 3))
    assert mmd2(x, x, 1.0, unbiased=False) == pytest.approx(0.0, abs=1e-15)
    assert mmd2(x, x, 1.0, clip=False) <= 0.0


def test_mmd_two_single_points_closed_form():
    r, sigma = 1.3, 0.7
    got = mmd2(np.array([[0.0, 0.0]]), np.array([[r, 0.0]]), sigma, unbiased=False)
    assert got == pytest.approx(2.0 - 2.0 * math.exp(-(r**2) / (2 * sigma**2)), abs=1e-15)
    with pytest.raises(ValueError):
        mmd2(np.zeros((1, 2)), np.ones((1, 2)), sigma)


def test_mmd_separated_gaussians():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(256, 1)), rng.normal(size=(256, 1)) + 5.0
    assert mmd2(x, y, median_bandwidth(np.vstack([x, y]))) > 0.5


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(2, 6), n=st.integers(2, 6), sigma=st.floats(0.2, 3.0))
def test_property_mmd_oracle_and_symmetry(seed, m, n, sigma):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(m, 2)), rng.normal(size=(n, 2))
    val = mmd2(x, y, sigma, clip=False)
    assert val == pytest.approx(rbf_mmd2_unbiased(x, y, sigma), abs=1e-12)
    assert val == pytest.approx(mmd2(y, x, sigma, clip=False), abs=1e-12)


def test_overlap_segments_shapes():
    prev = np.arange(2 * 6 * 1, dtype=float).reshape(2, 6, 1)
    a, b = overlap_segments(prev, prev, 4)
    assert a.tolist() == [[4.0, 5.0], [10.0, 11.0]]
    assert b.tolist() == [[0.0, 1.0], [6.0, 7.0]]


def _plan_sampler(jump_at=None, noise=0.0):
    """Plans on the line a(u) = u; obs[0] is the execution step index."""

    def sample(obs, B, rng):
        t = int(obs[0])
        rows = np.arange(16)[None, :, None] + 8 * t
        plans = np.broadcast_to(rows, (B, 16, 1)).astype(float)
        if noise:
            plans = plans + noise * rng.normal(size=(B, 1, 1))
        if jump_at is not None and t == jump_at:
            plans = plans + 5.0
        return plans

    return sample


def test_stac_first_step_zero_and_consistent_policy_zero():
    cfg = StacConfig(batch_size=8, H=16, H_prime=8, bandwidth=1.0)
    rng = np.random.default_rng(0)
    s0, batch = stac_score(_plan_sampler(), np.array([0.0]), None, cfg, rng)
    assert s0 == 0.0
    s1, _ = stac_score(_plan_sampler(), np.array([1.0]), batch, cfg, rng)
    assert s1 == 0.0


def test_stac_discontinuity_spikes():
    scorer = StacScorer(_plan_sampler(jump_at=12, noise=0.3), StacConfig(batch_size=64, seed=1))
    vals = scorer.score_batch(np.arange(20.0)[:, None], None)
    prior = np.median(vals[1:12])
    assert vals[12] > 10 * prior
    assert vals[12] > 0.1


def test_stac_reset_reproducible():
    scorer = StacScorer(_plan_sampler(noise=0.3), StacConfig(batch_size=16, seed=2))
    a = scorer.score_batch(np.arange(6.0)[:, None], None)
    b = scorer.score_batch(np.arange(6.0)[:, None], None)
    assert np.array_equal(a, b)
    assert scorer.cumulative


def test_stac_config_errors():
    with pytest.raises(ValueError):
        StacConfig(batch_size=1)
    with pytest.raises(ValueError):
        StacConfig(H=8, H_prime=8)
    with pytest.raises(ValueError):
        StacConfig(threshold_mode="other")


def test_cumulative_quantile_examples():
    assert cumulative_quantile(list(range(1, 21)), 0.05) == 20
    assert cumulative_quantile([3.0] * 7, 0.1) == 3.0
    assert cumulative_quantile(list(range(1, 21)), 0.999) == 1
    assert stac_calibrate_threshold([np.array([1.0, 2.0]), np.array([0.5])], 0.5) == 3.0
    with pytest.raises(ValueError):
        stac_calibrate_threshold([])


# -- training and persistence ----------------------------------------------------


def test_train_scorer_dispatch_and_errors(small_world):
    _, train, _, _ = small_world
    with pytest.raises(ValueError, match="requires no training"):
        train_scorer("sparc", train)
    with pytest.raises(ValueError):
        train_scorer("logpzo", [])
    sc = train_scorer("pca-kmeans", train[:5], {"k": 4})
    assert sc.method is ScoreMethodId.PCA_KMEANS


@pytest.mark.parametrize(
    "method,hyper",
    [
        ("logpzo", {"epochs": 2, "hidden": (8,)}),
        ("logpo", {"epochs": 2, "hidden": (8,), "steps": 4}),
        ("rnd", {"epochs": 2, "hidden": (8,), "out_dim": 4}),
        ("cfm", {"epochs": 2, "hidden": (8,)}),
        ("pca-kmeans", {"k": 4}),
    ],
)
def test_save_load_scorer_roundtrip(tmp_path, small_world, method, hyper):
    _, train, _, test = small_world
    sc = train_scorer(method, train[:4], hyper)
    path = tmp_path / "m.fbnc"
    save_scorer(sc, path, {"seed": 0})
    back, man = load_scorer(path)
    assert man["method"] == method and man["seed"] == 0
    r = test[0]
    assert np.array_equal(back.score_rollout(r).values, sc.score_rollout(r).values)


def test_config_hash_stable():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16


def test_parameter_free_scorers_not_saved(tmp_path):
    with pytest.raises(ValueError):
        save_scorer(SparcScorer(), tmp_path / "x")


def test_score_step_matches_batch(small_world):
    _, train, _, test = small_world
    sc = train_scorer("logpzo", train[:4], {"epochs": 2, "hidden": (8,)})
    r = test[1]
    batch = sc.score_rollout(r).values
    assert np.allclose([sc.score_step(s.obs, s.action_chunk) for s in r.steps], batch, atol=1e-12)
    assert isinstance(sc, LogpzoScorer) and not isinstance(sc, CfmScorer)
