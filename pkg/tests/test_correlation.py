import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from corrstab import autodiff as ad
from corrstab.autodiff import Tensor
from corrstab.correlation import (
    CorrConfig,
    corr_loss_layer,
    corr_loss_tensor,
    corr_loss_total,
    corr_losses,
    dataset_corr_value,
    frame_last_layer_corr,
    pearson_abs,
    pearson_abs_tensor,
    sample_edges,
    select_features,
)
from corrstab.errors import ConfigError, NumericError, PreconditionError, ValidationError
from corrstab.frame import Dataset
from corrstab.model import LayerFeatures, batch_frames, forward, grad_params, init_params

from conftest import random_frame


def naive_pearson(X):
    """Two-pass population covariance, one entry at a time."""
    s, d = X.shape
    out = np.eye(d)
    means = [sum(X[r, k] for r in range(s)) / s for k in range(d)]
    var = [sum((X[r, k] - means[k]) ** 2 for r in range(s)) / s for k in range(d)]
    for k in range(d):
        for j in range(d):
            if k == j:
                continue
            cov = sum((X[r, k] - means[k]) * (X[r, j] - means[j]) for r in range(s)) / s
            out[k, j] = abs(cov) / (np.sqrt(var[k]) * np.sqrt(var[j]) + 1e-12)
    return out


def naive_loss(C):
    d = len(C)
    return sum(abs(C[k][j] - (1.0 if k == j else 0.0)) for k in range(d) for j in range(d)) / (d * (d - 1))


# ---------------------------------------------------------------- sampling

def test_sqrt_f_sample_size():
    assert len(sample_edges(100, CorrConfig(sampling="sqrt-f"))) == 10
    assert len(sample_edges(101, CorrConfig(sampling="sqrt-f"))) == 11


def test_fixed_sample_clamps_to_f():
    idx = sample_edges(500, CorrConfig(sampling="fixed", fixed_s=1024))
    np.testing.assert_array_equal(idx, np.arange(500))


def test_fixed_sample_is_deterministic_and_distinct():
    cfg = CorrConfig(sampling="fixed", fixed_s=1024, seed=5)
    a = sample_edges(10**4, cfg)
    b = sample_edges(10**4, cfg)
    np.testing.assert_array_equal(a, b)
    assert len(a) == 1024 and len(np.unique(a)) == 1024
    assert not np.array_equal(a, sample_edges(10**4, cfg.model_copy(update={"seed": 6})))


def test_sample_size_never_below_two():
    assert len(sample_edges(1, CorrConfig())) == 1
    assert len(sample_edges(3, CorrConfig())) == 2
    with pytest.raises(Exception):
        CorrConfig(fixed_s=1)


# ---------------------------------------------------------------- Pearson

def test_identical_and_negated_columns():
    x = np.random.default_rng(0).normal(size=20)
    C = pearson_abs(np.stack([x, x, -x], axis=1)).values
    np.testing.assert_allclose(C, np.ones((3, 3)), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_pearson_matches_naive(seed):
    X = np.random.default_rng(seed).normal(size=(32, 4))
    C = pearson_abs(X)
    np.testing.assert_allclose(C.values, naive_pearson(X), atol=1e-10)
    assert corr_loss_layer(C) == pytest.approx(naive_loss(C.values), abs=1e-10)


def test_zero_variance_column():
    X = np.random.default_rng(1).normal(size=(10, 3))
    X[:, 1] = 4.2
    C = pearson_abs(X).values
    assert C[1, 1] == 1.0
    assert C[1, 0] == 0.0 and C[0, 1] == 0.0 and C[1, 2] == 0.0


def test_pearson_errors():
    with pytest.raises(NumericError):
        pearson_abs(np.array([[1.0, np.inf], [2.0, 3.0]]))
    with pytest.raises(PreconditionError):
        pearson_abs(np.ones((1, 3)))


def test_matrix_invariants():
    C = pearson_abs(np.random.default_rng(2).normal(size=(50, 6))).values
    np.testing.assert_array_equal(C, C.T)
    assert np.all((C >= 0) & (C <= 1))
    np.testing.assert_array_equal(np.diag(C), 1.0)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (12, 4), elements=st.floats(-10, 10)),
    arrays(np.float64, 4, elements=st.floats(0.1, 5.0)),
    arrays(np.float64, 4, elements=st.floats(-100, 100)),
    arrays(np.bool_, 4),
)
def test_affine_invariance(X, scale, offset, flip):
    X = X + np.arange(12)[:, None] * np.array([1.0, -0.5, 0.25, 2.0])  # keep columns non-degenerate
    a = np.where(flip, -scale, scale)
    C0 = pearson_abs(X).values
    C1 = pearson_abs(X * a + offset).values
    np.testing.assert_allclose(C1, C0, atol=1e-9)


def test_pearson_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(9, 4))
    probe = rng.normal(size=(4, 4))
    x = Tensor(X, requires_grad=True)
    (g,) = ad.grad(ad.sum_(pearson_abs_tensor(x) * probe), [x])
    h = 1e-6
    num = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        num[idx] = (np.sum(pearson_abs(Xp).values * probe) - np.sum(pearson_abs(Xm).values * probe)) / (2 * h)
    np.testing.assert_allclose(g.data, num, atol=1e-7)


# ---------------------------------------------------------------- losses

def test_layer_loss_examples():
    assert corr_loss_layer(np.eye(5)) == 0.0
    assert corr_loss_layer(np.ones((5, 5))) == 1.0
    with pytest.raises(PreconditionError):
        corr_loss_layer(np.ones((1, 1)))


def test_layer_loss_random_and_lipschitz():
    rng = np.random.default_rng(4)
    for _ in range(20):
        C = pearson_abs(rng.normal(size=(15, 5))).values
        assert corr_loss_layer(C) == pytest.approx(naive_loss(C), abs=1e-12)
        assert 0.0 <= corr_loss_layer(C) <= 1.0
        D = C.copy()
        D[1, 3] += 0.05
        assert abs(corr_loss_layer(D) - corr_loss_layer(C)) <= 0.05 + 1e-15


def test_total_loss_is_sum():
    assert corr_loss_total([0.25]) == 0.25
    assert corr_loss_total([0.0, 0.0, 0.0]) == 0.0
    vals = [0.1, 0.37, 0.22]
    assert corr_loss_total(vals) == pytest.approx(sum(vals), abs=1e-15)


def test_tensor_loss_equals_plain_loss():
    rng = np.random.default_rng(5)
    blocks = [[rng.normal(size=(20, 4))], [rng.normal(size=(20, 4)), rng.normal(size=(20, 4))]]
    t = float(corr_loss_tensor(blocks).data)
    assert t == pytest.approx(sum(corr_losses(blocks)), abs=1e-12)


# ---------------------------------------------------------------- feature selection

def _features(rows=120, dim=8, layers=2, seed=0):
    rng = np.random.default_rng(seed)
    return LayerFeatures(
        [rng.normal(size=(rows, dim)) for _ in range(layers)],
        [rng.normal(size=(rows, 3, dim)) for _ in range(layers)],
        [rng.normal(size=(rows // 4, dim)) for _ in range(layers)],
        [rng.normal(size=(rows // 4, 3, dim)) for _ in range(layers)],
    )


def test_only0e_shape():
    cfg = CorrConfig(irreps="only0e", sampling="fixed", fixed_s=100)
    blocks, idx = select_features(_features(), cfg)
    assert [b.shape for b in blocks[0]] == [(100, 8)]


def test_only1o_stacks_components():
    cfg = CorrConfig(irreps="only1o", sampling="fixed", fixed_s=100)
    feats = _features()
    blocks, idx = select_features(feats, cfg)
    X = blocks[0][0].data
    assert X.shape == (300, 8)
    np.testing.assert_array_equal(X[:3], feats.edge_vector[0][idx[0]])


def test_both_summed_is_sum_of_parts():
    feats = _features(seed=3)
    idx = sample_edges(120, CorrConfig(sampling="fixed", fixed_s=50))
    parts = {}
    for mode in ("only0e", "only1o", "both-summed"):
        blocks, _ = select_features(feats, CorrConfig(irreps=mode), idx=idx)
        parts[mode] = corr_losses(blocks)
    np.testing.assert_allclose(parts["both-summed"], np.add(parts["only0e"], parts["only1o"]), atol=1e-14)


def test_both_mixed_and_node_source():
    feats = _features()
    blocks, _ = select_features(feats, CorrConfig(irreps="both-mixed", sampling="fixed", fixed_s=20))
    assert blocks[0][0].shape == (20, 8 + 24)
    blocks, _ = select_features(feats, CorrConfig(source="node", irreps="only0e", sampling="fixed", fixed_s=10))
    assert blocks[0][0].shape == (10, 8)


def test_missing_vectors_is_config_error():
    feats = _features()
    feats = LayerFeatures(feats.edge_scalar, [], [], [])
    with pytest.raises(ConfigError):
        select_features(feats, CorrConfig(irreps="only1o"))


def test_fixed_sample_at_least_f_equals_full_computation():
    feats = _features(rows=60)
    full, _ = select_features(feats, CorrConfig(), idx=np.arange(60))
    sampled, idx = select_features(feats, CorrConfig(sampling="fixed", fixed_s=1024))
    assert len(idx) == 60
    assert corr_losses(sampled) == corr_losses(full)


# ---------------------------------------------------------------- through the model

def _model_and_frames(n_frames=1, n_layers=2, dim=4):
    params = init_params(2, n_layers=n_layers, dim=dim, n_basis=4, r_max=3.2, seed=11)
    params.avg_neighbors = 3.0
    rng = np.random.default_rng(12)
    frames = [random_frame(rng, n=8, box=7.0, min_dist=1.3) for _ in range(n_frames)]
    return params, frames


@pytest.mark.parametrize("irreps", ["only0e", "only1o"])
def test_corr_gradient_through_model(irreps):
    params, frames = _model_and_frames(n_layers=2)
    batch = batch_frames(frames, params)
    cfg = CorrConfig(irreps=irreps)
    idx = sample_edges(batch.f, cfg.model_copy(update={"sampling": "fixed", "fixed_s": 12}))

    def loss_fn(out):
        blocks, _ = select_features(out.features, cfg, idx=idx)
        return corr_loss_tensor(blocks)

    _, grads, _ = grad_params(params, batch, loss_fn, capture="edge")
    h = 1e-6
    # last-layer vectors are built before that layer's scalar update, and
    # last-layer scalars never read the last mix
    names = ("embed.W", "layer1.gate", "layer1.W", "layer2.gate", "layer2.mix")
    if irreps == "only0e":
        names = ("embed.W", "layer1.gate", "layer1.W", "layer2.W")
    for name in names:
        w = params.weights[name]
        num = np.zeros_like(w)
        for k in np.ndindex(w.shape):
            old = w[k]
            w[k] = old + h
            lp = grad_params(params, batch, loss_fn, capture="edge")[0]
            w[k] = old - h
            lm = grad_params(params, batch, loss_fn, capture="edge")[0]
            w[k] = old
            num[k] = (lp - lm) / (2 * h)
        scale = np.abs(num).max()
        assert scale > 0
        assert np.abs(grads[name] - num).max() / scale < 1e-3, name


def test_dataset_value_single_frame():
    params, frames = _model_and_frames(1, n_layers=3)
    cfg = CorrConfig()
    got = dataset_corr_value(params, Dataset(frames), cfg)
    _, _, feats = forward(params, frames[0], capture=True)
    X = feats.edge_vector[-1].reshape(-1, params.dim)  # every edge, components stacked
    assert got.value == pytest.approx(corr_loss_layer(pearson_abs(X)), abs=1e-12)
    assert got.n_frames == 1


def test_dataset_value_matches_loop():
    params, frames = _model_and_frames(5, n_layers=2)
    cfg = CorrConfig(irreps="both-summed")
    got = dataset_corr_value(params, Dataset(frames), cfg)
    acc0 = acc1 = 0.0
    for fr in frames:
        _, _, feats = forward(params, fr, capture=True)
        acc0 = acc0 + pearson_abs(feats.edge_scalar[-1]).values
        acc1 = acc1 + pearson_abs(feats.edge_vector[-1].reshape(-1, params.dim)).values
    expect = corr_loss_layer(acc0 / 5) + corr_loss_layer(acc1 / 5)
    assert got.value == pytest.approx(expect, abs=1e-12)


def test_decorrelated_features_give_zero():
    # mutually orthogonal zero-mean +-1 columns (Walsh patterns)
    cols = [[-1.0 if bin(r & m).count("1") % 2 else 1.0 for r in range(16)] for m in (1, 2, 4, 8)]
    X = np.stack(cols, axis=1)
    feats = LayerFeatures([X], [np.zeros((16, 3, 4))], [], [])
    (C,) = frame_last_layer_corr(feats, CorrConfig(irreps="only0e"))
    assert corr_loss_layer(C) == pytest.approx(0.0, abs=1e-12)


def test_empty_dataset_rejected():
    params, _ = _model_and_frames()
    with pytest.raises(ValidationError):
        dataset_corr_value(params, Dataset(()), CorrConfig())
