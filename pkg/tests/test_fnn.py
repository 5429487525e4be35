"""
Tests for the layered network H_W, its masks and the exact prox network.
"""
import numpy as np
import pytest

from gdnet.errors import ConfigValidationError, DimensionError, StaleTapeError
from gdnet.fnn import (
    FnnParams,
    InitScheme,
    LayerSpec,
    Mask,
    apply_mask,
    build_exact_prox_net,
    fnn_backward,
    fnn_forward,
    init_weights,
    layer_dims,
    match_exact_prox_layout,
    param_shapes,
)
from gdnet.numerics import rand_orthogonal
from gdnet.regularizer import ElasticNet, OrthoRegularizer
from gdnet.schemas import get_preset

from oracles import central_difference_grad


def _naive_conv(img, block, k, filters):
    H, W, C = img.shape
    before = (k - 1) // 2
    out = np.zeros((H, W, filters))
    for i in range(H):
        for j in range(W):
            for f in range(filters):
                acc = block[-1, f]
                for ki in range(k):
                    for kj in range(k):
                        r, c = i + ki - before, j + kj - before
                        if 0 <= r < H and 0 <= c < W:
                            for ch in range(C):
                                acc += block[(ki * k + kj) * C + ch, f] * img[r, c, ch]
                out[i, j, f] = acc
    return out.ravel()


# ============= Shapes =============

def test_layer_dims_and_param_shapes():
    specs = (LayerSpec.dense(8, augment_bias=True), LayerSpec.relu(), LayerSpec.dense(3))
    assert layer_dims(specs, 5) == [5, 8, 8, 3]
    assert param_shapes(specs, 5) == ((8, 6), (3, 8))


def test_separable_prox_stack_has_seven_params_per_coordinate():
    cfg = get_preset("en100")
    shapes = param_shapes(cfg.model.specs(), 100)
    assert sum(int(np.prod(s)) for s in shapes) == 700


def test_conv_dimension_mismatch_names_layer():
    specs = (LayerSpec.dense(10), LayerSpec.conv2d(3, 2, 3, 3, 1))
    with pytest.raises(DimensionError) as info:
        layer_dims(specs, 4)
    assert info.value.details["layer"] == 1


def test_forward_rejects_wrong_parameter_shapes(rng):
    specs = (LayerSpec.dense(3),)
    w = FnnParams(rng.standard_normal(8), ((2, 4),))
    with pytest.raises(DimensionError):
        fnn_forward(specs, w, np.zeros(4))


def test_params_are_read_only(rng):
    w = FnnParams(rng.standard_normal(6), ((2, 3),))
    with pytest.raises(ValueError):
        w.flat[0] = 1.0


# ============= Forward =============

def test_dense_forward_with_bias(rng):
    specs = (LayerSpec.dense(3, augment_bias=True),)
    block = rng.standard_normal((3, 5))
    w = FnnParams.from_blocks([block])
    x = rng.standard_normal(4)
    out, _ = fnn_forward(specs, w, x)
    np.testing.assert_allclose(out, block[:, :4] @ x + block[:, 4], rtol=1e-12, atol=1e-13)


def test_conv_forward_matches_naive_loops(rng):
    spec = LayerSpec.conv2d(3, 2, 4, 5, 2)
    block = rng.standard_normal((3 * 3 * 2 + 1, 2))
    x = rng.standard_normal(4 * 5 * 2)
    out, _ = fnn_forward((spec,), FnnParams.from_blocks([block]), x)
    ref = _naive_conv(x.reshape(4, 5, 2), block, 3, 2)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_layernorm_output_is_standardized(rng):
    out, _ = fnn_forward((LayerSpec.layernorm(epsilon=1e-12),), FnnParams.zeros(()), rng.standard_normal((3, 9)))
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=1), 1.0, rtol=1e-9)


def test_batch_rows_match_single_inputs(rng):
    specs = (LayerSpec.dense(6, augment_bias=True), LayerSpec.relu(), LayerSpec.dense(4))
    w = init_weights(specs, InitScheme.HE_NORMAL, rng, 4)
    X = rng.standard_normal((5, 4))
    out, _ = fnn_forward(specs, w, X)
    for i in range(5):
        np.testing.assert_allclose(out[i], fnn_forward(specs, w, X[i])[0], rtol=1e-12, atol=1e-13)


# ============= Exact prox network =============

@pytest.mark.acceptance
@pytest.mark.parametrize("layout", ["dense", "separable"])
def test_exact_prox_net_reproduces_shrinkage(layout, rng):
    gamma, lam1, lam2 = 0.02, 1.0, 1.0
    specs, w = build_exact_prox_net(gamma, lam1, lam2, 100, layout)
    X = rng.uniform(-3, 3, (100, 100))
    out, _ = fnn_forward(specs, w, X)
    ref = ElasticNet(lam1, lam2).prox(X, gamma)
    assert np.max(np.abs(out - ref)) < 1e-12


@pytest.mark.acceptance
def test_exact_prox_net_large_sample(rng):
    specs, w = build_exact_prox_net(0.5, 0.3, 2.0, 100, "separable")
    X = rng.standard_normal((10_000, 100)) * 2.0
    out, _ = fnn_forward(specs, w, X)
    assert np.max(np.abs(out - ElasticNet(0.3, 2.0).prox(X, 0.5))) < 1e-12


def test_exact_prox_init_scheme(rng):
    specs, w_star = build_exact_prox_net(0.1, 1.0, 0.5, 7, "dense")
    w = init_weights(specs, "exact_prox", None, 7, prox_params=(0.1, 1.0, 0.5))
    np.testing.assert_array_equal(w.flat, w_star.flat)


def test_exact_prox_init_rejects_other_stacks():
    specs = (LayerSpec.dense(7),)
    with pytest.raises(ConfigValidationError):
        init_weights(specs, "exact_prox", None, 7, prox_params=(0.1, 1.0, 0.5))


@pytest.mark.acceptance
def test_exact_prox_net_reproduces_prox_in_rotated_basis(rng):
    gamma, lam1, lam2 = 0.3, 0.7, 0.4
    B = rand_orthogonal(6, rng)
    specs, w = build_exact_prox_net(gamma, lam1, lam2, 6, "ortho", basis=B)
    X = rng.uniform(-3, 3, (200, 6))
    out, _ = fnn_forward(specs, w, X)
    ref = OrthoRegularizer(ElasticNet(lam1, lam2), B).prox(X, gamma)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_ortho_layout_without_basis_is_plain_shrinkage(rng):
    specs, w = build_exact_prox_net(0.2, 1.0, 0.5, 5, "ortho")
    X = rng.standard_normal((50, 5)) * 3.0
    out, _ = fnn_forward(specs, w, X)
    assert np.max(np.abs(out - ElasticNet(1.0, 0.5).prox(X, 0.2))) < 1e-12


@pytest.mark.parametrize("layout", ["dense", "separable"])
def test_shrinkage_layouts_reject_a_basis(layout, rng):
    with pytest.raises(ConfigValidationError):
        build_exact_prox_net(0.1, 1.0, 0.5, 4, layout, basis=rand_orthogonal(4, rng))


def test_ortho_layout_rejects_misshaped_basis():
    with pytest.raises(DimensionError):
        build_exact_prox_net(0.1, 1.0, 0.5, 4, "ortho", basis=np.eye(3))


@pytest.mark.parametrize("layout", ["dense", "separable", "ortho"])
def test_exact_prox_layout_is_recognized(layout):
    specs, _ = build_exact_prox_net(0.1, 1.0, 0.5, 5, layout)
    assert match_exact_prox_layout(specs, 5) == layout
    assert match_exact_prox_layout(specs, 6) is None


def test_exact_prox_init_scheme_uses_basis(rng):
    B = rand_orthogonal(5, rng)
    specs, w_star = build_exact_prox_net(0.1, 1.0, 0.5, 5, "ortho", basis=B)
    w = init_weights(specs, "exact_prox", None, 5, prox_params=(0.1, 1.0, 0.5), basis=B)
    np.testing.assert_array_equal(w.flat, w_star.flat)


# ============= Backward =============

@pytest.mark.parametrize(
    "specs,input_dim",
    [
        ((LayerSpec.dense(6, augment_bias=True), LayerSpec.layernorm(), LayerSpec.dense(3)), 4),
        ((LayerSpec.separable(3, 2, 2, augment_bias=True), LayerSpec.layernorm(), LayerSpec.dense(2)), 6),
        ((LayerSpec.conv2d(3, 2, 3, 3, 1), LayerSpec.layernorm(), LayerSpec.conv2d(1, 1, 3, 3, 2)), 9),
    ],
)
def test_backward_matches_finite_differences(specs, input_dim, rng):
    w = init_weights(specs, InitScheme.HE_NORMAL, rng, input_dim)
    X = rng.standard_normal((2, input_dim))
    out, tape = fnn_forward(specs, w, X)
    upstream = rng.standard_normal(out.shape)
    grad_w, grad_x = fnn_backward(tape, w, upstream)

    def loss_w(flat):
        return float(np.sum(upstream * fnn_forward(specs, w.with_flat(flat), X)[0]))

    def loss_x(flat):
        return float(np.sum(upstream * fnn_forward(specs, w, flat.reshape(X.shape))[0]))

    fd_w = central_difference_grad(loss_w, w.flat)
    fd_x = central_difference_grad(loss_x, X.ravel())
    assert np.linalg.norm(grad_w.flat - fd_w) <= 1e-6 * np.linalg.norm(fd_w)
    assert np.linalg.norm(grad_x.ravel() - fd_x) <= 1e-6 * np.linalg.norm(fd_x)


def test_backward_rejects_stale_tape(rng):
    specs = (LayerSpec.dense(2),)
    w = FnnParams(rng.standard_normal(6), ((2, 3),))
    _, tape = fnn_forward(specs, w, np.ones(3))
    with pytest.raises(StaleTapeError):
        fnn_backward(tape, w.with_flat(w.flat), np.ones(2))


# ============= Masks =============

def test_mask_application(rng):
    shapes = ((2, 3), (4,))
    w = FnnParams(rng.standard_normal(10), shapes)
    flat = np.array([1, 0, 1, 1, 0, 0, 1, 1, 1, 0], dtype=np.uint8)
    m = Mask(flat, shapes)
    assert m.active_count == 6
    np.testing.assert_array_equal(apply_mask(w, m).flat, w.flat * flat)


def test_mask_must_be_congruent(rng):
    w = FnnParams(rng.standard_normal(6), ((2, 3),))
    with pytest.raises(DimensionError):
        apply_mask(w, Mask.ones(((3, 2),)))


def test_he_normal_variance(rng):
    specs = (LayerSpec.dense(400),)
    w = init_weights(specs, InitScheme.HE_NORMAL, rng, 50)
    assert np.var(w.flat) == pytest.approx(2.0 / 50, rel=0.05)
