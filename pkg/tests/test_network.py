import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_bag
from oracles import max_rel_error, numeric_grad
from pdac_subtype.exceptions import InputValidationError
from pdac_subtype.model.bags import SlideBag, assign_cells_to_patches
from pdac_subtype.model.network import (
    ClsPosition,
    Mode,
    ModelConfig,
    attention_mask_values,
    attmil_aggregate,
    backward,
    bce_loss,
    export_attention,
    forward,
    fuse,
    sigmoid,
    sinusoidal_2d,
    spatial_attention_pool,
)
from pdac_subtype.model.params import ModelParams, init_params

D_PATCH, D_CELL, D_ATT = 6, 4, 8


def _params(seed, lam=0.01):
    p = init_params(D_PATCH, D_CELL, D_ATT, seed=seed, lambda_dist=lam)
    # a non-trivial CLS token and bias so every path carries gradient
    p.cls_token[:] = np.random.default_rng(seed).normal(0, 0.5, D_CELL)
    p.head_b[...] = 0.1
    return p


def _grad_check(bag, params, config, y):
    loss_fn = lambda q: backward(bag, q, y, config=config)[0]  # noqa: E731
    _, g = backward(bag, params, y, config=config)
    num = numeric_grad(loss_fn, params, params.names())
    return max(max_rel_error(getattr(g, n).ravel().tolist(), num[n]) for n in params.names())


# --- oracles on the building blocks ---------------------------------------------


def test_pool_single_token_is_value_of_cls():
    p = _params(0)
    out = spatial_attention_pool(np.zeros((0, D_CELL)), np.zeros((0, 2)), p)
    assert np.allclose(out, p.W_v @ p.cls_token, atol=1e-15)


def test_pool_matches_explicit_softmax():
    rng = np.random.default_rng(3)
    p = _params(1, lam=0.02)
    cells = rng.normal(size=(3, D_CELL))
    cent = rng.uniform(0, 512, size=(3, 2))
    tokens = np.vstack([p.cls_token, cells])
    anchor = cent.mean(0)
    dist = np.r_[0.0, np.linalg.norm(cent - anchor, axis=1)]
    s = np.array([(p.W_q @ p.cls_token) @ (p.W_k @ t) / 2.0 for t in tokens]) - 0.02 * dist
    w = np.exp(s - s.max())
    w /= w.sum()
    want = sum(wi * (p.W_v @ t) for wi, t in zip(w, tokens))
    assert np.allclose(spatial_attention_pool(cells, cent, p), want, atol=1e-13)
    # no CLS position: the distance bias vanishes
    s0 = s + 0.02 * dist
    w0 = np.exp(s0 - s0.max())
    w0 /= w0.sum()
    want0 = sum(wi * (p.W_v @ t) for wi, t in zip(w0, tokens))
    assert np.allclose(spatial_attention_pool(cells, cent, p, ClsPosition.NONE), want0, atol=1e-13)


def test_fuse_row_major_outer_product():
    rng = np.random.default_rng(0)
    pe, c = rng.normal(size=3), rng.normal(size=2)
    W = rng.normal(size=(3, 6))
    want = [sum(W[r, i * 2 + j] * pe[i] * c[j] for i in range(3) for j in range(2)) for r in range(3)]
    assert np.allclose(fuse(pe, c, W), want, atol=1e-13)
    with pytest.raises(InputValidationError):
        fuse(pe, c, np.zeros((3, 5)))


def test_attmil_explicit_formula():
    rng = np.random.default_rng(1)
    p = _params(2)
    h = rng.normal(size=(4, D_PATCH))
    z, a = attmil_aggregate(h, p)
    s = np.array([p.attn_w @ (np.tanh(p.attn_V @ x) * (1 / (1 + np.exp(-p.attn_U @ x)))) for x in h])
    w = np.exp(s) / np.exp(s).sum()
    assert np.allclose(a, w, atol=1e-14) and np.allclose(z, w @ h, atol=1e-13)
    with pytest.raises(InputValidationError):
        attmil_aggregate(np.zeros((0, D_PATCH)), p)


def test_sigmoid_and_bce():
    assert sigmoid(0.0) == 0.5
    assert bce_loss(0.5, 1) == pytest.approx(np.log(2.0))
    assert np.isfinite(bce_loss(0.0, 1)) and bce_loss(0.0, 1) == pytest.approx(-np.log(1e-12))


def test_sinusoidal_2d_layout():
    pe = sinusoidal_2d([[0, 0], [3, 1]], 8)
    assert pe.shape == (2, 8)
    assert np.allclose(pe[0], [0, 0, 1, 1, 0, 0, 1, 1])
    assert pe[1, 0] == pytest.approx(np.sin(3.0))


def test_assign_cells_drops_outside_and_rejects_negative():
    bag = SlideBag("b", np.zeros((2, 3)), [[0, 0], [1, 0]], np.zeros((3, 2)), [[10, 10], [600, 20], [5000, 5000]])
    groups, dropped = assign_cells_to_patches(bag)
    assert groups == [[0], [1]] and dropped == 1
    with pytest.raises(InputValidationError):
        assign_cells_to_patches(SlideBag("b", np.zeros((1, 3)), [[0, 0]], np.zeros((1, 2)), [[-1, 3]]))


def test_bag_validation():
    with pytest.raises(InputValidationError):
        SlideBag("b", np.zeros((2, 3)), [[0, 0]])
    with pytest.raises(InputValidationError):
        SlideBag("b", np.zeros((2, 3)), [[0, 0], [0, 0]])


# --- gradients ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("cls_position", ["centroid", "none"])
def test_gradients_match_finite_differences(seed, cls_position):
    rng = np.random.default_rng(seed)
    bag = make_bag(rng, n_patches=3, max_cells=5, d_patch=D_PATCH, d_cell=D_CELL)
    cfg = ModelConfig(Mode.PANSUBNET, cls_position)
    assert _grad_check(bag, _params(seed), cfg, y=seed % 2) < 1e-4


def test_gradients_baseline_and_pos_enc():
    rng = np.random.default_rng(11)
    bag = make_bag(rng, d_patch=D_PATCH, d_cell=D_CELL)
    for cfg in (ModelConfig(Mode.ATTMIL_BASELINE), ModelConfig(Mode.PANSUBNET, pos_enc=True)):
        assert _grad_check(bag, _params(5), cfg, y=1) < 1e-4
    _, g = backward(bag, _params(5), 1, config=ModelConfig(Mode.ATTMIL_BASELINE))
    for name in ("cls_token", "W_q", "W_k", "W_v", "lambda_dist", "W_fuse"):
        assert not np.any(getattr(g, name))


def test_backward_out_buffer_matches_fresh():
    rng = np.random.default_rng(4)
    bag = make_bag(rng, d_patch=D_PATCH, d_cell=D_CELL)
    p = _params(4)
    l1, g1 = backward(bag, p, 1)
    buf = p.zeros_like()
    l2, g2 = backward(bag, p, 1, out=buf)
    assert l1 == l2 and g2 is buf
    for n in p.names():
        assert np.array_equal(getattr(g1, n), getattr(g2, n))


def test_saturated_loss_gradient_is_flat():
    rng = np.random.default_rng(0)
    bag = make_bag(rng, d_patch=D_PATCH, d_cell=D_CELL)
    p = _params(0)
    p.head_b[...] = 100.0
    loss, g = backward(bag, p, 0)
    assert loss == pytest.approx(-np.log(1e-12), rel=1e-9)
    assert g.head_b == 0.0


# --- invariants ----------------------------------------------------------------------


@given(st.integers(0, 10_000), st.integers(0, 3), st.integers(0, 3))
def test_translation_invariance(seed, dx, dy):
    rng = np.random.default_rng(seed)
    bag = make_bag(rng, d_patch=D_PATCH, d_cell=D_CELL)
    p = _params(seed % 7)
    shift = np.array([dx, dy])
    moved = SlideBag(bag.slide_id, bag.patch_emb, bag.grid + shift, bag.cell_emb,
                     bag.centroids + shift * 512.0, bag.cell_class)
    assert forward(moved, p)[0] == pytest.approx(forward(bag, p)[0], abs=1e-12)


@given(st.integers(0, 10_000))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    bag = make_bag(rng, n_patches=4, d_patch=D_PATCH, d_cell=D_CELL)
    p = _params(seed % 5)
    pp = rng.permutation(bag.n_patches)
    cp = rng.permutation(bag.n_cells)
    perm = SlideBag(bag.slide_id, bag.patch_emb[pp], bag.grid[pp], bag.cell_emb[cp], bag.centroids[cp], bag.cell_class[cp])
    p0, a0 = forward(bag, p)
    p1, a1 = forward(perm, p)
    assert p1 == pytest.approx(p0, abs=1e-12)
    assert np.allclose(a1, a0[pp], atol=1e-12)
    assert abs(a0.sum() - 1.0) <= 1e-12


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_fusion_bilinear(seed, s, t):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(3, 12))
    p1, p2, c1, c2 = rng.normal(size=3), rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
    assert np.allclose(fuse(s * p1 + t * p2, c1, W), s * fuse(p1, c1, W) + t * fuse(p2, c1, W), atol=1e-10)
    assert np.allclose(fuse(p1, s * c1 + t * c2, W), s * fuse(p1, c1, W) + t * fuse(p1, c2, W), atol=1e-10)


@given(st.integers(0, 10_000))
def test_baseline_ignores_cells(seed):
    rng = np.random.default_rng(seed)
    bag = make_bag(rng, d_patch=D_PATCH, d_cell=D_CELL)
    p = _params(1)
    cfg = ModelConfig(Mode.ATTMIL_BASELINE)
    other = SlideBag(bag.slide_id, bag.patch_emb, bag.grid, rng.normal(size=bag.cell_emb.shape) * 10, bag.centroids)
    assert forward(bag, p, config=cfg)[0] == forward(other, p, config=cfg)[0] == forward(bag.without_cells(), p, config=cfg)[0]


def test_pos_enc_breaks_translation_symmetry():
    rng = np.random.default_rng(2)
    bag = make_bag(rng, d_patch=D_PATCH, d_cell=D_CELL)
    p = _params(2)
    cfg = ModelConfig(pos_enc=True)
    moved = SlideBag(bag.slide_id, bag.patch_emb, bag.grid + 5, bag.cell_emb, bag.centroids + 2560.0)
    assert forward(moved, p, config=cfg)[0] != forward(bag, p, config=cfg)[0]


def test_export_attention_rows():
    rng = np.random.default_rng(5)
    bag = make_bag(rng, n_patches=4, d_patch=D_PATCH, d_cell=D_CELL)
    rows = export_attention(bag, _params(3))
    assert [(r[0], r[1]) for r in rows] == [tuple(g) for g in bag.grid.tolist()]
    assert sum(r[2] for r in rows) == pytest.approx(1.0, abs=1e-12)
    masks = [r[3] for r in rows]
    assert min(masks) == 0 and max(masks) == 255
    assert attention_mask_values([0.5, 0.5]).tolist() == [255, 255]


def test_params_validate_shapes():
    p = init_params(D_PATCH, D_CELL, D_ATT, seed=0)
    bad = p.copy()
    bad.W_fuse = np.zeros((2, 2))
    with pytest.raises(InputValidationError):
        bad.validate()
    assert isinstance(p.validate(), ModelParams)


def test_zero_lambda_is_unbiased_attention():
    rng = np.random.default_rng(8)
    p = _params(3, lam=0.0)
    cells, cent = rng.normal(size=(4, D_CELL)), rng.uniform(0, 512, size=(4, 2))
    assert np.array_equal(spatial_attention_pool(cells, cent, p), spatial_attention_pool(cells, cent, p, ClsPosition.NONE))


def test_lambda_gradient_zero_with_single_cells():
    rng = np.random.default_rng(9)
    bag = make_bag(rng, max_cells=1, d_patch=D_PATCH, d_cell=D_CELL)
    _, g = backward(bag, _params(1), 1)
    assert float(g.lambda_dist) == 0.0
