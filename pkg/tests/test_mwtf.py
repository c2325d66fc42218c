import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from avloc import numkit as nk
from avloc.mwtf import (FusionConfig, FusionSubmoduleParams, LayoutError, WindowLayout,
                        apply_attention, attention_maps, fuse_block, mwtf_forward,
                        parse_layouts, qkv_project, split)

# ---------------------------------------------------------------------------
# independent oracle: the full block fusion in pure Python loops
# ---------------------------------------------------------------------------


def oracle_fuse_block(block, params, mode, eps=1e-5):
    """Norm -> QKV -> beta -> softmax -> products, entirely elementwise.

    `block` is a list of rows; `params` maps the six projection names to
    lists of rows. No numpy anywhere, so this path shares nothing with the
    implementation it checks.
    """
    w = len(block)
    df = len(block[0])

    normed = []
    for row in block:
        mu = sum(row) / df
        var = sum((x - mu) ** 2 for x in row) / df
        inv = 1.0 / math.sqrt(var + eps)
        normed.append([(x - mu) * inv for x in row])

    def mat_nt(x, m):  # x (n x k) times m (p x k)^T -> (n x p)
        return [[sum(xr[j] * mr[j] for j in range(len(xr))) for mr in m] for xr in x]

    def apply_elem(x, f):
        return [[f(v) for v in row] for row in x]

    relu = lambda v: v if v > 0.0 else 0.0
    q = mat_nt(apply_elem(mat_nt(normed, params["wq_in"]), math.tanh), params["wq_out"])
    k = mat_nt(apply_elem(mat_nt(normed, params["wk_in"]), math.tanh), params["wk_out"])
    v = mat_nt(apply_elem(mat_nt(normed, params["wv_in"]), relu), params["wv_out"])
    d = len(q[0])

    def softmax(vals):
        top = max(vals)
        exps = [math.exp(x - top) for x in vals]
        total = sum(exps)
        return [e / total for e in exps]

    a_t = None
    if mode in ("temporal", "multi_domain"):
        beta_t = [[sum(q[i][x] * k[j][x] for x in range(d)) / math.sqrt(d)
                   for j in range(w)] for i in range(w)]
        a_t = [softmax(row) for row in beta_t]

    a_f = None
    if mode in ("feature", "multi_domain"):
        beta_f = [[sum(k[t][i] * q[t][j] for t in range(w)) / math.sqrt(w)
                   for j in range(d)] for i in range(d)]
        cols = [softmax([beta_f[i][j] for i in range(d)]) for j in range(d)]
        a_f = [[cols[j][i] for j in range(d)] for i in range(d)]

    if mode == "temporal":
        mixed = v
    else:
        mixed = [[sum(v[t][i] * a_f[i][j] for i in range(d)) for j in range(d)]
                 for t in range(w)]
    if mode == "feature":
        return mixed
    return [[sum(a_t[i][t] * mixed[t][j] for t in range(w)) for j in range(d)]
            for i in range(w)]


def make_params(din=8, width=6, seed=0, store=None):
    store = store or nk.ParamStore(seed)
    rng = np.random.default_rng(seed)
    return store, FusionSubmoduleParams.create(store, "fuse", din, width, rng)


def params_as_lists(p):
    return {f: getattr(p, f).data.tolist() for f in FusionSubmoduleParams.FIELDS}


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------


def test_split_two_halves():
    f = nk.Tensor(np.arange(40.0).reshape(10, 4))
    blocks = split(f, WindowLayout((5, 5)))
    assert_allclose(blocks[0].data, f.data[:5])
    assert_allclose(blocks[1].data, f.data[5:])


def test_split_variable_windows():
    f = nk.Tensor(np.arange(30.0).reshape(10, 3))
    blocks = split(f, WindowLayout((3, 3, 4)))
    assert [b.shape for b in blocks] == [(3, 3), (3, 3), (4, 3)]
    assert_allclose(np.concatenate([b.data for b in blocks]), f.data)


def test_split_identity():
    f = nk.Tensor(np.arange(20.0).reshape(10, 2))
    (block,) = split(f, WindowLayout((10,)))
    assert_allclose(block.data, f.data)


def test_split_bad_layout_names_submodule_and_sum():
    f = nk.Tensor(np.zeros((10, 2)))
    with pytest.raises(LayoutError, match=r"sub-module 2.*sum to 9.*T=10"):
        split(f, WindowLayout((4, 5)), submodule=2)


def test_layout_rejects_non_positive_windows():
    with pytest.raises(LayoutError):
        WindowLayout((3, 0, 7))


# ---------------------------------------------------------------------------
# qkv projection
# ---------------------------------------------------------------------------


def test_qkv_zero_block_gives_zero_qkv():
    _, p = make_params()
    q, k, v = qkv_project(nk.Tensor(np.zeros((4, 8))), p)
    for out in (q, k, v):
        assert_allclose(out.data, 0.0)


def test_qkv_single_row_shapes():
    _, p = make_params()
    q, k, v = qkv_project(nk.Tensor(np.random.default_rng(0).normal(size=(1, 8))), p)
    assert q.shape == k.shape == v.shape == (1, 6)


def test_qkv_gradient():
    store, p = make_params(din=5, width=4, seed=1)
    rng = np.random.default_rng(1)
    block = store.create("block", (3, 5), rng)
    pulls = [nk.constant(rng.normal(size=(3, 4))) for _ in range(3)]

    def loss():
        q, k, v = qkv_project(block, p)
        terms = [nk.sum_all(nk.mul(t, w)) for t, w in zip((q, k, v), pulls)]
        return nk.add(nk.add(terms[0], terms[1]), terms[2])

    report = nk.grad_check(loss, store, eps=1e-5)
    assert report.max_rel_err < 1e-5, report.format()


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------


def test_attention_single_timestep():
    _, p = make_params()
    q, k, _ = qkv_project(nk.Tensor(np.random.default_rng(2).normal(size=(1, 8))), p)
    a_t, a_f = attention_maps(q, k, "multi_domain")
    assert_allclose(a_t.data, [[1.0]])
    assert a_f.shape == (6, 6)


def test_attention_zero_qk_is_uniform():
    q = nk.Tensor(np.zeros((4, 6)))
    k = nk.Tensor(np.zeros((4, 6)))
    a_t, a_f = attention_maps(q, k, "multi_domain")
    assert_allclose(a_t.data, 0.25)
    assert_allclose(a_f.data, 1.0 / 6.0)


def test_attention_modes_return_only_their_map():
    rng = np.random.default_rng(3)
    q = nk.Tensor(rng.normal(size=(3, 5)))
    k = nk.Tensor(rng.normal(size=(3, 5)))
    a_t, a_f = attention_maps(q, k, "temporal")
    assert a_t is not None and a_f is None
    a_t, a_f = attention_maps(q, k, "feature")
    assert a_t is None and a_f is not None


@pytest.mark.parametrize("w,d", [(1, 4), (2, 4), (5, 3), (10, 7)])
def test_attention_stochasticity(w, d):
    rng = np.random.default_rng(100 + w * d)
    for _ in range(5):
        q = nk.Tensor(rng.normal(scale=3.0, size=(w, d)))
        k = nk.Tensor(rng.normal(scale=3.0, size=(w, d)))
        a_t, a_f = attention_maps(q, k, "multi_domain")
        assert_allclose(a_t.data.sum(axis=1), 1.0, atol=1e-9)
        assert_allclose(a_f.data.sum(axis=0), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# applying attention
# ---------------------------------------------------------------------------


def test_apply_identity_maps():
    v = nk.Tensor(np.random.default_rng(4).normal(size=(3, 3)))
    eye = nk.Tensor(np.eye(3))
    assert_allclose(apply_attention(eye, v, eye, "multi_domain").data, v.data)


def test_apply_uniform_temporal_averages():
    rng = np.random.default_rng(5)
    v = nk.Tensor(rng.normal(size=(4, 3)))
    uniform = nk.Tensor(np.full((4, 4), 0.25))
    out = apply_attention(uniform, v, None, "temporal").data
    assert_allclose(out, np.tile(v.data.mean(axis=0), (4, 1)))


def test_apply_hand_case():
    a_t = nk.Tensor(np.eye(2))
    v = nk.Tensor(np.eye(2))
    a_f = nk.Tensor(np.full((2, 2), 0.5))
    out = apply_attention(a_t, v, a_f, "multi_domain")
    assert_allclose(out.data, [[0.5, 0.5], [0.5, 0.5]])


def test_temporal_output_in_value_hull():
    store, p = make_params(din=6, width=5, seed=6)
    rng = np.random.default_rng(6)
    block = nk.Tensor(rng.normal(size=(7, 6)))
    out = fuse_block(block, p, "temporal").data
    _, _, v = qkv_project(block, p)
    assert np.all(out >= v.data.min(axis=0) - 1e-12)
    assert np.all(out <= v.data.max(axis=0) + 1e-12)


# ---------------------------------------------------------------------------
# full fusion
# ---------------------------------------------------------------------------


def test_forward_degenerate_config_is_single_block():
    store, p = make_params(din=8, width=6, seed=7)
    f = nk.Tensor(np.random.default_rng(7).normal(size=(10, 8)))
    cfg = FusionConfig(parse_layouts([[10]]), width=6)
    assert_allclose(mwtf_forward(f, cfg, [p]).data, fuse_block(f, p, "multi_domain").data)


def test_forward_output_shape():
    store = nk.ParamStore(8)
    rng = np.random.default_rng(8)
    cfg = FusionConfig(parse_layouts([[10], [5, 5]]), width=8, shared_weights=True)
    p = FusionSubmoduleParams.create(store, "fuse", 4, 8, rng)
    f = nk.Tensor(rng.normal(size=(10, 4)))
    assert mwtf_forward(f, cfg, [p]).shape == (10, 16)


@pytest.mark.parametrize("mode", ["temporal", "feature", "multi_domain"])
def test_forward_matches_pure_python_oracle(mode):
    store, p = make_params(din=8, width=6, seed=9)
    rng = np.random.default_rng(9)
    cfg = FusionConfig(parse_layouts([[10]]), width=6, mode=mode)
    plists = params_as_lists(p)
    for _ in range(3):
        f = rng.normal(size=(10, 8))
        ours = mwtf_forward(nk.Tensor(f), cfg, [p]).data
        ref = np.array(oracle_fuse_block(f.tolist(), plists, mode))
        assert np.abs(ours - ref).max() < 1e-10


def test_block_locality_is_bit_exact():
    store, p = make_params(din=5, width=4, seed=10)
    rng = np.random.default_rng(10)
    layout = WindowLayout((3, 3, 4))
    cfg = FusionConfig([layout], width=4)
    f = rng.normal(size=(10, 5))
    base = mwtf_forward(nk.Tensor(f), cfg, [p]).data
    bounds = [(0, 3), (3, 6), (6, 10)]
    for t in range(10):
        bumped = f.copy()
        bumped[t, 1] += 1.0  # a whole-row shift would vanish under layer norm
        out = mwtf_forward(nk.Tensor(bumped), cfg, [p]).data
        for start, stop in bounds:
            inside = start <= t < stop
            same = out[start:stop].tobytes() == base[start:stop].tobytes()
            assert same != inside, (t, start, stop)


def test_shared_weights_make_identical_layouts_identical():
    store, p = make_params(din=5, width=4, seed=11)
    cfg = FusionConfig(parse_layouts([[5, 5], [5, 5]]), width=4, shared_weights=True)
    f = nk.Tensor(np.random.default_rng(11).normal(size=(10, 5)))
    out = mwtf_forward(f, cfg, [p]).data
    assert np.array_equal(out[:, :4], out[:, 4:])


def test_independent_weights_expect_one_set_per_submodule():
    store = nk.ParamStore(12)
    rng = np.random.default_rng(12)
    cfg = FusionConfig(parse_layouts([[10], [5, 5]]), width=4, shared_weights=False)
    params = [FusionSubmoduleParams.create(store, f"sub{i}", 5, 4, rng) for i in range(2)]
    f = nk.Tensor(rng.normal(size=(10, 5)))
    assert mwtf_forward(f, cfg, params).shape == (10, 8)
    with pytest.raises(ValueError, match="parameter set"):
        mwtf_forward(f, cfg, params[:1])


def test_forward_propagates_layout_error():
    store, p = make_params(din=5, width=4, seed=13)
    cfg = FusionConfig(parse_layouts([[4, 5]]), width=4)
    with pytest.raises(LayoutError, match="sum to 9"):
        mwtf_forward(nk.Tensor(np.zeros((10, 5))), cfg, [p])


def test_forward_gradient():
    store, p = make_params(din=4, width=3, seed=14)
    rng = np.random.default_rng(14)
    f = store.create("f", (6, 4), rng)
    cfg = FusionConfig(parse_layouts([[6], [3, 3]]), width=3)
    pull = nk.constant(rng.normal(size=(6, 6)))
    report = nk.grad_check(
        lambda: nk.sum_all(nk.mul(mwtf_forward(f, cfg, [p]), pull)), store, eps=1e-5)
    assert report.max_rel_err < 1e-3, report.format()
