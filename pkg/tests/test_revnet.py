import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from petra import tensor as T
from petra.autograd import chain_backprop, evaluate, record, vjp
from petra.revnet import (NetworkPlan, ReversibleBlock, build_network, build_small, regroup, rev_backward_fused,
                          rev_forward, rev_inverse)


def forward_all(plan, params, x, bn_mode="train"):
    for s, th in zip(plan.stages, params):
        x = evaluate(s.block, x, th, bn_mode=bn_mode)
    return x


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_inverse_recovers_input_f64(half, hw, seed):
    rng = np.random.default_rng(seed)
    blk = ReversibleBlock(2 * half)
    th = blk.init(rng)
    x = rng.standard_normal((2, 2 * half, hw + 1, hw + 1))
    y = rev_forward(blk, x, th)
    assert np.max(np.abs(rev_inverse(blk, y, th) - x)) < 1e-11


def test_inverse_recovers_input_f32(rng):
    blk = ReversibleBlock(4, dtype="f32")
    th = blk.init(rng, "f32")
    x = rng.standard_normal((3, 4, 5, 5)).astype(np.float32)
    y = rev_forward(blk, x, th)
    assert y.dtype == np.float32
    assert np.max(np.abs(rev_inverse(blk, y, th) - x)) < 1e-5


def test_coupling_equations(rng):
    blk = ReversibleBlock(4)
    th = blk.init(rng)
    x = rng.standard_normal((2, 4, 3, 3))
    x1, x2 = T.split_channels(x)
    y1, y2 = T.split_channels(rev_forward(blk, x, th))
    np.testing.assert_array_equal(y1, x2)
    np.testing.assert_allclose(y2, x1 + evaluate(blk.f_tilde, x2, th), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_reconstruction_error_is_first_order_in_parameter_drift(seed):
    rng = np.random.default_rng(seed)
    blk = ReversibleBlock(4)
    th = blk.init(rng)
    x = rng.standard_normal((4, 4, 4, 4))
    y = rev_forward(blk, x, th)
    u = [rng.standard_normal(p.shape) for p in th]

    def err(eps):
        drifted = [p + eps * d for p, d in zip(th, u)]
        return np.linalg.norm(rev_inverse(blk, y, drifted) - x)

    ratio = err(2e-4) / err(1e-4)
    assert 1.5 <= ratio <= 2.5


def test_fused_backward_matches_naive_path_bitwise(rng):
    blk = ReversibleBlock(6)
    th = blk.init(rng)
    y = rng.standard_normal((3, 6, 4, 4))
    d = rng.standard_normal(y.shape)
    xf, dinf, gf = rev_backward_fused(blk, y, d, th, bn_mode="train")
    xn = rev_inverse(blk, y, th, bn_mode="train")
    _, g = record(blk, xn, th, bn_mode="train")
    gp = vjp(g, d)
    np.testing.assert_array_equal(xf, xn)
    np.testing.assert_array_equal(dinf, gp.input_grad)
    for a, b in zip(gf, gp.param_grads):
        np.testing.assert_array_equal(a, b)


def test_fused_backward_rejects_shape_mismatch(rng):
    blk = ReversibleBlock(4)
    th = blk.init(rng)
    with pytest.raises(T.ShapeError):
        rev_backward_fused(blk, np.zeros((2, 4, 3, 3)), np.zeros((2, 4, 3, 2)), th)


def test_reversible_block_needs_even_channels():
    with pytest.raises(ValueError):
        ReversibleBlock(3)


def zero_f(rng, channels=4):
    """A block whose F is identically zero (last batch-norm scale and shift at 0)."""
    blk = ReversibleBlock(channels)
    th = blk.init(rng)
    names = [p.name for p in blk.param_specs()]
    gamma = max(i for i, n in enumerate(names) if n.endswith("gamma"))
    th[gamma][...] = 0
    return blk, th


def test_zero_function_inverse_is_the_swap(rng):
    blk, th = zero_f(rng)
    x = rng.standard_normal((2, 4, 3, 3))
    x1, x2 = T.split_channels(x)
    y = rev_forward(blk, x, th)
    np.testing.assert_array_equal(y, T.concat_channels(x2, x1))
    np.testing.assert_array_equal(rev_inverse(blk, y, th), x)
    d = rng.standard_normal(y.shape)
    d1, d2 = T.split_channels(d)
    _, dx, _ = rev_backward_fused(blk, y, d, th, bn_mode="train")
    np.testing.assert_array_equal(dx, T.concat_channels(d2, d1))


def test_fused_backward_evaluates_f_once(rng):
    blk = ReversibleBlock(4)
    th = blk.init(rng)
    calls = []
    inner = blk.f_tilde
    blk.f_tilde = lambda g, x, ps: calls.append(1) or inner(g, x, ps)
    y = rng.standard_normal((2, 4, 3, 3))
    rev_backward_fused(blk, y, rng.standard_normal(y.shape), th, bn_mode="train")
    assert len(calls) == 1


def test_downsample_recompute_equals_retained_graph(rng):
    plan, params = build_small(stages=4, width=8, rng=rng, downsample_at=2)
    st = plan.stages[1]
    assert st.kind == "non-reversible"
    x = rng.standard_normal((3,) + st.in_shape)
    y, kept = record(st.block, x, params[1])
    d = rng.standard_normal(y.shape)
    a = vjp(kept, d)
    _, again = record(st.block, x, params[1])
    b = vjp(again, d)
    np.testing.assert_array_equal(a.input_grad, b.input_grad)
    for u, v in zip(a.param_grads, b.param_grads):
        np.testing.assert_array_equal(u, v)


def test_build_small_contract(rng):
    plan, params = build_small(stages=4, width=8, rng=np.random.default_rng(5), in_channels=2)
    assert plan.J == 4 and [s.kind for s in plan.stages].count("reversible") == 2
    _, again = build_small(stages=4, width=8, rng=np.random.default_rng(5), in_channels=2)
    for a, b in zip(params, again):
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)
    stages = [(s.block, th) for s, th in zip(plan.stages, params)]
    labels = rng.integers(0, 10, 8)
    loss, grads = chain_backprop(stages, rng.standard_normal((8, 2, 8, 8)),
                                 lambda g, y: g.apply("cross_entropy", y, labels=labels))
    assert np.isfinite(loss) and len(grads) == 4
    with pytest.raises(ValueError):
        build_small(stages=1)


@pytest.mark.parametrize("depth,ratio", [("18", 12.2 / 11.7), ("34", 22.3 / 21.8), ("50", 30.4 / 25.6)])
def test_revnet_to_resnet_parameter_ratio(depth, ratio):
    rev, _ = build_network("revnet" + depth, "imagenet", with_params=False)
    res, _ = build_network("resnet" + depth, "imagenet", with_params=False)
    assert rev.num_params() / res.num_params() == pytest.approx(ratio, rel=0.05)


def test_cifar_stem_is_3x3_without_maxpool():
    plan, _ = build_network("revnet18", "cifar10", with_params=False)
    cfg = plan.stages[0].block.config()
    assert cfg["kernel"] == 3 and not cfg["maxpool"]
    assert plan.stages[0].out_shape[1:] == (32, 32)
    with pytest.raises(ValueError):
        build_network("vgg16")


@pytest.mark.parametrize("name,stages", [("revnet18", 10), ("revnet34", 18), ("revnet50", 18)])
def test_stage_counts(name, stages):
    plan, _ = build_network(name, "cifar10", with_params=False)
    assert plan.J == stages


@pytest.mark.parametrize("name,millions,tol", [
    ("resnet18", 11.7, 0.05), ("resnet34", 21.8, 0.05), ("resnet50", 25.6, 0.05),
    ("revnet18", 12.2, 0.05), ("revnet34", 22.3, 0.05),
    ("revnet50", 30.4, 0.05 * 30.4),  # 31.1M: the downsampling layers are not fully specified
])
def test_imagenet_parameter_counts(name, millions, tol):
    plan, _ = build_network(name, "imagenet", with_params=False)
    assert abs(plan.num_params() / 1e6 - millions) <= tol


def test_stage_kinds_and_shapes_chain():
    plan, _ = build_network("revnet18", "cifar10", with_params=False)
    kinds = [s.kind for s in plan.stages]
    assert kinds[0] == "head" and kinds[-1] == "tail"
    assert kinds.count("non-reversible") == 3
    for a, b in zip(plan.stages, plan.stages[1:]):
        assert a.out_shape == b.in_shape
    assert plan.stages[-1].out_shape == (10,)


def test_plan_json_round_trip(rng):
    plan, params = build_small(stages=5, width=8, rng=rng, downsample_at=3)
    again = NetworkPlan.from_json(json.loads(plan.dumps()))
    assert again.to_json() == plan.to_json()
    x = rng.standard_normal((2,) + plan.input_shape)
    np.testing.assert_array_equal(forward_all(plan, params, x), forward_all(again, params, x))


def test_regroup_preserves_the_function(rng):
    plan, params = build_small(stages=6, width=8, rng=rng)
    merged, mp = regroup(plan, params, [[0, 1], [2, 3, 4], [5]])
    assert merged.J == 3
    x = rng.standard_normal((2,) + plan.input_shape)
    np.testing.assert_array_equal(forward_all(plan, params, x), forward_all(merged, mp, x))
    with pytest.raises(ValueError):
        regroup(plan, params, [[0, 2], [1, 3, 4, 5]])


def test_small_net_shapes(rng):
    plan, params = build_small(stages=6, width=32, rng=rng, input_hw=32, head_stride=2, downsample_at=3)
    assert plan.num_params() <= 200_000
    assert [s.kind for s in plan.stages] == ["head", "reversible", "non-reversible", "reversible", "reversible",
                                             "tail"]
    out = forward_all(plan, params, rng.standard_normal((2, 3, 32, 32)))
    assert out.shape == (2, 10)
