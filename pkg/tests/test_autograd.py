import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from petra import nn
from petra.autograd import (PRIMITIVES, Graph, UnregisteredPrimitiveError, chain_backprop, evaluate, record,
                            register, vjp)
from petra.gradcheck import check_primitive, check_stage, primitive_cases


def small_stage(rng, ch=4):
    seq = nn.Sequential([nn.conv("c1", ch, ch), nn.bn("b1", ch), nn.relu(), nn.conv("c2", ch, ch)])
    return seq, seq.init(rng)


def test_every_registered_primitive_has_a_check_case(rng):
    covered = {name for name, _, _ in primitive_cases(rng)}
    assert covered == set(PRIMITIVES)


@pytest.mark.parametrize("idx", range(len(primitive_cases(np.random.default_rng(0)))))
def test_primitive_vjp_matches_finite_differences(idx):
    rng = np.random.default_rng(idx)
    name, inputs, attrs = primitive_cases(rng)[idx]
    res = check_primitive(name, inputs, attrs, rng)
    assert res.ok, str(res)


def test_stage_vjp_matches_finite_differences(rng):
    seq, params = small_stage(rng, ch=2)
    x = rng.standard_normal((3, 2, 4, 4))
    res = check_stage("conv-bn-relu-conv", seq, x, params, rng)
    assert res.ok, str(res)


def test_record_and_evaluate_agree(rng):
    seq, params = small_stage(rng)
    x = rng.standard_normal((2, 4, 5, 5))
    y, g = record(seq, x, params)
    np.testing.assert_array_equal(y, evaluate(seq, x, params))
    assert g.saved_nbytes() > 0


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_vjp_is_linear_in_the_cotangent(a, b, seed):
    rng = np.random.default_rng(seed)
    seq, params = small_stage(rng, ch=2)
    x = rng.standard_normal((2, 2, 3, 3))
    y, g = record(seq, x, params)
    d1, d2 = rng.standard_normal(y.shape), rng.standard_normal(y.shape)
    lhs = vjp(g, a * d1 + b * d2)
    _, g1 = record(seq, x, params)
    _, g2 = record(seq, x, params)
    r1, r2 = vjp(g1, d1), vjp(g2, d2)
    np.testing.assert_allclose(lhs.input_grad, a * r1.input_grad + b * r2.input_grad, atol=1e-9)
    for p, q1, q2 in zip(lhs.param_grads, r1.param_grads, r2.param_grads):
        np.testing.assert_allclose(p, a * q1 + b * q2, atol=1e-9)


def test_vjp_rejects_wrong_cotangent_shape(rng):
    seq, params = small_stage(rng)
    y, g = record(seq, rng.standard_normal((2, 4, 3, 3)), params)
    with pytest.raises(ValueError):
        vjp(g, np.zeros((1,) + y.shape[1:]))


def test_unregistered_primitive_raises():
    g = Graph()
    v = g.leaf(np.zeros(3))
    with pytest.raises(UnregisteredPrimitiveError):
        g.apply("no_such_op", v)


def test_register_adds_a_primitive():
    @register("test_square")
    class _Square:
        @staticmethod
        def forward(x):
            return x * x, x

        @staticmethod
        def vjp(g, saved):
            return (2 * saved * g,)

    try:
        res = check_primitive("test_square", [np.array([1.0, -2.0, 3.0])])
        assert res.ok
    finally:
        del PRIMITIVES["test_square"]


def test_chain_backprop_matches_single_graph(rng):
    s1, p1 = small_stage(rng, ch=2)
    s2, p2 = small_stage(rng, ch=2)
    x = rng.standard_normal((3, 2, 4, 4))

    def loss(g, y):
        return g.apply("cross_entropy", g.apply("flatten", g.apply("global_avgpool", y)),
                       labels=np.array([0, 1, 1]))

    value, grads = chain_backprop([(s1, p1), (s2, p2)], x, loss)

    def whole(g, xv, ps):
        return loss(g, s2(g, s1(g, xv, ps[:len(p1)]), ps[len(p1):]))

    v2, g = record(whole, x, p1 + p2)
    ref = vjp(g, np.ones(()))
    assert value == pytest.approx(float(v2), rel=1e-12)
    for a, b in zip(grads[0].param_grads + grads[1].param_grads, ref.param_grads):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(grads[0].input_grad, ref.input_grad, rtol=1e-10, atol=1e-12)
