import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgrl import autodiff as ad
from pgrl.autodiff import (
    Architecture,
    AutodiffError,
    Layout,
    OptimizerState,
    ParamVector,
    ShapeError,
    Tape,
    adam_step,
    backward,
    finite_diff_grad,
    init_mlp,
    mlp_apply,
    mlp_forward,
    mlp_layout,
)


def vec(values):
    values = np.asarray(values, dtype=np.float64)
    return ParamVector(values, Layout((("x", (values.size,)),)))


def grad_of(fn, x):
    tape = Tape()
    node = tape.watch(vec(x))
    return backward(fn(node), node).values


def fd_of(fn, x, eps=1e-6):
    return finite_diff_grad(lambda p: fn(ad.constant(p.values)).item(), vec(x), eps).values


def test_square_gradient():
    assert grad_of(lambda x: (x * x).sum(), [3.0])[0] == 6.0


def test_tanh_at_zero():
    assert grad_of(lambda x: ad.tanh(x).sum(), [0.0])[0] == 1.0


ELEMENTWISE = {
    "mul-add": lambda x: (x * x * 0.5 + x * 3.0 - 1.0).sum(),
    "div": lambda x: (1.0 / (x * x + 1.0)).sum(),
    "tanh-exp": lambda x: (ad.tanh(x) * ad.exp(x * 0.3)).sum(),
    "log": lambda x: ad.log(x * x + 0.5).sum(),
    "pow": lambda x: ((x * x + 1.0) ** 1.5).mean(),
    "logsumexp": lambda x: ad.logsumexp(x),
    "log_softmax": lambda x: ad.log_softmax(x)[0] * 2.0 + ad.log_softmax(x)[-1],
    "getitem-repeat": lambda x: (x[np.array([0, 0, -1])] * 2.0).sum(),
    "reshape-T": lambda x: ((x.reshape(1, -1).T @ x.reshape(1, -1)) * 0.1).sum(),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-2.0, 2.0), min_size=2, max_size=5))
def test_elementwise_gradients_match_finite_differences(name, xs):
    fn = ELEMENTWISE[name]
    g = grad_of(fn, xs)
    fd = fd_of(fn, xs)
    assert np.allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_getitem_accumulates_repeated_indices():
    g = grad_of(lambda x: x[np.array([1, 1, 1])].sum(), [0.0, 0.0])
    assert g.tolist() == [0.0, 3.0]


def test_clip_gradient_zero_strictly_outside():
    g = grad_of(lambda x: ad.clip(x, -1.0, 1.0).sum(), [-2.0, -1.0, 0.0, 1.0, 2.0])
    assert g.tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]


def test_minimum_tie_goes_to_first_operand():
    tape = Tape()
    a = tape.watch(vec([1.0]))
    b = tape.variable(np.array([1.0]))
    backward(ad.minimum(a, b).sum())
    assert a.grad.tolist() == [1.0] and b.grad.tolist() == [0.0]


def test_logsumexp_is_stable():
    out = ad.logsumexp(ad.constant(np.array([1000.0, 1000.0])))
    assert out.item() == pytest.approx(1000.0 + math.log(2.0))


def test_backward_rejects_non_scalar_root():
    tape = Tape()
    x = tape.watch(vec([1.0, 2.0]))
    with pytest.raises(AutodiffError, match="scalar"):
        backward(x * 2.0)


def test_backward_rejects_constant_root():
    with pytest.raises(AutodiffError, match="constant"):
        backward(ad.constant(1.0))


def test_second_sweep_needs_zero_grad():
    tape = Tape()
    x = tape.watch(vec([2.0]))
    y = (x * x).sum()
    backward(y)
    with pytest.raises(AutodiffError, match="zero_grad"):
        backward(y)
    tape.zero_grad()
    assert backward(y, x).values.tolist() == [4.0]


def test_unreached_nodes_get_zero_gradient():
    tape = Tape()
    x = tape.watch(vec([1.0]))
    unused = tape.watch(ParamVector(np.ones(2), Layout((("u", (2,)),))))
    g = backward((x * 3.0).sum(), (x, unused))
    assert g[1].values.tolist() == [0.0, 0.0]


def test_operands_from_two_tapes_are_rejected():
    a = Tape().watch(vec([1.0]))
    b = Tape().watch(vec([1.0]))
    with pytest.raises(AutodiffError, match="different tapes"):
        a + b


def test_layout_round_trip_and_structure():
    layout = Layout((("w", (2, 3)), ("b", (3,))))
    assert layout.size == 9
    assert Layout.from_list(layout.to_list()) == layout
    p = ParamVector(np.arange(9.0), layout)
    assert p.get("w").shape == (2, 3)
    assert ParamVector.from_structured(p.structured(), layout).values.tolist() == list(range(9))
    with pytest.raises(ShapeError):
        ParamVector(np.zeros(8), layout)
    with pytest.raises(ShapeError, match="duplicate"):
        layout + Layout((("b", (1,)),))


def test_mlp_forward_matches_numpy_path():
    arch = Architecture((3, 5, 4, 2))
    params = ParamVector.from_structured(init_mlp(arch, np.random.default_rng(0)), mlp_layout(arch))
    x = np.random.default_rng(1).normal(size=(7, 3))
    assert np.array_equal(mlp_forward(params, x, arch).value, mlp_apply(params, x, arch))


def test_mlp_init_ranges():
    arch = Architecture((4, 16, 1))
    arrays = init_mlp(arch, np.random.default_rng(0))
    assert np.all(np.abs(arrays["layers.0.weight"]) <= 1 / math.sqrt(4))
    assert np.all(arrays["layers.0.bias"] == 0.0)


def test_mlp_shape_error_names_layer():
    arch = Architecture((3, 4, 1))
    params = ParamVector.from_structured(init_mlp(arch, np.random.default_rng(0)), mlp_layout(arch))
    with pytest.raises(ShapeError, match="layer"):
        mlp_forward(params, np.zeros((2, 5)), arch)


def test_mlp_gradient_matches_finite_differences():
    arch = Architecture((2, 6, 3))
    rng = np.random.default_rng(3)
    params = ParamVector.from_structured(init_mlp(arch, rng), mlp_layout(arch))
    x = rng.normal(size=(4, 2))

    def loss(theta):
        out = mlp_forward(theta, x, arch)
        return (out * out).sum()

    tape = Tape()
    theta = tape.watch(params)
    g = backward(loss(theta), theta).values
    fd = finite_diff_grad(lambda p: loss(p).item(), params).values
    assert np.allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_finite_diff_reports_coordinate():
    def f(p):
        return math.inf if p.values[1] > 0.5 else 0.0

    with pytest.raises(FloatingPointError, match="coordinate 1"):
        finite_diff_grad(f, vec([0.0, 0.5]), 1e-3)


def test_adam_first_step_equals_learning_rate():
    p = vec([0.0])
    state = OptimizerState.zeros(1, lr=0.01)
    new, state = adam_step(p, vec([1.0]), state)
    assert new.values[0] == pytest.approx(-0.01, rel=1e-6)
    assert state.step == 1
    assert p.values[0] == 0.0


def test_adam_minimizes_quadratic():
    p = vec([0.0])
    state = OptimizerState.zeros(1, lr=0.05)
    for _ in range(2000):
        p, state = adam_step(p, vec(2.0 * (p.values - 2.0)), state)
    assert abs(p.values[0] - 2.0) < 1e-3


def test_adam_refuses_non_finite_gradient():
    with pytest.raises(FloatingPointError, match=r"\[1\]"):
        adam_step(vec([0.0, 0.0]), vec([1.0, math.nan]), OptimizerState.zeros(2))


def test_adam_length_mismatch():
    with pytest.raises(ShapeError, match="length mismatch"):
        adam_step(vec([0.0, 0.0]), vec([1.0]), OptimizerState.zeros(2))


def test_optimizer_state_round_trip():
    s = OptimizerState(np.array([0.1, 0.2]), np.array([0.3, 0.4]), 7, 1e-3)
    t = OptimizerState.from_dict(s.to_dict())
    assert t.to_dict() == s.to_dict()
    with pytest.raises(ValueError):
        OptimizerState.zeros(1, lr=0.0)


def test_dropped_graph_is_freed_without_cycle_collector():
    import gc
    import weakref

    gc.disable()
    try:
        tape = Tape()
        x = tape.variable(np.ones(1000))
        y = (x * x).sum()
        backward(y)
        probe = weakref.ref(y)
        del y
        assert probe() is None
        assert len(tape.nodes) == 1 and tape.nodes[0] is x
    finally:
        gc.enable()
