import numpy as np
import pytest

from tailcast import autodiff as ad
from tailcast.autodiff import AdamState, AffineLayer, Tensor, adam_step
from tailcast.errors import NumericError, ShapeError


def check_grad(fn, *shapes, seed=0, positive=False, tol=1e-6):
    rng = np.random.default_rng(seed)
    leaves = []
    for shape in shapes:
        v = rng.uniform(0.2, 2.0, shape) if positive else rng.normal(size=shape)
        leaves.append(Tensor(v, requires_grad=True))
    loss = ad.sum(fn(*leaves))
    loss.backward()
    for leaf in leaves:
        numeric = ad.finite_difference_gradient(lambda: float(ad.sum(fn(*leaves)).value), leaf)
        assert np.allclose(leaf.grad, numeric, atol=tol, rtol=tol), fn


@pytest.mark.parametrize("fn, shapes, positive", [
    (lambda a, b: a + b, [(3, 4), (4,)], False),
    (lambda a, b: a - b, [(3, 1), (1, 4)], False),
    (lambda a, b: a * b, [(3, 4), (3, 4)], False),
    (lambda a, b: a / b, [(2, 3), (3,)], True),
    (lambda a: -a, [(5,)], False),
    (lambda a: a ** 3, [(4,)], False),
    (lambda a: ad.power(a, 0.5), [(4,)], True),
    (ad.log, [(4,)], True),
    (ad.exp, [(4,)], False),
    (ad.sqrt, [(4,)], True),
    (ad.erf, [(6,)], False),
    (ad.softplus, [(6,)], False),
    (ad.sigmoid, [(6,)], False),
    (lambda a: ad.sum(a, axis=0), [(3, 4)], False),
    (lambda a: ad.sum(a, axis=1, keepdims=True) * a, [(3, 4)], False),
    (lambda a: ad.mean(a, axis=1), [(3, 4)], False),
    (lambda a: ad.reshape(a, (2, 6)) ** 2, [(3, 4)], False),
    (lambda a: ad.transpose(a) @ a, [(3, 4)], False),
    (lambda a, b: a @ b, [(2, 3), (3, 5)], False),
    (lambda a: ad.take_rows(a, np.array([0, 2, 2, 1])) ** 2, [(3, 2)], False),
    (lambda a: ad.segment_sum(a, np.array([1, 0, 1, 1]), 3) ** 2, [(4, 2)], False),
])
def test_gradients_match_central_differences(fn, shapes, positive):
    check_grad(fn, *shapes, positive=positive)


def test_relu_and_clamp_gradients_away_from_kinks():
    x = Tensor(np.array([-2.0, -0.5, 0.5, 2.0]), requires_grad=True)
    ad.sum(ad.relu(x) + ad.clamp_min(x, 1.0)).backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0, 2.0])


def test_where_routes_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ad.sum(ad.where(np.array([True, False, True]), a * 2.0, b * 3.0)).backward()
    assert np.array_equal(a.grad, [2.0, 0.0, 2.0])
    assert np.array_equal(b.grad, [0.0, 3.0, 0.0])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    (y + y * x).backward()
    assert x.grad == pytest.approx(2 * 3 + 3 * 9)


def test_numpy_on_the_left_defers_to_tensor():
    x = Tensor(np.ones(2), requires_grad=True)
    out = np.array([3.0, 4.0]) - x
    assert isinstance(out, Tensor)
    ad.sum(out).backward()
    assert np.array_equal(x.grad, [-1.0, -1.0])


def test_numeric_failures_are_reported():
    with pytest.raises(NumericError):
        ad.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(NumericError):
        ad.div(Tensor(np.ones(2)), Tensor(np.array([1.0, 0.0])))
    with pytest.raises(NumericError):
        ad.sqrt(Tensor(np.array([-1.0])))


def test_non_finite_gradient_names_op():
    x = Tensor(np.array([7.0]), requires_grad=True)
    with np.errstate(over="ignore"):
        loss = ad.sum(ad.exp(ad.exp(x)))  # exp(exp(7)) overflows
        with pytest.raises(NumericError, match="exp"):
            loss.backward()


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_incompatible_broadcast_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert y.op == "leaf" or not y.requires_grad


def test_affine_layer_shapes_and_glorot_bounds():
    layer = AffineLayer.init(np.random.default_rng(0), 10, 4, "relu")
    assert layer.weights.shape == (4, 10) and np.all(layer.bias.value == 0)
    bound = np.sqrt(6.0 / 14)
    assert np.all(np.abs(layer.weights.value) <= bound)
    assert layer(Tensor(np.ones((7, 10)))).shape == (7, 4)


def test_adam_first_step_moves_by_lr():
    p = [np.array([1.0, -2.0])]
    g = [np.array([0.5, -3.0])]
    new, state = adam_step(p, g, AdamState.zeros_like(p), lr=0.1)
    # bias correction makes the first step lr * sign(g) up to eps_opt
    assert np.allclose(new[0], [0.9, -1.9], atol=1e-7)
    assert state.step == 1
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(2)
    p = [rng.normal(size=3)]
    state = AdamState.zeros_like(p)
    m = v = np.zeros(3)
    ref = p[0].copy()
    for t in range(1, 6):
        g = rng.normal(size=3)
        p, state = adam_step(p, [g], state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p[0], ref, atol=1e-14)


def test_gradient_relative_error_floor():
    err = ad.gradient_relative_error(np.array([1.0, 1e-9, 2.0]), np.array([1.001, 0.0, 2.0]))
    assert err[0] == pytest.approx(0.001 / 1.001)
    assert err[1] == 0.0 and err[2] == 0.0


def test_activation_values_at_zero():
    x = Tensor(np.zeros(1), requires_grad=True)
    y = ad.softplus(x)
    ad.sum(y).backward()
    assert y.value[0] == pytest.approx(np.log(2.0)) and x.grad[0] == pytest.approx(0.5)
    z = Tensor(np.zeros(1), requires_grad=True)
    ad.sum(ad.erf(z)).backward()
    assert z.grad[0] == pytest.approx(2 / np.sqrt(np.pi))


# every op keeps values O(1) so central differences stay well conditioned
UNARY = [lambda a: ad.exp(ad.sigmoid(a)), ad.erf, ad.softplus, ad.sigmoid, ad.relu, lambda a: -a,
         lambda a: ad.log(1.0 + ad.softplus(a)), lambda a: ad.sqrt(0.5 + ad.sigmoid(a)),
         lambda a: ad.power(ad.sigmoid(a), 3.0), lambda a: ad.clamp_min(a, -0.3)]
BINARY = [ad.add, ad.sub, lambda a, b: ad.mul(ad.sigmoid(a), b),
          lambda a, b: a / (1.0 + ad.softplus(b))]


@pytest.mark.parametrize("seed", range(50))
def test_random_graphs_gradcheck(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(3, 4)) * 0.5, requires_grad=True)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    plan = [(bool(rng.integers(2)), int(rng.integers(len(UNARY))), int(rng.integers(len(BINARY))))
            for _ in range(5)]

    def graph():
        h = x @ w.T + b
        for unary, i, j in plan:
            h = UNARY[i](h) if unary else BINARY[j](h, ad.sigmoid(h) + 0.1)
        rows = ad.take_rows(h, np.array([0, 1, 1, 4]))
        return ad.mean(ad.segment_sum(rows, np.array([0, 1, 0, 1]), 2))

    graph().backward()
    for leaf in (w, x, b):
        num = ad.finite_difference_gradient(lambda: float(graph().value), leaf)
        assert np.max(ad.gradient_relative_error(leaf.grad, num)) < 1e-3


def test_replay_is_bit_identical():
    def run():
        rng = np.random.default_rng(1)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        loss = ad.sum(ad.softplus(w @ w) * ad.erf(w))
        loss.backward()
        return loss.value.tobytes() + w.grad.tobytes()

    assert run() == run()


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, 2.0])]
    new, state = adam_step(p, [np.zeros(2)], AdamState.zeros_like(p))
    assert np.array_equal(new[0], p[0]) and state.step == 1
