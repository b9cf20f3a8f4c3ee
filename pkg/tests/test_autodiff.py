import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from conftest import assert_zero_grad, split_zero_grad

from ehrjoint import autodiff as ad
from ehrjoint.autodiff import MASK_VALUE, ShapeError, Tensor, backward, trace
from ehrjoint.gradcheck import grad_check
from ehrjoint.nn import AttentionBlock, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention


def naive_matmul(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_zero():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    np.testing.assert_array_equal(ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[0.0], [0.0]])).data, [[0.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 10_000))
def test_matmul_oracle_up_to_16(n, k, m, seed):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=(n, k)), r.normal(size=(k, m))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


def test_matmul_batched_broadcast(rng):
    a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(5, 6))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, a @ b, atol=1e-12)


# ---------------------------------------------------------------- softmax

def test_softmax_single_unmasked_key():
    y = ad.masked_softmax(Tensor([0.0, 0.0]), np.array([0.0, MASK_VALUE])).data
    assert y[0] == pytest.approx(1.0, abs=1e-15)
    assert y[1] <= 1e-30


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.7, 1e4])
def test_softmax_uniform_for_equal_scores(c):
    y = ad.masked_softmax(Tensor([c, c, c]), np.zeros(3)).data
    np.testing.assert_allclose(y, [1 / 3] * 3, atol=1e-15)


def test_softmax_matches_exp_normalize(rng):
    x = rng.normal(size=(1, 5))
    oracle = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(ad.masked_softmax(Tensor(x)).data, oracle, atol=1e-12, rtol=0)


def test_fully_masked_row_is_zero_and_counted():
    before = ad.diagnostics["fully_masked_rows"]
    y = ad.masked_softmax(Tensor(np.zeros((2, 3))), np.array([[MASK_VALUE] * 3, [0.0, MASK_VALUE, 0.0]])).data
    np.testing.assert_array_equal(y[0], 0.0)
    assert np.isfinite(y).all()
    assert y[1].sum() == pytest.approx(1.0, abs=1e-9)
    assert ad.diagnostics["fully_masked_rows"] == before + 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_softmax_rows_normalised_and_masked_tiny(n, seed):
    r = np.random.default_rng(seed)
    scores = r.normal(scale=5.0, size=(4, n))
    allowed = r.random((4, n)) < 0.6
    allowed[:, 0] = True
    y = ad.masked_softmax(Tensor(scores), np.where(allowed, 0.0, MASK_VALUE)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
    assert (y[~allowed] <= 1e-30).all()


# ---------------------------------------------------------------- layer norm / activations

def test_layer_norm_constant_row_is_zero():
    y = ad.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    np.testing.assert_array_equal(y, 0.0)


def test_layer_norm_symmetric_pair():
    y = ad.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(y, [1.0, -1.0], atol=1e-9)


def test_layer_norm_formula_oracle(rng):
    x, g, b = rng.normal(size=7), rng.normal(size=7), rng.normal(size=7)
    oracle = (x - x.mean()) / np.sqrt(x.var() + 1e-12) * g + b
    np.testing.assert_allclose(ad.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data, oracle, atol=1e-10, rtol=0)


def test_layer_norm_shape_check():
    with pytest.raises(ShapeError):
        ad.layer_norm(Tensor(np.zeros(3)), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_activations():
    assert ad.activation(Tensor(0.0), "gelu").data == 0.0
    assert ad.activation(Tensor(0.0), "tanh").data == 0.0
    oracle = 0.5 * 3.0 * (1 + erf(3.0 / np.sqrt(2)))
    assert ad.activation(Tensor(3.0), "gelu").data == pytest.approx(oracle, abs=1e-10)
    with pytest.raises(ValueError):
        ad.activation(Tensor(0.0), "relu6")


# ---------------------------------------------------------------- cross entropy

def test_cross_entropy_uniform_two_classes():
    assert ad.cross_entropy(Tensor([[0.0, 0.0]]), [0]).data == pytest.approx(np.log(2), abs=1e-12)


def test_cross_entropy_saturates():
    assert ad.cross_entropy(Tensor([[30.0, 0.0, 0.0]]), [0]).data <= 1e-12


def test_cross_entropy_log_sum_exp_oracle(rng):
    logits, t = rng.normal(size=(4, 7)), rng.integers(0, 7, size=4)
    oracle = np.mean([np.log(np.exp(row).sum()) - row[k] for row, k in zip(logits, t)])
    assert ad.cross_entropy(Tensor(logits), t).data == pytest.approx(oracle, abs=1e-10)


def test_cross_entropy_ignores_rows_and_all_ignored_is_zero():
    logits = Tensor(np.array([[2.0, 0.0], [0.0, 5.0]]), requires_grad=True)
    loss = ad.cross_entropy(logits, [-100, 1])
    assert loss.data == pytest.approx(-np.log(np.exp(5) / (1 + np.exp(5))), abs=1e-12)
    backward(loss)
    np.testing.assert_array_equal(logits.grad[0], 0.0)
    logits.grad = None
    empty = ad.cross_entropy(logits, [-100, -100])
    assert empty.data == 0.0
    backward(empty)
    assert logits.grad is None or not logits.grad.any()


# ---------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_backward_fan_out_accumulates():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    backward((x + x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_trace_is_topological(rng):
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(4, 3)))
    loss = ad.tanh(x @ w).sum() + (w * w).mean()
    tr = trace(loss)
    assert tr.is_topological()
    assert tr.entries[-1].output == loss.id
    for e in tr.entries:
        assert e.op


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ---------------------------------------------------------------- gradient checks per primitive

PRIMS = {
    "add": lambda a, b: (a + b * 0.5).sum(),
    "sub": lambda a, b: (a - b).sum() * 1.3,
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "pow": lambda a, b: ((a * a + 1.0) ** 1.5).sum(),
    "exp_log": lambda a, b: ad.log(ad.exp(a) + 1.0).sum(),
    "tanh": lambda a, b: ad.tanh(a * b).sum(),
    "sigmoid": lambda a, b: ad.sigmoid(a).sum(),
    "gelu": lambda a, b: ad.gelu(a + b).sum(),
    "matmul": lambda a, b: ad.tanh(a @ b.transpose(1, 0)).sum(),
    "mean": lambda a, b: (a.mean(axis=0) * b.mean(axis=0)).sum(),
    "reshape_transpose": lambda a, b: (a.reshape(4, 3).transpose(1, 0) @ b.reshape(4, 3)).sum(),
    "getitem": lambda a, b: (a[1:, ::2] * b[:2, 1:2]).sum(),
    "concat": lambda a, b: ad.tanh(ad.concat([a, b], axis=1)).sum(),
    "softmax": lambda a, b: (ad.masked_softmax(a, np.array([0.0, MASK_VALUE, 0.0, 0.0])) * b).sum(),
    "layer_norm": lambda a, b: (ad.layer_norm(a, b[0], b[1]) * a).sum(),
    "cross_entropy": lambda a, b: ad.cross_entropy(a * b, [0, 3, -100]),
    "bce": lambda a, b: ad.binary_cross_entropy_with_logits(a, np.array([[1, 0, 1, 0]] * 3), np.arange(12).reshape(3, 4) % 3),
}


@pytest.mark.parametrize("name", sorted(PRIMS))
def test_primitive_gradients_match_finite_differences(name):
    r = np.random.default_rng(1)
    a = Tensor(r.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(r.normal(size=(3, 4)), requires_grad=True)
    assert grad_check(lambda: PRIMS[name](a, b), [a, b], n_samples=None) <= 1e-4


def test_embedding_gradient_accumulates_repeats():
    table = Tensor(np.zeros((4, 2)), requires_grad=True)
    backward(ad.embedding(table, np.array([[1, 1, 3]])).sum())
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


@pytest.mark.parametrize("layer", ["linear", "layer_norm", "embedding", "attention", "attention_block", "ffn"])
def test_layer_gradients(layer):
    r = np.random.default_rng(2)
    x = Tensor(r.normal(size=(2, 3, 4)), requires_grad=True)
    mask = np.where(r.random((2, 1, 3, 3)) < 0.7, 0.0, MASK_VALUE)
    mask[..., 0] = 0.0
    mods = {
        "linear": Linear(4, 4, r, std=0.5),
        "layer_norm": LayerNorm(4),
        "embedding": Embedding(5, 4, r, std=0.5),
        "attention": MultiHeadAttention(4, 2, r, std=0.5),
        "attention_block": AttentionBlock(4, 2, r, std=0.5),
        "ffn": FeedForward(4, 6, r, std=0.5),
    }
    m = mods[layer]
    weights = Tensor(r.normal(size=(2, 3, 4)))
    if layer == "embedding":
        f = lambda: (m(np.array([[0, 4, 4], [2, 1, 0]])) * weights).sum()
    elif layer in ("attention", "attention_block"):
        f = lambda: (m(x, x, mask) * weights).sum()
    else:
        f = lambda: (m(x) * weights).sum()
    rest, zero = split_zero_grad(m.named_parameters())
    params = rest + ([] if layer == "embedding" else [x])
    assert grad_check(f, params, n_samples=None) <= 1e-4
    assert_zero_grad(f, zero)


def test_grad_check_scalar_square():
    x = Tensor(np.array(3.0), requires_grad=True)
    assert grad_check(lambda: x * x, [x]) <= 1e-8


def test_grad_check_projection_cross_entropy(rng):
    lin = Linear(5, 3, rng, std=0.5)
    x = Tensor(rng.normal(size=(6, 5)))
    assert grad_check(lambda: ad.cross_entropy(lin(x), [0, 1, 2, 2, 1, -100]), lin.parameters(), n_samples=None) <= 1e-6


def test_grad_check_rejects_bad_eps_and_nonfinite():
    x = Tensor(np.array(1.0), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: x * x, [x], eps=1e-2)
    with pytest.raises(FloatingPointError):
        grad_check(lambda: ad.log(x - 1.0), [x])


def test_dropout_identity_in_eval_and_scaled_in_train(rng):
    x = Tensor(np.ones(10_000))
    assert ad.dropout(x, 0.1, rng, training=False) is x
    y = ad.dropout(x, 0.1, rng, training=True).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.9}
    assert abs((y == 0).mean() - 0.1) < 0.01
