import numpy as np
import pytest

from sluice.exceptions import ConfigurationError, MaskError, NonFiniteError
from sluice.nn import (
    Tensor,
    binary_cross_entropy,
    concat,
    count_dot_products,
    layer_norm,
    masked_attention,
    sigmoid,
    tanh,
)
from sluice.nn.losses import bce_loss, mse


def gradcheck(fun, arrays, eps=1e-6):
    """worst relative error between backward() and central differences"""
    inputs = [Tensor(a.copy()) for a in arrays]
    fun(*inputs).backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = np.zeros_like(t.data)
        for idx in np.ndindex(t.data.shape):
            orig = t.data[idx]
            t.data[idx] = orig + eps
            up = fun(*inputs).item()
            t.data[idx] = orig - eps
            down = fun(*inputs).item()
            t.data[idx] = orig
            numeric[idx] = (up - down) / (2 * eps)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
        worst = max(worst, float(np.abs(numeric - analytic).max() / scale))
    return worst


def _random_mask(rng, n_q, n_k):
    mask = rng.random((n_q, n_k)) < 0.5
    mask[np.arange(n_q), rng.integers(0, n_k, n_q)] = True
    return mask


@pytest.mark.parametrize("seed", range(20))
def test_attention_gradients_random_masks(seed):
    rng = np.random.default_rng(seed)
    n_q, n_k, width, heads = 3, 4, 4, 2
    mask = _random_mask(rng, n_q, n_k)
    weights = rng.normal(size=(n_q, width))

    def fun(q, k, v):
        return (masked_attention(q, k, v, mask, heads) * weights).sum()

    arrays = [rng.normal(size=s) for s in [(n_q, width), (n_k, width), (n_k, width)]]
    assert gradcheck(fun, arrays) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_composed_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    target = rng.normal(size=(2, 3))

    def fun(x, w, b, gain, beta):
        h = tanh(layer_norm(x @ w + b, gain, beta))
        return mse(sigmoid(h), target) + concat([h, x[:, :1]], axis=-1).sum() * 0.1

    arrays = [
        rng.normal(size=(2, 4)),
        rng.normal(size=(4, 3)),
        rng.normal(size=3),
        rng.normal(size=3) + 1.0,
        rng.normal(size=3),
    ]
    assert gradcheck(fun, arrays) < 1e-4


def test_bce_matches_scalar_reference(rng):
    z = rng.normal(size=6) * 3
    y = (rng.random(6) < 0.5).astype(float)
    loss = binary_cross_entropy(Tensor(z), y)
    expected = np.mean([bce_loss(float(zi), int(yi))[0] for zi, yi in zip(z, y)])
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    assert gradcheck(lambda t: binary_cross_entropy(t, y), [z]) < 1e-4


def test_bce_is_stable_for_large_logits():
    loss, grad = bce_loss(800.0, 1)
    assert loss == pytest.approx(0.0)
    assert grad == pytest.approx(0.0)
    loss, _ = bce_loss(-800.0, 1)
    assert loss == pytest.approx(800.0)


def test_batched_attention_broadcasts_gradients(rng):
    mask = np.tril(np.ones((3, 3), dtype=bool))

    def fun(q, k, v):
        return masked_attention(q, k, v, mask, 1).square().sum()

    arrays = [rng.normal(size=(2, 3, 2)) for _ in range(3)]
    assert gradcheck(fun, arrays) < 1e-4


def test_masked_keys_do_not_influence_output(rng):
    q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
    mask = np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1]], dtype=bool)
    base = masked_attention(Tensor(q), Tensor(k), Tensor(v), mask, 2).data
    v2 = v.copy()
    v2[2] += 10.0
    moved = masked_attention(Tensor(q), Tensor(k), Tensor(v2), mask, 2).data
    np.testing.assert_array_equal(base[:2], moved[:2])
    assert not np.allclose(base[2], moved[2])


def test_blind_query_row_raises(rng):
    q, k, v = (Tensor(rng.normal(size=(2, 2))) for _ in range(3))
    mask = np.array([[1, 0], [0, 0]], dtype=bool)
    with pytest.raises(MaskError, match=r"\[1\]"):
        masked_attention(q, k, v, mask, 1)


def test_shape_errors(rng):
    with pytest.raises(ConfigurationError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ConfigurationError):
        layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    q = Tensor(rng.normal(size=(2, 4)))
    with pytest.raises(ConfigurationError):
        masked_attention(q, q, q, np.ones((2, 3), dtype=bool), 2)


def test_non_finite_values_name_the_op():
    with pytest.raises(NonFiniteError, match="mul"):
        Tensor(np.array([1e308])) * 1e10
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))


def test_dot_product_counter(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    with count_dot_products() as counter:
        masked_attention(x, x, x, np.ones((3, 3), dtype=bool), 2)
        masked_attention(x[:1], x, x, np.ones((1, 3), dtype=bool), 2)
    assert counter.dots == 2 * 9 + 2 * 3
    assert counter.flops == 2 * counter.dots * 2
    masked_attention(x, x, x, np.ones((3, 3), dtype=bool), 2)
    assert counter.dots == 24


def _naive_attention(q, k, v, mask, heads):
    d = q.shape[1] // heads
    out = np.zeros_like(q)
    for h in range(heads):
        cols = slice(h * d, (h + 1) * d)
        for i in range(q.shape[0]):
            visible = np.flatnonzero(mask[i])
            scores = np.array([q[i, cols] @ k[j, cols] / np.sqrt(d) for j in visible])
            weights = np.exp(scores - scores.max())
            weights /= weights.sum()
            out[i, cols] = sum(w * v[j, cols] for w, j in zip(weights, visible))
    return out


@pytest.mark.parametrize("seed", range(5))
def test_attention_matches_per_row_softmax(seed):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
    mask = _random_mask(rng, 6, 6)
    out = masked_attention(Tensor(q), Tensor(k), Tensor(v), mask, 2).data
    np.testing.assert_allclose(out, _naive_attention(q, k, v, mask, 2), atol=1e-12)


def test_single_key_returns_its_value(rng):
    q, k, v = (rng.normal(size=(1, 4)) for _ in range(3))
    out = masked_attention(Tensor(q), Tensor(k), Tensor(v), np.ones((1, 1)), 2)
    np.testing.assert_allclose(out.data, v)
