import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from kgfusion import autodiff as ad


def p64(arr):
    return ad.parameter(np.asarray(arr), dtype=np.float64)


def test_scalar_chain():
    x = p64(2.0)
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))  # x^2 + 3x
    y.backward()
    assert y.item() == 10.0
    assert x.grad == pytest.approx(7.0)  # 2x + 3


def test_diamond_reuse_accumulates():
    x = p64([1.0, 2.0])
    a = ad.mul(x, x)
    loss = ad.sum_(ad.add(a, x))  # sum(x^2 + x), x feeds two paths
    loss.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_backward_rejects_non_scalar():
    x = p64([[1.0, 2.0]])
    with pytest.raises(ValueError):
        ad.add(x, x).backward()


def test_pure_constant_graph_is_pruned():
    # a graph with no parameters anywhere keeps no backward closures
    c, d = ad.constant(np.ones(3), dtype=np.float64), ad.constant(np.ones(3), dtype=np.float64)
    loss = ad.sum_(ad.mul(c, d))
    assert loss._parents == ()
    loss.backward()
    assert c.grad is None and d.grad is None


def test_broadcast_add_unbroadcasts_grad():
    a = p64(np.ones((3, 4)))
    b = p64(np.ones(4))
    ad.sum_(ad.add(a, b)).backward()
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (4,)
    np.testing.assert_array_equal(b.grad, 3 * np.ones(4))


def test_mul_broadcast_grad_matches_fd():
    rng = np.random.default_rng(1)
    a = p64(rng.normal(size=(3, 4)))
    b = p64(rng.normal(size=(3, 1)))
    w = rng.normal(size=(3, 4))
    err = ad.grad_check(lambda xs: ad.sum_(ad.mul(ad.mul(xs[0], xs[1]), ad.constant(w))), [a, b])
    assert err < 1e-6


def test_matmul_shapes_and_error():
    a = p64(np.ones((2, 3)))
    b = p64(np.ones((3, 5)))
    assert ad.matmul(a, b).shape == (2, 5)
    with pytest.raises(ad.ShapeError):
        ad.matmul(a, p64(np.ones((4, 2))))


def test_take_duplicate_rows_accumulate():
    a = p64(np.arange(12.0).reshape(4, 3))
    out = ad.take(a, np.array([1, 1, 2]))
    ad.sum_(out).backward()
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[2] = 1.0
    np.testing.assert_array_equal(a.grad, expected)


def test_embedding_duplicate_ids_accumulate():
    table = p64(np.eye(4))
    out = ad.embedding(table, np.array([3, 3, 0]))
    ad.sum_(out).backward()
    assert table.grad[3].sum() == pytest.approx(8.0)  # two rows of ones


def test_concat_splits_grad():
    a, b = p64(np.ones((2, 3))), p64(np.ones((1, 3)))
    out = ad.concat([a, b], axis=0)
    assert out.shape == (3, 3)
    ad.sum_(ad.mul(out, ad.constant(np.arange(9.0).reshape(3, 3)))).backward()
    np.testing.assert_array_equal(a.grad, np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(b.grad, np.arange(6.0, 9.0).reshape(1, 3))


def test_reshape_transpose_roundtrip_grad():
    a = p64(np.arange(24.0).reshape(2, 3, 4))
    out = ad.transpose(ad.reshape(a, (6, 4)), (1, 0))
    assert out.shape == (4, 6)
    ad.mean(out).backward()
    np.testing.assert_allclose(a.grad, np.full((2, 3, 4), 1 / 24))


def test_softmax_rows_sum_to_one_and_matches_oracle():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(5, 7))
    out = ad.softmax(ad.constant(logits))
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), atol=1e-12)
    for i in range(5):
        np.testing.assert_allclose(out.data[i], oracles.softmax_row(list(logits[i])), atol=1e-12)


def test_softmax_survives_huge_logits():
    big = ad.softmax(ad.constant(np.array([[1e4, 0.0, -1e4]])))
    assert np.isfinite(big.data).all()
    assert big.data[0, 0] == pytest.approx(1.0)


def test_log_softmax_consistent():
    rng = np.random.default_rng(3)
    logits = ad.constant(rng.normal(size=(4, 6)))
    np.testing.assert_allclose(ad.log_softmax(logits).data,
                               np.log(ad.softmax(logits).data), atol=1e-12)


def test_layer_norm_moments_and_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 16))
    out = ad.layer_norm(ad.constant(x)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)
    np.testing.assert_allclose(out[0], oracles.layer_norm_row(list(x[0])), atol=1e-10)


def test_l2_normalize_unit_rows():
    rng = np.random.default_rng(5)
    x = ad.l2_normalize(ad.constant(rng.normal(size=(6, 4))))
    np.testing.assert_allclose(np.linalg.norm(x.data, axis=1), np.ones(6), atol=1e-6)


def test_l2_normalize_zero_row_is_finite():
    x = ad.l2_normalize(p64(np.zeros((1, 4))))
    ad.sum_(x).backward()
    assert np.isfinite(x.data).all()


def test_cross_entropy_matches_oracle():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(5, 8))
    labels = rng.integers(0, 8, size=5)
    got = ad.cross_entropy(ad.constant(logits), labels).item()
    want = oracles.cross_entropy_rows(logits.tolist(), labels.tolist())
    assert got == pytest.approx(want, abs=1e-10)


def test_cosine_similarity_matches_oracle():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
    got = ad.cosine_similarity(ad.constant(a), ad.constant(b)).data
    want = oracles.cosine_matrix(a.tolist(), b.tolist())
    np.testing.assert_allclose(got, want, atol=1e-10)
    assert np.all(np.abs(got) <= 1.0 + 1e-9)


def test_kl_divergence_zero_on_self_and_oracle():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(3, 6))
    assert ad.kl_divergence(ad.constant(logits), ad.constant(logits)).item() == pytest.approx(0.0, abs=1e-12)
    q = rng.normal(size=(3, 6))
    got = ad.kl_divergence(ad.constant(logits), ad.constant(q)).item()
    want = np.mean([oracles.kl_divergence(oracles.softmax_row(list(p_)), oracles.softmax_row(list(q_)))
                    for p_, q_ in zip(logits, q)])
    assert got == pytest.approx(want, abs=1e-10)


def test_attention_masked_keys_ignored():
    rng = np.random.default_rng(9)
    dim, heads = 8, 2
    mats = [ad.constant(rng.normal(size=(dim, dim)) * 0.3) for _ in range(4)]
    biases = [ad.constant(np.zeros(dim)) for _ in range(4)]
    x1 = rng.normal(size=(1, 4, dim))
    x2 = x1.copy()
    x2[0, 3] = 999.0  # content of the masked position
    mask = np.array([[1.0, 1.0, 1.0, 0.0]])
    outs = []
    for x in (x1, x2):
        o = ad.multi_head_attention(ad.constant(x), *mats, *biases, n_heads=heads, key_mask=mask)
        outs.append(o.data[:, :3])  # unmasked positions only
    np.testing.assert_array_equal(outs[0], outs[1])


def test_gradients_unreachable_param_is_zero():
    x, y = p64(np.ones(3)), p64(np.ones(3))
    loss = ad.sum_(x)
    grads = ad.gradients(loss, [x, y])
    np.testing.assert_array_equal(grads[1], np.zeros(3))


def test_detach_blocks_gradient():
    x = p64(np.ones(3))
    loss = ad.sum_(ad.mul(x, ad.mul(x, ad.constant(np.ones(3))).detach()))
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))  # no second-path term


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_property(rows, cols, seed):
    logits = np.random.default_rng(seed).normal(size=(rows, cols)) * 10
    out = ad.softmax(ad.constant(logits)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), np.ones(rows), atol=1e-9)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_add_mul_agree_with_numpy(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    np.testing.assert_array_equal(ad.add(ad.constant(a), ad.constant(b)).data, a + b)
    np.testing.assert_array_equal(ad.mul(ad.constant(a), ad.constant(b)).data, a * b)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=10, deadline=None)
def test_random_expression_grad_check(seed):
    rng = np.random.default_rng(seed)
    a = p64(rng.normal(size=(3, 4)))
    b = p64(rng.normal(size=(4, 3)))

    def f(xs):
        h = ad.matmul(xs[0], xs[1])  # (3, 3), reused through two paths
        return ad.mean(ad.layer_norm(ad.add(ad.gelu(h), ad.transpose(h, (1, 0)))))

    assert ad.grad_check(f, [a, b]) < 1e-6
