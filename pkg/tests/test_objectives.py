"""Loss definitions against closed-form identities and naive-loop oracles."""

import numpy as np
import pytest

import oracles
from kgfusion import autodiff as ad
from kgfusion import objectives as obj
from kgfusion.autodiff import ShapeError


@pytest.fixture()
def temp():
    return obj.Temperature(0.07, np.float64)


def feats(rng, n, d=6):
    return ad.constant(rng.normal(size=(n, d)))


def test_temperature_init_and_positivity():
    t = obj.Temperature(0.07, np.float64)
    assert t.value == pytest.approx(0.07, abs=1e-12)
    assert float(t.log_tau.data) == pytest.approx(np.log(0.07))
    with pytest.raises(ValueError, match="positive"):
        obj.Temperature(0.0)
    # moving log tau keeps tau positive by construction
    t.log_tau.data = np.asarray(-30.0)
    assert t.value > 0


# ---------------------------------------------------------------------------
# contrastive pair loss


def test_clip_single_pair_is_zero(temp, rng):
    loss = obj.clip_loss(feats(rng, 1), feats(rng, 1), temp)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_clip_uniform_similarity_is_log_n(temp):
    x = ad.constant(np.tile([1.0, 0.0, 0.0], (4, 1)))
    loss = obj.clip_loss(x, x, temp)
    assert loss.item() == pytest.approx(np.log(4.0), abs=1e-6)


def test_clip_matches_loop_oracle(temp, rng):
    img = rng.normal(size=(3, 6))
    txt = rng.normal(size=(3, 6))
    got = obj.clip_loss(ad.constant(img), ad.constant(txt), temp).item()
    want = oracles.clip_loss(img, txt, temp.value)
    assert got == pytest.approx(want, abs=1e-6)


# ---------------------------------------------------------------------------
# triplet contrastive loss


def test_e2e_single_is_zero(temp, rng):
    assert obj.e2e_loss(feats(rng, 1), feats(rng, 1), temp).item() == pytest.approx(0.0, abs=1e-12)


def test_e2e_uniform_is_log4(temp):
    x = ad.constant(np.tile([0.0, 2.0], (4, 1)))
    assert obj.e2e_loss(x, x, temp).item() == pytest.approx(1.386294, abs=1e-6)


def test_e2e_matches_loop_oracle(temp, rng):
    a = rng.normal(size=(3, 6))
    b = rng.normal(size=(3, 6))
    got = obj.e2e_loss(ad.constant(a), ad.constant(b), temp).item()
    assert got == pytest.approx(oracles.e2e_loss(a, b, temp.value), abs=1e-6)


def test_e2e_rejects_duplicate_tails(temp, rng):
    with pytest.raises(ValueError, match="duplicate tails"):
        obj.e2e_loss(feats(rng, 3), feats(rng, 3), temp, tail_ids=["a", "b", "a"])


def test_e2e_scale_invariance(temp, rng):
    # cosine kills feature magnitude, so any c > 0 leaves the loss unchanged
    a = rng.normal(size=(4, 6))
    b = rng.normal(size=(4, 6))
    base = obj.e2e_loss(ad.constant(a), ad.constant(b), temp).item()
    for c in (1e-3, 7.0, 2.5e4):
        scaled = obj.e2e_loss(ad.constant(a * c), ad.constant(b * c), temp).item()
        assert scaled == pytest.approx(base, abs=1e-6)


def test_e2e_batch_permutation_invariance(temp, rng):
    a = rng.normal(size=(5, 6))
    b = rng.normal(size=(5, 6))
    base = obj.e2e_loss(ad.constant(a), ad.constant(b), temp).item()
    perm = rng.permutation(5)
    mixed = obj.e2e_loss(ad.constant(a[perm]), ad.constant(b[perm]), temp).item()
    assert mixed == pytest.approx(base, abs=1e-6)


def test_e2e_temperature_gradient_matches_fd(temp, rng):
    a = rng.normal(size=(4, 6))
    b = rng.normal(size=(4, 6))
    err = ad.grad_check(lambda params: obj.e2e_loss(ad.constant(a), ad.constant(b), temp),
                        [temp.log_tau], eps=1e-6)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# relation classification


def test_e2r_uniform_13_relations(rng):
    head = obj.RelationHead(6, 13, rng, np.float64)
    head.fc2.w.data[:] = 0.0
    head.fc2.b.data[:] = 0.0
    loss = obj.e2r_loss(feats(rng, 5), np.array([0, 3, 7, 12, 1]), head)
    assert loss.item() == pytest.approx(2.564949, abs=1e-6)


def test_e2r_saturated_logits(rng):
    # zeroed fc1 makes the head output its fc2 bias; a one-hot bias of 1e6 at
    # the true class saturates the softmax
    head = obj.RelationHead(6, 4, rng, np.float64)
    head.fc1.w.data[:] = 0.0
    head.fc1.b.data[:] = 0.0
    head.fc2.w.data[:] = 0.0
    head.fc2.b.data[:] = np.array([0.0, 0.0, 1e6, 0.0])
    loss = obj.e2r_loss(feats(rng, 3), np.array([2, 2, 2]), head)
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_e2r_matches_loop_oracle(rng):
    head = obj.RelationHead(6, 4, rng, np.float64)
    x = feats(rng, 5)
    labels = np.array([0, 1, 3, 2, 1])
    got = obj.e2r_loss(x, labels, head).item()
    want = oracles.e2r_loss(head(x).data, labels)
    assert got == pytest.approx(want, abs=1e-6)


def test_e2r_rejects_out_of_range_labels(rng):
    head = obj.RelationHead(6, 4, rng, np.float64)
    with pytest.raises(ValueError, match="relation ids"):
        obj.e2r_loss(feats(rng, 2), np.array([0, 4]), head)


# ---------------------------------------------------------------------------
# propagation


def make_weights(rng, layers, d):
    return obj.GnnWeights(layers, d, rng, np.float64)


def test_gnn_isolated_node_keeps_feature(rng):
    w = make_weights(rng, 3, 4)
    y0 = rng.normal(size=(3, 4))
    # node 2 has no incoming edges at all
    edges = [(2, 0), (0, 1)]
    rels = ad.constant(rng.normal(size=(2, 4)))
    out = obj.gnn_propagate(ad.constant(y0), edges, rels, w).data
    np.testing.assert_array_equal(out[2], y0[2])


def test_gnn_single_edge_copies_head(rng):
    w = make_weights(rng, 1, 4)
    y0 = rng.normal(size=(2, 4))
    out = obj.gnn_propagate(ad.constant(y0), [(0, 1)],
                            ad.constant(rng.normal(size=(1, 4))), w).data
    np.testing.assert_allclose(out[1], y0[0], atol=1e-12)
    np.testing.assert_array_equal(out[0], y0[0])


def test_gnn_chain_matches_oracle(rng):
    w = make_weights(rng, 2, 4)
    y0 = rng.normal(size=(3, 4))
    edges = [(0, 1), (1, 2)]
    rels = rng.normal(size=(2, 4))
    got = obj.gnn_propagate(ad.constant(y0), edges, ad.constant(rels), w).data
    want = oracles.gnn_propagate(3, edges, rels, y0, list(w.w.data))
    np.testing.assert_allclose(got, want, atol=1e-6)


@pytest.mark.parametrize("seed", range(6))
def test_gnn_random_graphs_match_oracle(seed):
    # random multigraphs up to 6 nodes, up to 3 layers, duplicate edges allowed
    r = np.random.default_rng(seed)
    n, layers, n_edges = r.integers(1, 7), r.integers(1, 4), int(r.integers(0, 10))
    edges = [tuple(r.integers(0, n, size=2)) for _ in range(n_edges)]
    y0 = r.normal(size=(n, 5))
    rels = r.normal(size=(n_edges, 5))
    w = make_weights(r, int(layers), 5)
    got = obj.gnn_propagate(ad.constant(y0), edges, ad.constant(rels), w).data
    want = oracles.gnn_propagate(int(n), edges, rels, y0, list(w.w.data))
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_gnn_edge_count_mismatch(rng):
    w = make_weights(rng, 1, 4)
    with pytest.raises(ShapeError, match="edges"):
        obj.gnn_propagate(ad.constant(rng.normal(size=(2, 4))), [(0, 1)],
                          ad.constant(rng.normal(size=(2, 4))), w)


# ---------------------------------------------------------------------------
# graph-entity contrast and distillation


def test_g2e_single_entity_zero(temp, rng):
    assert obj.g2e_loss(feats(rng, 1), feats(rng, 1), temp).item() == pytest.approx(0.0, abs=1e-12)


def test_g2e_uniform_five_entities(temp):
    x = ad.constant(np.tile([3.0, 0.0], (5, 1)))
    assert obj.g2e_loss(x, x, temp).item() == pytest.approx(1.609438, abs=1e-6)


def test_g2e_identity_orthogonal_matches_oracle(rng):
    # propagated == original and mutually orthogonal entities at tau = 1
    temp1 = obj.Temperature(1.0, np.float64)
    y = np.eye(4)
    got = obj.g2e_loss(ad.constant(y), ad.constant(y), temp1).item()
    want = oracles.g2e_loss(y, y, 1.0)
    assert got == pytest.approx(want, abs=1e-6)


def test_kd_student_equals_teacher_is_zero(temp, rng):
    sims = rng.normal(size=(4, 4))
    loss = obj.kd_loss(ad.constant(sims), sims, temp, temp.value)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_kd_matches_loop_oracle(temp, rng):
    s = rng.normal(size=(3, 3))
    t = rng.normal(size=(3, 3))
    got = obj.kd_loss(ad.constant(s), t, temp, 0.1).item()
    assert got == pytest.approx(oracles.kd_loss(s, t, temp.value, 0.1), abs=1e-6)


def test_kd_shape_mismatch(temp, rng):
    with pytest.raises(ShapeError, match="differ"):
        obj.kd_loss(ad.constant(rng.normal(size=(3, 3))), rng.normal(size=(2, 2)), temp, 0.1)


@pytest.mark.parametrize("seed", range(25))
def test_losses_are_nonnegative(seed, temp):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 6))
    a, b = r.normal(size=(n, 5)), r.normal(size=(n, 5))
    assert obj.e2e_loss(ad.constant(a), ad.constant(b), temp).item() >= 0
    assert obj.clip_loss(ad.constant(a), ad.constant(b), temp).item() >= 0
    assert obj.g2e_loss(ad.constant(a), ad.constant(b), temp).item() >= 0
    s, t = r.normal(size=(n, n)), r.normal(size=(n, n))
    assert obj.kd_loss(ad.constant(s), t, temp, 0.07).item() >= -1e-12


# ---------------------------------------------------------------------------
# composition


def as_scalar(v):
    return ad.constant(np.asarray(v, dtype=np.float64))


def test_total_zero_components():
    total, report = obj.total_loss(as_scalar(0.0), as_scalar(0.0), as_scalar(0.0),
                                   as_scalar(0.0), dtype=np.float64)
    assert total.item() == 0.0
    assert report.total == 0.0


def test_total_sums_components():
    total, report = obj.total_loss(as_scalar(1.0), as_scalar(2.0), as_scalar(3.0),
                                   as_scalar(4.0), dtype=np.float64)
    assert total.item() == pytest.approx(10.0, abs=1e-12)
    assert (report.e2e, report.e2r, report.g2e, report.kd) == (1.0, 2.0, 3.0, 4.0)


def test_total_reports_baseline_without_adding_it():
    total, report = obj.total_loss(as_scalar(1.0), None, None, None,
                                   clip_baseline=as_scalar(9.0), dtype=np.float64)
    assert total.item() == pytest.approx(1.0)
    assert report.clip_baseline == 9.0
    # warm-start mode folds the pair loss in
    total2, report2 = obj.total_loss(None, None, None, None,
                                     clip_baseline=as_scalar(9.0),
                                     include_clip=True, dtype=np.float64)
    assert total2.item() == pytest.approx(9.0)
    assert report2.total == pytest.approx(9.0)


def test_total_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="e2r"):
        obj.total_loss(as_scalar(1.0), as_scalar(np.nan), None, None, dtype=np.float64)
