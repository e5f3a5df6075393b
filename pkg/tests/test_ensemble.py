import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensemblefit import ensemble as ens
from ensemblefit.tensor_net import Dense, Flatten, LayeredModel, Sigmoid, forward, sigmoid

SHAPE = (1, 2, 2)


def const_model(logit, shape=SHAPE):
    """Outputs sigmoid(logit) for every input."""
    size = int(np.prod(shape))
    dense = Dense(size, 1)
    dense.params["weight"][:] = 0.0
    dense.params["bias"][:] = logit
    return LayeredModel([Flatten(), dense, Sigmoid()], shape)


def linear_model(seed, shape=SHAPE):
    return LayeredModel([Flatten(), Dense(int(np.prod(shape)), 1, rng=np.random.default_rng(seed)), Sigmoid()],
                        shape)


def with_losses(losses):
    e = ens.build_ensemble([linear_model(i) for i in range(len(losses))], SHAPE, len(losses))
    members = tuple(ens.replace(m, val_loss=v) for m, v in zip(e.members, losses))
    return ens.replace(e, members=members)


X = np.random.default_rng(0).random((7, *SHAPE))


# -- build ------------------------------------------------------------------------------


def test_build_three_of_three():
    e = ens.build_ensemble([linear_model(i) for i in range(3)], SHAPE, 3)
    assert len(e.members) == 3 and e.rejected == ()


def test_build_rejects_mismatched_shape():
    cands = [linear_model(0), linear_model(1, (1, 3, 3)), linear_model(2)]
    e = ens.build_ensemble(cands, SHAPE, 3, ["a", "b", "c"])
    assert [m.model_id for m in e.members] == ["a", "c"]
    assert len(e.rejected) == 1 and e.rejected[0][0] == "b"


def test_build_cap_keeps_first():
    cands = [linear_model(i) for i in range(3)]
    e = ens.build_ensemble(cands, SHAPE, 1)
    assert len(e.members) == 1 and e.members[0].model is cands[0]


def test_build_none_admitted():
    with pytest.raises(ValueError, match="no shape-compatible candidates"):
        ens.build_ensemble([linear_model(0, (1, 3, 3))], SHAPE, 2)


# -- evaluate / select ---------------------------------------------------------------------


def test_evaluate_constant_half_member():
    e = ens.evaluate_members(ens.build_ensemble([const_model(0.0)], SHAPE, 1), X, np.arange(7) % 2)
    assert e.members[0].val_loss == pytest.approx(np.log(2), abs=1e-12)
    assert round(e.members[0].val_loss, 4) == 0.6931


def test_evaluate_perfect_member():
    y = np.ones(7)
    e = ens.evaluate_members(ens.build_ensemble([const_model(40.0)], SHAPE, 1), X, y)
    assert e.members[0].val_loss == pytest.approx(0.0, abs=1e-6)


def test_evaluate_empty():
    with pytest.raises(ValueError):
        ens.evaluate_members(ens.build_ensemble([const_model(0.0)], SHAPE, 1), X[:0], [])


def test_select_reference_losses_and_ties():
    assert ens.select_min_loss(with_losses([0.0067, 0.0055, 0.0103])) == 1
    assert ens.select_min_loss(with_losses([0.2, 0.2, 0.2])) == 0
    assert ens.select_min_loss(with_losses([0.4])) == 0
    with pytest.raises(ValueError):
        ens.select_min_loss(ens.build_ensemble([linear_model(0)], SHAPE, 1))


def test_predict_min_loss_is_selected_member():
    e = with_losses([0.0067, 0.0055, 0.0103])
    np.testing.assert_array_equal(ens.predict_min_loss(e, X), forward(e.members[1].model, X)[:, 0])
    single = with_losses([0.3])
    np.testing.assert_array_equal(ens.predict(single, X), forward(single.members[0].model, X)[:, 0])


@settings(max_examples=200)
@given(st.lists(st.floats(0, 5, allow_nan=False), min_size=1, max_size=8))
def test_select_matches_brute_force(losses):
    e = with_losses(losses)
    assert ens.select_min_loss(e) == min(range(len(losses)), key=lambda i: (losses[i], i))


# -- weights ------------------------------------------------------------------------------


def test_reciprocal_reference_losses():
    w = ens.reciprocal_weights([0.0067, 0.0055, 0.0103])
    np.testing.assert_allclose(w, [0.3486, 0.4247, 0.2268], atol=1e-4)
    np.testing.assert_allclose(ens.reciprocal_weights([0.3, 0.3, 0.3]), [1 / 3] * 3, atol=1e-15)


def test_reciprocal_errors_and_zero_clamp():
    with pytest.raises(ValueError):
        ens.reciprocal_weights([])
    with pytest.raises(ValueError):
        ens.reciprocal_weights([0.1, -0.1])
    w = ens.reciprocal_weights([0.0, 1.0])
    assert np.isfinite(w).all() and w[0] > 0.999


@given(st.lists(st.floats(1e-4, 10), min_size=1, max_size=8), st.floats(1e-3, 1e3))
def test_reciprocal_scale_invariant(losses, k):
    w = ens.reciprocal_weights(losses)
    assert abs(w.sum() - 1) < 1e-12
    assert np.max(np.abs(ens.reciprocal_weights(np.array(losses) * k) - w)) <= 1e-12


def test_combine_examples():
    one = ens.build_ensemble([linear_model(3)], SHAPE, 1).with_weights([1.0], ens.RECIPROCAL)
    np.testing.assert_allclose(ens.combine_weighted(one, X), forward(one.members[0].model, X)[:, 0], rtol=1e-14)

    sym = ens.build_ensemble([const_model(1.7), const_model(-1.7)], SHAPE, 2).with_weights([0.5, 0.5], "reciprocal")
    np.testing.assert_allclose(ens.combine_weighted(sym, X), 0.5, atol=1e-15)

    three = ens.build_ensemble([const_model(2.0), const_model(0.0), const_model(-1.0)], SHAPE, 3)
    w = np.array([0.3486, 0.4247, 0.2268])
    w = w / w.sum()
    p = ens.combine_weighted(three, X, w)
    assert p[0] == pytest.approx(sigmoid(w @ [2.0, 0.0, -1.0]), abs=1e-15)
    assert p[0] == pytest.approx(0.6155, abs=1e-4)


def test_combine_unset_weights():
    with pytest.raises(ValueError):
        ens.combine_weighted(ens.build_ensemble([linear_model(0)], SHAPE, 1), X)


def test_prob_combination():
    e = ens.build_ensemble([const_model(2.0), const_model(-1.0)], SHAPE, 2, combine="prob")
    p = ens.combine_weighted(e, X, [0.25, 0.75])
    assert p[0] == pytest.approx(0.25 * sigmoid(2.0) + 0.75 * sigmoid(-1.0), abs=1e-15)


def test_with_weights_validates():
    e = ens.build_ensemble([linear_model(0), linear_model(1)], SHAPE, 2)
    with pytest.raises(ValueError):
        e.with_weights([0.5, 0.6], ens.RECIPROCAL)
    with pytest.raises(ValueError):
        e.with_weights([1.0], ens.RECIPROCAL)


# -- calibration ---------------------------------------------------------------------------------


def brute_force_calibration(logit_rows, y, lam, step, threshold=0.5):
    """Independent oracle: enumerate the lattice in the documented order, keep the first best."""
    n, k = len(logit_rows), round(1 / step)
    best, best_w = -np.inf, None
    for c in itertools.product(range(k, -1, -1), repeat=n):
        if sum(c) != k:
            continue
        w = np.array(c) / k
        p = 1 / (1 + np.exp(-(w @ logit_rows)))
        acc = np.mean((p >= threshold) == (y >= 0.5))
        q = np.clip(p, 1e-7, 1 - 1e-7)
        score = acc - lam * -np.mean(y * np.log(q) + (1 - y) * np.log(1 - q))
        if score > best:
            best, best_w = score, w
    return best_w


def test_calibrate_single_member():
    e = ens.build_ensemble([linear_model(0)], SHAPE, 1)
    for lam in (0.0, 1.0, 50.0):
        assert ens.calibrate_weights(e, X, np.ones(7), lam).weights.tolist() == [1.0]


def test_calibrate_perfect_vs_adversarial():
    y = (np.arange(7) % 2).astype(float)
    # A's output follows the label through a per-item input feature, B inverts it
    Xl = np.zeros((7, *SHAPE))
    Xl[:, 0, 0, 0] = np.where(y == 1, 1.0, -1.0)
    a, b = linear_model(0), linear_model(1)
    for m, s in ((a, 5.0), (b, -5.0)):
        m.layers[1].params["weight"][:] = 0.0
        m.layers[1].params["weight"][0, 0] = s
        m.layers[1].params["bias"][:] = 0.0
    e = ens.calibrate_weights(ens.build_ensemble([a, b], SHAPE, 2), Xl, y, lam=0.0)
    assert e.weights[0] == 1.0 and e.mode == ens.CALIBRATED


def test_calibrate_large_lambda_orders_by_loss():
    rng = np.random.default_rng(1)
    models = [linear_model(i) for i in range(3)]
    e = ens.build_ensemble(models, SHAPE, 3)
    y = rng.integers(0, 2, 7).astype(float)
    out = ens.member_logits(e, X)
    grid = ens.simplex_grid(3, 0.1)
    big = ens.calibration_objective(e, out, y, grid, 1e9)
    bce = -(ens.calibration_objective(e, out, y, grid, 1.0) - ens.calibration_objective(e, out, y, grid, 0.0))
    np.testing.assert_array_equal(np.argsort(-big, kind="stable"), np.argsort(bce, kind="stable"))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 2**31), st.sampled_from([0.0, 0.5, 1.0, 5.0]),
       st.sampled_from([0.1, 0.25, 0.5]))
def test_calibrate_matches_oracle(n, seed, lam, step):
    rng = np.random.default_rng(seed)
    e = ens.build_ensemble([linear_model(int(s)) for s in rng.integers(0, 10**6, n)], SHAPE, n)
    Xv = rng.normal(size=(12, *SHAPE))
    y = rng.integers(0, 2, 12).astype(float)
    got = ens.calibrate_weights(e, Xv, y, lam, step).weights
    np.testing.assert_array_equal(got, brute_force_calibration(ens.member_logits(e, Xv), y, lam, step))


def test_simplex_grid_order_and_size():
    g = ens.simplex_grid(3, 0.1)
    assert len(g) == 66 and g[0].tolist() == [1.0, 0.0, 0.0]
    assert np.allclose(g.sum(axis=1), 1)
    with pytest.raises(ValueError):
        ens.simplex_grid(2, 0.3)


# -- classify / persistence --------------------------------------------------------------------


def test_classify_boundary():
    assert ens.classify(0.7, 0.5) == 1
    assert ens.classify(0.5, 0.5) == 1
    assert ens.classify(0.49999, 0.5) == 0


def test_save_load_round_trip(tmp_path):
    e = with_losses([0.2, 0.1]).with_weights([0.25, 0.75], ens.RECIPROCAL)
    ens.save_ensemble(e, tmp_path)
    back = ens.load_ensemble(tmp_path)
    assert back.mode == ens.RECIPROCAL and back.losses == [0.2, 0.1]
    np.testing.assert_array_equal(ens.predict(back, X), ens.predict(e, X))


def test_load_version_mismatch(tmp_path):
    path = ens.save_ensemble(with_losses([0.2]), tmp_path)
    path.write_text(path.read_text().replace('"format_version": 1', '"format_version": 9'))
    with pytest.raises(ValueError, match="found 9"):
        ens.load_ensemble(path)
