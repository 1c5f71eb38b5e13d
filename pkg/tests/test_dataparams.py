import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpkws.dataparams import (
    DataParameterError,
    DataParameterStore,
    data_parameter_gradients,
    dp_cross_entropy,
    effective_sigma,
    non_target_distribution,
    read_snapshot_csv,
    scaled_softmax,
    sigma_gradient,
    sigma_star_gradients,
    snapshot_rows,
    softmax_cross_entropy,
    update_data_parameters,
    write_snapshot_csv,
)

from oracles import batch_loss, central_diff, frame_nll, rel_err


def test_effective_sigma_modes():
    store = DataParameterStore.create(20, 4, class_init=1.0, instance_init=0.01,
                                      class_enabled=True, instance_enabled=False)
    assert effective_sigma(store, 3, 0) == 1.0
    store.instance_enabled = True
    assert effective_sigma(store, 3, 0) == pytest.approx(1.01, abs=1e-15)
    store.log_class_sigma[:] = np.log(0.5)
    store.log_instance_sigma[:] = np.log(0.25)
    assert effective_sigma(store, 0, 1) == pytest.approx(0.75, abs=1e-15)


def test_effective_sigma_both_disabled_is_exactly_one():
    store = DataParameterStore.create(5, 3, class_init=3.0, instance_init=2.0,
                                      class_enabled=False, instance_enabled=False)
    assert effective_sigma(store, 2, 1) == 1.0


def test_effective_sigma_out_of_range():
    store = DataParameterStore.create(5, 3)
    with pytest.raises(DataParameterError, match="class id 7"):
        effective_sigma(store, 7, 0)
    store.instance_enabled = True
    with pytest.raises(DataParameterError, match="instance id 3"):
        effective_sigma(store, 0, 3)


def test_scaled_softmax_values():
    np.testing.assert_allclose(scaled_softmax([0.0, 0.0], 0, 3.7), [0.5, 0.5])
    np.testing.assert_allclose(scaled_softmax([1.0, 0.0], 0, 1.0), [0.7311, 0.2689], atol=1e-4)
    np.testing.assert_allclose(scaled_softmax([1.0, 0.0], 0, 0.5), [0.8808, 0.1192], atol=1e-4)


def test_scaled_softmax_rejects_nonfinite():
    with pytest.raises(DataParameterError):
        scaled_softmax([np.nan, 0.0], 0, 1.0)


def test_scaled_softmax_no_overflow():
    p = scaled_softmax([800.0, 0.0, -800.0], 0, 0.05)
    assert np.all(np.isfinite(p))
    assert p[0] == 1.0


def test_cross_entropy_uniform_frame():
    r = dp_cross_entropy(np.zeros((1, 2)), [0], [1.0])
    assert r.loss == pytest.approx(np.log(2))
    np.testing.assert_allclose(r.logit_grads, [[-0.5, 0.5]])


def test_cross_entropy_sigma_one_bit_identical_to_plain():
    rng = np.random.default_rng(0)
    z = rng.uniform(-8, 8, size=(300, 20))
    y = rng.integers(0, 20, size=300)
    r = dp_cross_entropy(z, y, np.ones(300))
    loss, g = softmax_cross_entropy(z, y)
    assert r.loss == loss
    assert np.array_equal(r.logit_grads, g)


def test_cross_entropy_empty_batch():
    with pytest.raises(DataParameterError):
        dp_cross_entropy(np.zeros((0, 3)), [], [])


@pytest.mark.parametrize("seed", range(5))
def test_cross_entropy_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    n, K = 4, 5
    z = rng.uniform(-5, 5, size=(n, K))
    y = rng.integers(0, K, size=n)
    sig = rng.uniform(0.05, 20, size=n)
    r = dp_cross_entropy(z, y, sig)
    assert r.loss == pytest.approx(batch_loss(z, y, sig), rel=1e-12)
    fd_z = central_diff(lambda zz: batch_loss(zz, y, sig), z)
    fd_s = central_diff(lambda ss: batch_loss(z, y, ss), sig)
    for i in range(n):
        assert rel_err(r.logit_grads[i], fd_z[i]) < 1e-6
        assert rel_err(r.sigma_star_grads[i], fd_s[i]) < 1e-6


def test_logit_grads_sum_to_zero():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(50, 7)) * 4
    r = dp_cross_entropy(z, rng.integers(0, 7, 50), rng.uniform(0.05, 20, 50))
    np.testing.assert_allclose(r.logit_grads.sum(axis=1), 0.0, atol=1e-15)
    assert np.all(r.per_frame_sigma_star > 0)


def test_target_grad_survives_saturation():
    # p_y rounds to 1; the target entry must still balance the others
    z = np.array([[8.0, -8.0, -7.5]])
    r = dp_cross_entropy(z, [0], [0.05])
    g = r.logit_grads[0]
    assert g[0] < 0 and g[1] > 0
    np.testing.assert_allclose(g[0], -(g[1] + g[2]), rtol=1e-12)
    _, plain = softmax_cross_entropy(z * 20, [0])
    np.testing.assert_allclose(plain[0, 0], -(plain[0, 1] + plain[0, 2]), rtol=1e-12)


def test_sigma_gradient_examples():
    assert sigma_gradient([1.0, 1.0], 0, 2.0) == 0.0
    for c in (-3.0, 0.0, 5.5):
        assert sigma_gradient([c] * 6, 4, 0.7) == pytest.approx(0.0, abs=1e-15)
    g = sigma_gradient([0.0, 3.0], 0, 1.0)
    fd = central_diff(lambda s: frame_nll([0.0, 3.0], 0, s[0]), [1.0])[0]
    assert g < 0
    assert rel_err(g, fd) < 1e-6


def test_sigma_gradient_saturation_returns_zero():
    grads, saturated = sigma_star_gradients([[60.0, 0.0, 0.0]], [0], [0.01])
    assert saturated[0]
    assert grads[0] == 0.0


logits_st = st.integers(2, 20).flatmap(
    lambda K: st.tuples(
        st.lists(st.floats(-8, 8), min_size=K, max_size=K),
        st.integers(0, K - 1),
        st.floats(0.05, 20),
    )
)


@settings(max_examples=300, deadline=None)
@given(logits_st)
def test_q_distribution_is_a_distribution(case):
    z, y, sig = case
    p = scaled_softmax(z, y, sig)
    q = non_target_distribution(z, y, sig)
    if p[y] >= 1 - 1e-12:
        return
    assert q[y] == 0.0
    assert np.all(q >= 0)
    assert abs(q.sum() - 1) < 1e-9


@settings(max_examples=300, deadline=None)
@given(logits_st, st.floats(0.01, 100))
def test_temperature_homogeneity(case, c):
    z, y, sig = case
    p1 = scaled_softmax(z, y, sig)
    p2 = scaled_softmax(np.asarray(z) * c, y, sig * c)
    np.testing.assert_allclose(p1, p2, rtol=1e-9, atol=1e-300)
    assert np.argmax(p1) == np.argmax(p2)


@settings(max_examples=300, deadline=None)
@given(logits_st)
def test_sigma_gradient_sign(case):
    z, y, sig = case
    z = np.asarray(z)
    others = np.delete(z, y)
    g = sigma_gradient(z, y, sig)
    if z[y] < others.min():
        assert g < 0
    elif z[y] > others.max():
        assert g > 0


def test_update_fixed_point():
    store = DataParameterStore.create(4, 3, class_init=1.3, instance_init=0.2,
                                      class_enabled=True, instance_enabled=True)
    before = store.copy()
    update_data_parameters(store, np.zeros(4), np.zeros(3), 0.1, 0.1)
    assert np.array_equal(store.log_class_sigma, before.log_class_sigma)
    assert np.array_equal(store.log_instance_sigma, before.log_instance_sigma)


def test_update_clips_to_lower_bound():
    store = DataParameterStore.create(3, 1, class_init=0.06)
    update_data_parameters(store, np.array([1e3, 0.0, 0.0]), np.zeros(1), 0.1, 0.0)
    assert store.class_sigma[0] == 0.05
    assert store.class_sigma[1] == pytest.approx(0.06)


def test_update_single_frame_chain_rule():
    store = DataParameterStore.create(3, 2, class_init=0.8, instance_init=0.3,
                                      class_enabled=True, instance_enabled=False)
    z = np.array([[0.5, -1.0, 2.0]])
    r = dp_cross_entropy(z, [1], effective_sigma(store, [1], [0]))
    gc, gi = data_parameter_gradients(store, r.sigma_star_grads, [1], [0],
                                      r.per_frame_sigma_star)
    # derivative of the loss through the log parameterisation
    fd = central_diff(lambda lv: frame_nll(z[0], 1, np.exp(lv[0])), [np.log(0.8)])[0]
    assert rel_err(gc[1], fd) < 1e-6
    eta = 0.01
    expected = np.log(0.8) - eta * 0.8 * r.sigma_star_grads[0]
    update_data_parameters(store, gc, gi, eta, 0.0)
    assert store.log_class_sigma[1] == pytest.approx(expected, rel=1e-14)
    assert store.log_class_sigma[0] == np.log(0.8)


def test_weight_decay_gradient_matches_penalty():
    store = DataParameterStore.create(3, 2, class_init=0.8, instance_init=0.3,
                                      class_enabled=True, instance_enabled=True)
    rng = np.random.default_rng(1)
    cls = np.array([0, 1, 1, 2, 0])
    inst = np.array([0, 0, 1, 1, 1])
    z = rng.normal(size=(5, 3))
    wd = 0.07
    store.log_class_sigma[:] = np.log([0.8, 1.5, 0.3])
    store.log_instance_sigma[:] = np.log([0.3, 0.02])

    def objective(logc, logi):
        sig = np.exp(logc)[cls] + np.exp(logi)[inst]
        return batch_loss(z, cls, sig) + wd * np.sum(np.log(sig) ** 2)

    sig = effective_sigma(store, cls, inst)
    r = dp_cross_entropy(z, cls, sig)
    gc, gi = data_parameter_gradients(store, r.sigma_star_grads, cls, inst, sig, wd)
    fd_c = central_diff(lambda lc: objective(lc, store.log_instance_sigma), store.log_class_sigma)
    fd_i = central_diff(lambda li: objective(store.log_class_sigma, li), store.log_instance_sigma)
    assert rel_err(gc, fd_c) < 1e-6
    assert rel_err(gi, fd_i) < 1e-6


def test_nonfinite_gradient_skipped():
    store = DataParameterStore.create(3, 1, class_init=1.0)
    update_data_parameters(store, np.array([np.nan, 1.0, 0.0]), np.zeros(1), 0.1, 0.0)
    assert store.log_class_sigma[0] == 0.0
    assert store.log_class_sigma[1] == pytest.approx(-0.1)
    assert store.skipped_updates == 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=6, max_size=6),
       st.lists(st.floats(-1e6, 1e6), min_size=4, max_size=4),
       st.floats(1e-4, 10.0))
def test_clip_ranges_hold(gc, gi, lr):
    store = DataParameterStore.create(6, 4, class_init=1.0, instance_init=0.01,
                                      class_enabled=True, instance_enabled=True)
    for _ in range(3):
        update_data_parameters(store, np.array(gc), np.array(gi), lr, lr)
        assert np.all((store.class_sigma >= 0.05) & (store.class_sigma <= 20.0))
        assert np.all((store.instance_sigma >= 0.0001) & (store.instance_sigma <= 20.0))


def test_snapshot_csv_roundtrip(tmp_path):
    store = DataParameterStore.create(3, 2, class_init=1.0, instance_init=0.01,
                                      class_enabled=True, instance_enabled=True)
    rows = snapshot_rows(store, 0, instance_ids=[10, 11])
    path = tmp_path / "sig.csv"
    write_snapshot_csv(path, rows)
    back = read_snapshot_csv(path)
    assert back == rows
    assert path.read_text().splitlines()[0] == "epoch,kind,id,sigma_value"
