import numpy as np
import pytest
import scipy.sparse as sp

from posit import adversary as advm
from posit.adversary import AdversaryNet, PositConfig, PositTrainer
from posit.ease import EaseModel, EaseTrainer, TrainConfig
from posit.exceptions import DegenerateAdversaryError, DivergenceError

from conftest import random_binary


def test_normalize_examples():
    np.testing.assert_allclose(advm.normalize([1, 2, 3]), [-1.224744871391589, 0, 1.224744871391589])
    np.testing.assert_array_equal(advm.normalize([4.0, 4.0, 4.0]), [0, 0, 0])
    x = np.random.default_rng(0).normal(size=50)
    y = advm.normalize(x, tau=1.5)
    assert abs(y.std() - 1.5) < 1e-9 and abs(y.mean()) < 1e-12


def test_zero_network_outputs_half(rng):
    F = sp.csr_matrix(random_binary(rng, 6, 4, 0.5))
    net = AdversaryNet(np.zeros((4, 3)), np.zeros(3))
    np.testing.assert_array_equal(advm.forward(net, F), np.full(6, 0.5))


def test_identical_columns_identical_weights(rng):
    F = random_binary(rng, 5, 8, 0.5)
    F[3] = F[1]
    net = AdversaryNet(rng.normal(size=(8, 3)), rng.normal(size=3))
    a = advm.forward(net, sp.csr_matrix(F))
    assert a[1] == a[3]


def test_normalized_weights_examples():
    np.testing.assert_allclose(advm.normalized_weights([0.2, 0.6]), [0.5, 1.5])
    np.testing.assert_array_equal(advm.normalized_weights([0.3] * 4), np.ones(4))
    raw = np.array([0.1, 0.7, 0.3])
    np.testing.assert_allclose(advm.normalized_weights(7.3 * raw), advm.normalized_weights(raw), rtol=1e-15)
    with pytest.raises(DegenerateAdversaryError):
        advm.normalized_weights([0.0, 0.0])


def _fd(net, F, ema, eps=1e-6):
    grads = []
    for p in net.params():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            a = advm.adversary_objective(net, F, ema)
            p[idx] = old - eps
            b = advm.adversary_objective(net, F, ema)
            p[idx] = old
            g[idx] = (a - b) / (2 * eps)
        grads.append(g)
    return grads


@pytest.mark.parametrize("arch", [advm.DEFAULT_ARCH, "tanh,sigmoid"])
def test_objective_gradient_finite_differences(rng, arch):
    # h=3 hidden units, |I|=5 items, 4 training users
    F = sp.csr_matrix(random_binary(rng, 5, 4, 0.5))
    net = AdversaryNet(rng.normal(size=(4, 3)), rng.normal(size=3), tau=1.5, arch=arch)
    ema = rng.uniform(size=5)
    _, _, grads = advm.objective_and_grad(net, F, ema)
    for g, n in zip(grads, _fd(net, F, ema)):
        rel = np.linalg.norm(g - n) / max(np.linalg.norm(n), 1e-12)
        assert rel < 1e-4


def test_equal_advantage_zero_gradient(rng):
    F = sp.csr_matrix(random_binary(rng, 6, 5, 0.5))
    net = AdversaryNet(rng.normal(size=(5, 3)), rng.normal(size=3))
    J, w, grads = advm.objective_and_grad(net, F, np.full(6, 0.4))
    assert J == pytest.approx(-0.4 * 6)
    assert w.sum() == pytest.approx(6)
    assert max(np.abs(g).max() for g in grads) < 1e-12


def test_two_item_step_favours_disadvantaged():
    F = sp.csr_matrix(np.array([[1, 1, 0], [0, 1, 1]], dtype=float))
    net = AdversaryNet.init(3, hidden=4, seed=1)
    ema = np.array([1.0, 0.0])
    before = advm.normalized_weights(advm.forward(net, F))
    advm.adversary_step(net, F, ema, adv_lr=0.1)
    after = advm.normalized_weights(advm.forward(net, F))
    assert after[1] / after[0] > before[1] / before[0]

    # grid oracle: over random parameter draws, the objective is larger
    # exactly when item 2 carries more weight
    grid = np.random.default_rng(5)
    for _ in range(200):
        probe = AdversaryNet(grid.normal(size=(3, 4)), grid.normal(size=4))
        w = advm.normalized_weights(advm.forward(probe, F))
        J = advm.adversary_objective(probe, F, ema)
        assert J == pytest.approx(-w[0])
        assert (J > -1.0) == (w[1] > w[0]) or np.isclose(w[0], w[1])


def test_small_step_increases_objective(rng):
    F = sp.csr_matrix(random_binary(rng, 8, 6, 0.5))
    net = AdversaryNet(rng.normal(size=(6, 3)), rng.normal(size=3))
    ema = rng.uniform(size=8)
    before = advm.adversary_objective(net, F, ema)
    advm.adversary_step(net, F, ema, adv_lr=1e-3)
    assert advm.adversary_objective(net, F, ema) >= before


def test_nan_gradient_raises():
    net = AdversaryNet.init(3, hidden=2)
    trainer = advm.AdversaryTrainer(net, 0.1)
    with pytest.raises(DivergenceError):
        trainer.apply([np.full((3, 2), np.nan), np.zeros(2)], 4, batch=7)


def test_arch_parsing():
    assert advm.parse_arch("norm-tanh,norm-sigmoid") == ((True, "tanh"), (True, "sigmoid"))
    assert advm.parse_arch("tanh,sigmoid") == ((False, "tanh"), (False, "sigmoid"))
    for bad in ("relu,sigmoid", "norm-tanh", "x-tanh,sigmoid"):
        with pytest.raises(ValueError):
            advm.parse_arch(bad)


def _synthetic(seed=0, n_users=500, n_items=200):
    rng = np.random.default_rng(seed)
    pop = 1.0 / np.arange(1, n_items + 1) ** 0.8
    p = np.clip(0.15 * pop / pop.mean(), 0, 1)
    D = (rng.random((n_users, n_items)) < p[None, :]).astype(float)
    return sp.csr_matrix(D)


def test_posit_invariants_over_five_epochs():
    D = _synthetic()
    cfg = PositConfig(ease_cfg=TrainConfig(lr=2.0, epochs=5, batch_size=64, seed=3), k=20)
    seen = {"n": 0}

    def check(trainer, info):
        W = trainer.model.W
        assert np.all(np.diag(W) == 0.0)
        w = info["weights"]
        assert abs(w.sum() - w.size) <= 1e-6 * w.size
        assert np.all((0 <= info["S"]) & (info["S"] <= 1))
        assert np.all((0 <= trainer.state.ema) & (trainer.state.ema <= 1))
        seen["n"] += 1

    res = advm.train_posit(D, None, cfg, hooks=[check])
    assert seen["n"] == 5 * int(np.ceil(500 / 64))
    assert len(res.history) == 5
    assert {"epoch", "loss", "objective", "val"} <= set(res.history[0])


def test_frozen_adversary_reproduces_ease_sgd():
    D = _synthetic(1)
    tc = TrainConfig(lr=2.0, epochs=5, batch_size=64, seed=11)
    trainer = PositTrainer(D, PositConfig(ease_cfg=tc, adv_lr=0.0))
    ref = EaseModel.zeros(D.shape[1], trainer.model.lam)
    plain = EaseTrainer(ref, tc)
    seen = []
    trainer.hooks.append(lambda t, info: seen.append(info["weights"]))
    for epoch in range(5):
        batches = trainer.learner.batches(D.shape[0])
        ref_batches = plain.batches(D.shape[0])
        for b, (idx, ref_idx) in enumerate(zip(batches, ref_batches)):
            np.testing.assert_array_equal(idx, ref_idx)
            trainer.batch_step(idx, b)
            plain.step(D[ref_idx], np.ones(D.shape[1]))
            np.testing.assert_array_equal(trainer.model.W, ref.W)
        trainer.learner.end_epoch()
        plain.end_epoch()
    assert all(np.array_equal(w, np.ones(D.shape[1])) for w in seen)


def test_posit_aborts_after_three_nan_batches():
    D = _synthetic(2, n_users=200, n_items=40)
    cfg = PositConfig(ease_cfg=TrainConfig(lr=1e30, epochs=3, batch_size=16), lam=0.0)
    with pytest.raises(DivergenceError):
        advm.train_posit(D, None, cfg)
