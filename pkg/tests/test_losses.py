import math

import numpy as np
import pytest

from c3dg import numcore as nc
from c3dg.cribnet import CribModel, TrainConfig, class_context
from c3dg.losses import (entropy_of_logits, kl_gauss, loss_cls, loss_recon, loss_rev, loss_supp,
                         loss_total)
from c3dg.numcore import ContractError, ShapeError, Tape
from c3dg.trainpipe import total_loss_grad_check


def jittered(B=6, C=2, D=2, mode="crib", seed=0):
    m = CribModel(B, C, D, mode=mode, seed=seed, conv_channels=2)
    rng = np.random.default_rng(seed + 100)
    for k, p in m.params.items():
        if k.endswith(".b"):
            p.value = rng.uniform(-0.2, 0.2, p.value.shape)
    return m


# KL ---------------------------------------------------------------------------

def test_kl_zero():
    assert float(kl_gauss(np.zeros(3), np.zeros(3)).value) == 0.0


def test_kl_hand():
    assert float(kl_gauss([1.0, 0.0], [0.0, 0.0]).value) == 0.5


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        kl_gauss(np.zeros(2), np.zeros(3))


def test_kl_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(10):
        mu, lv = rng.uniform(-1, 1, 3), rng.uniform(-1, 1, 3)
        z = mu + np.exp(lv / 2) * rng.standard_normal((100_000, 3))
        logq = -0.5 * np.sum(lv + (z - mu) ** 2 / np.exp(lv), axis=1)
        logp = -0.5 * np.sum(z ** 2, axis=1)
        mc = np.mean(logq - logp)
        assert mc == pytest.approx(float(kl_gauss(mu, lv).value), rel=0.01, abs=2e-3)


def test_kl_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(50):
        assert float(kl_gauss(rng.normal(0, 3, 5), rng.normal(0, 3, 5)).value) >= 0


# L_supp ------------------------------------------------------------------------

def _zero_head(m):
    for k in ("dhead.l1.W", "dhead.l2.W", "dhead.l1.b", "dhead.l2.b"):
        m.p(k).value[:] = 0


def test_supp_uniform_ln4():
    m = CribModel(6, 2, 4)
    _zero_head(m)
    assert float(loss_supp(m, np.ones((3, 4))).value) == pytest.approx(math.log(4), abs=1e-12)


def test_supp_one_hot_limit():
    assert float(np.sum(entropy_of_logits(np.array([[800.0, 0, 0, 0]])).value)) == pytest.approx(0, abs=1e-12)


def test_supp_ignores_z_s():
    m = CribModel(6, 2, 4, mode="crib")
    X = np.random.default_rng(0).uniform(0, 1, (5, 6))
    lat = m.latents(X, np.array([1, 2, 1, 2, 1]))
    a = loss_supp(m, lat["z_d"]).value
    m.p("branch0.fwd.l2.b").value += 3.0
    lat2 = m.latents(X, np.array([1, 2, 1, 2, 1]))
    assert not np.array_equal(lat["z_s"].value, lat2["z_s"].value)
    assert loss_supp(m, lat2["z_d"]).value.tobytes() == a.tobytes()


def test_supp_descends():
    m = jittered(D=4)
    z = np.random.default_rng(3).standard_normal((6, 4))
    params = m.group("dhead.")
    with Tape() as tape:
        before = loss_supp(m, z)
    tape.backward(before)
    for p in params:
        p.value = p.value - 1e-3 * p.grad
    assert float(loss_supp(m, z).value) < float(before.value)


# L_rev -----------------------------------------------------------------------------

def _linear_branch(m, c, fwd, inv):
    # l1 = [A; -A] so that l2 = [I, -I] recovers A x through the ReLU
    for name, A in (("fwd", fwd), ("inv", inv)):
        m.p(f"branch{c}.{name}.l1.W").value = np.zeros((16, 4))
        m.p(f"branch{c}.{name}.l1.W").value[:4] = A
        m.p(f"branch{c}.{name}.l1.W").value[4:8] = -A
        m.p(f"branch{c}.{name}.l1.b").value[:] = 0
        W2 = np.zeros((4, 16))
        W2[:, :4], W2[:, 4:8] = np.eye(4), -np.eye(4)
        m.p(f"branch{c}.{name}.l2.W").value = W2
        m.p(f"branch{c}.{name}.l2.b").value[:] = 0


def test_rev_mutual_inverse_zero():
    m = CribModel(6, 2, 4)
    A = np.array([[2.0, 1, 0, 0], [0, 1, 0, 0], [0, 0, 3, 0], [1, 0, 0, 1]])
    _linear_branch(m, 0, A, np.linalg.inv(A))
    z = np.random.default_rng(0).standard_normal((5, 4))
    assert float(loss_rev(m, z, np.ones(5, dtype=int)).value) == pytest.approx(0, abs=1e-24)


def test_rev_identity_and_double():
    m = CribModel(6, 2, 4)
    _linear_branch(m, 1, np.eye(4), 2 * np.eye(4))
    z = np.random.default_rng(1).standard_normal((5, 4))
    got = float(loss_rev(m, z, np.full(5, 2)).value)
    assert got == pytest.approx(float(np.sum(z ** 2)), rel=1e-12)


def test_rev_nonnegative():
    m = CribModel(6, 3, 4)
    z = np.random.default_rng(2).standard_normal((9, 4))
    assert float(loss_rev(m, z, np.arange(9) % 3 + 1).value) >= 0


# L_recon ------------------------------------------------------------------------------

def test_recon_all_terms_vanish():
    m = CribModel(6, 2, 2)
    X = np.tile(np.linspace(0, 1, 6), (2, 1))
    for k in ("dec0.l1.W", "dec0.l2.W"):
        m.p(k).value[:] = 0
    m.p("dec0.l2.b").value[:] = X[0]
    m.p("dhead.l1.W").value[:] = 0
    m.p("dhead.l2.W").value[:] = 0
    m.p("dhead.l2.b").value[:] = [1000.0, 0.0]
    zeros = nc.DiffArray(np.zeros((2, 4)))
    lat = dict(mu=np.zeros((2, 8)), logvar=np.zeros((2, 8)), z_d=zeros, z_m=zeros, z_s=zeros,
               decoder=np.zeros(2, dtype=int))
    total, kl, supp = loss_recon(m, X, np.array([1, 1]), lat, beta=1.0)
    assert float(total.value) == pytest.approx(0, abs=1e-12)


def test_recon_beta_zero_drops_kl():
    m = CribModel(6, 2, 2)
    X = np.random.default_rng(0).uniform(0, 1, (3, 6))
    lat = m.latents(X, np.array([1, 2, 1]))
    t0, kl, _ = loss_recon(m, X, np.array([1, 2, 1]), lat, beta=0.0)
    t1, _, _ = loss_recon(m, X, np.array([1, 2, 1]), lat, beta=0.5)
    assert float(t1.value) - float(t0.value) == pytest.approx(0.5 * float(kl.value), rel=1e-12)


def test_recon_needs_domains():
    m = CribModel(6, 2, 2)
    X = np.zeros((1, 6))
    with pytest.raises(ContractError):
        loss_recon(m, X, None, m.latents(X, [1]))


def test_recon_gradient_three_samples():
    m = jittered()
    X = np.random.default_rng(4).uniform(-2, 2, (3, 6))
    y, d = np.array([1, 2, 1]), np.array([2, 1, 1])
    names = [k for k in m.params if not k.startswith(("bb.", "pse."))]
    cfg = TrainConfig(lambda2=0.0)
    m0 = m

    def only_recon(*arrays):
        saved = {k: m0.params[k] for k in names}
        for k, a in zip(names, arrays):
            m0.params[k] = a
        try:
            lat = m0.latents(X, y, np.random.default_rng(9))
            return loss_recon(m0, X, d, lat, cfg.beta)[0]
        finally:
            m0.params.update(saved)

    rep = nc.grad_check(only_recon, [m.params[k].value for k in names], tol=1e-5, max_coords=6)
    assert not rep.skipped and rep.passed, rep


# L_cls ---------------------------------------------------------------------------------

def _uniform_heads(m):
    for k in ("bb.fc2.W", "bb.fc2.b", "pse.l3.W", "pse.l3.b"):
        m.p(k).value[:] = 0


def test_cls_uniform_value():
    m = CribModel(6, 2, 2, mode="erm")
    _uniform_heads(m)
    X = np.random.default_rng(0).uniform(0, 1, (5, 6))
    y = np.array([1, 2, 2, 1, 1])
    for gamma in (0.0, 1.0, 2.5):
        got = float(loss_cls(m, X, y, None, gamma).value)
        assert got == pytest.approx((1 + gamma) * 5 * math.log(2), rel=1e-12)


def test_cls_gamma_zero_is_backbone_only():
    m = CribModel(6, 2, 2)
    X = np.random.default_rng(1).uniform(0, 1, (4, 6))
    y = np.array([1, 2, 2, 1])
    ctx = class_context(np.ones((4, 4)), y, 2, 6)
    direct = nc.sum(nc.softmax_cross_entropy(m.revise_and_classify(X, ctx), y - 1)).value
    assert loss_cls(m, X, y, ctx, 0.0).value.tobytes() == direct.tobytes()


# total -------------------------------------------------------------------------------------

def test_total_lambdas_zero():
    total, parts = loss_total(2.0, 5.0, 7.0, 0.0, 0.0)
    assert float(total.value) == 2.0 and parts.total == 2.0


def test_total_linear_in_lambda1():
    a, _ = loss_total(1.0, 3.0, 0.0, 0.1, 0.0)
    b, _ = loss_total(1.0, 3.0, 0.0, 0.2, 0.0)
    assert float(b.value) - 1.0 == pytest.approx(2 * (float(a.value) - 1.0), rel=1e-15)


def test_total_defaults():
    total, _ = loss_total(1.0, 1.0, 1.0)
    assert float(total.value) == pytest.approx(1.2)


@pytest.mark.parametrize("bad", ["l_cls", "l_recon", "l_rev", "l_supp", "kl"])
def test_total_nan_names_part(bad):
    parts = dict(l_cls=1.0, l_recon=1.0, l_rev=1.0, l_supp=0.5, kl=0.5)
    parts[bad] = float("nan")
    with pytest.raises(ContractError, match=bad):
        loss_total(parts["l_cls"], parts["l_recon"], parts["l_rev"], l_supp=parts["l_supp"], kl=parts["kl"])


def test_terms_nonnegative_and_deterministic():
    from c3dg.trainpipe import batch_loss

    m = CribModel(6, 2, 2)
    X = np.random.default_rng(5).uniform(0, 1, (6, 6))
    y, d = np.array([1, 2] * 3), np.array([1, 1, 1, 2, 2, 2])
    _, a, _ = batch_loss(m, X, y, d, TrainConfig(), np.random.default_rng(0))
    _, b, _ = batch_loss(m, X, y, d, TrainConfig(), np.random.default_rng(0))
    assert a == b
    assert all(v >= 0 for v in a.as_dict().values())


@pytest.mark.parametrize("mode", ["erm", "light1", "vae1", "vaeC", "crib"])
def test_end_to_end_gradient(mode):
    for seed in range(2):
        m = jittered(mode=mode, seed=seed)
        rng = np.random.default_rng(seed)
        X = rng.uniform(-2, 2, (4, 6))
        rep = total_loss_grad_check(m, X, rng.integers(1, 3, 4), rng.integers(1, 3, 4),
                                    TrainConfig(context_mode=mode), seed=seed)
        assert rep.skipped or rep.max_rel_error <= 1e-4, rep
