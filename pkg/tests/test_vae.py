import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from querywatch.data import Dataset
from querywatch.numerics import Rng, ShapeError
from querywatch.vae import (
    GROUPS,
    LatentTargets,
    VaeConfig,
    build_reference,
    build_vae,
    encode_mu,
    kl_diag_gauss,
    latent_distance_and_grad,
    train_vardetect_vae,
    vae_loss,
    vae_loss_and_grads,
)

from .gradcheck import central_diff, max_rel_error


def _random_vae(g):
    d = int(g.integers(3, 9))
    L = int(g.integers(1, 5))
    hidden = tuple(int(h) for h in g.integers(2, 8, g.integers(1, 3)))
    cfg = VaeConfig(hidden=hidden, latent_dim=L, dropout=0.0)
    model = build_vae(d, cfg, Rng(int(g.integers(1 << 30))))
    for grp in GROUPS:
        for name in model.params[grp]:
            if name.endswith(".b"):
                model.params[grp][name] = g.normal(0.0, 0.3, model.params[grp][name].shape)
    targets = LatentTargets.default(L, offset=float(g.uniform(1, 5)), rho=float(g.uniform(0.1, 2)))
    return model, targets, d, L


def test_full_vae_loss_gradient_matches_finite_differences():
    g = np.random.default_rng(11)
    worst = 0.0
    for trial in range(50):
        model, targets, d, L = _random_vae(g)
        nc, no = int(g.integers(1, 5)), int(g.integers(1, 5))
        bc, bo = g.uniform(0, 1, (nc, d)), g.uniform(0, 1, (no, d))
        eps = g.normal(size=(nc + no, L))
        recon_o = bool(trial % 2)
        kw = dict(eps=eps, recon_on_outliers=recon_o)
        _, grads = vae_loss_and_grads(model, bc, bo, targets, **kw)
        for grp in GROUPS:
            f = lambda: vae_loss(model, bc, bo, targets, **kw)["total"]
            num = central_diff(f, model.params[grp], rng=g, max_entries=15)
            worst = max(worst, max_rel_error(grads[grp], num))
    assert worst < 1e-4


def test_kl_closed_form_against_monte_carlo():
    g = np.random.default_rng(3)
    mu1, s1 = np.array([0.3, -1.0]), np.array([0.7, 1.5])
    mu2, s2 = np.array([1.0, 0.0]), np.array([1.2, 0.9])
    z = mu1 + s1 * g.normal(size=(400_000, 2))

    def logpdf(z, m, s):
        return (-0.5 * ((z - m) / s) ** 2 - np.log(s) - 0.5 * np.log(2 * np.pi)).sum(1)

    mc = np.mean(logpdf(z, mu1, s1) - logpdf(z, mu2, s2))
    assert kl_diag_gauss(mu1, s1, mu2, s2) == pytest.approx(mc, abs=5e-3)


def test_kl_zero_iff_equal_and_rejects_bad_sigma():
    assert kl_diag_gauss([1, 2], [1, 3], [1, 2], [1, 3]) == 0.0
    assert kl_diag_gauss([1, 2], [1, 3], [1, 2.1], [1, 3]) > 0
    with pytest.raises(ValueError):
        kl_diag_gauss([0], [0], [0], [1])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=4),
    st.floats(0.1, 3), st.floats(0.1, 3), st.floats(-5, 5),
)
def test_kl_nonnegative(mu, s1, s2, shift):
    mu = np.array(mu)
    assert kl_diag_gauss(mu, s1, mu + shift, s2) >= -1e-12


def test_targets_must_differ():
    with pytest.raises(ValueError):
        LatentTargets(np.zeros(2), np.zeros(2), np.ones(2), np.ones(2))


def test_loss_needs_noise_source_and_nonempty_batches():
    g = np.random.default_rng(0)
    model, targets, d, L = _random_vae(g)
    with pytest.raises(ValueError):
        vae_loss(model, g.uniform(size=(2, d)), g.uniform(size=(2, d)), targets)
    with pytest.raises(ValueError):
        vae_loss(model, np.empty((0, d)), g.uniform(size=(2, d)), targets, eps=np.zeros((2, L)))


def test_recon_term_averages_over_both_batches():
    g = np.random.default_rng(1)
    model, targets, d, L = _random_vae(g)
    bc, bo = g.uniform(size=(2, d)), g.uniform(size=(3, d))
    eps = g.normal(size=(5, L))
    both = vae_loss(model, bc, bo, targets, eps=eps)["recon"]
    only_c = vae_loss(model, bc, bo, targets, eps=eps, recon_on_outliers=False)["recon"]
    z = model.encode(np.vstack([bc, bo]))
    zz = z[0] + np.exp(0.5 * z[1]) * eps
    err = ((model.decode(zz) - np.vstack([bc, bo])) ** 2).sum(1)
    assert both == pytest.approx(err.mean())
    assert only_c == pytest.approx(err[:2].mean())


def test_latent_distance_gradient():
    g = np.random.default_rng(4)
    model, targets, d, L = _random_vae(g)
    X = g.uniform(size=(3, d))
    dist, gx = latent_distance_and_grad(model, X, targets.mu_O)
    np.testing.assert_allclose(dist, np.linalg.norm(encode_mu(model, X) - targets.mu_O, axis=1))
    num = central_diff(lambda: latent_distance_and_grad(model, X, targets.mu_O)[0].sum(), {"x": X}, rng=g)
    assert max_rel_error({"x": gx}, num) < 1e-5


def test_encode_mu_shapes():
    g = np.random.default_rng(5)
    model, _, d, L = _random_vae(g)
    assert encode_mu(model, np.zeros(d)).shape == (L,)
    assert encode_mu(model, np.zeros((4, d))).shape == (4, L)
    with pytest.raises(ShapeError):
        encode_mu(model, np.zeros(d + 1))


def _toy_sets(g, n=120, d=8):
    C = Dataset(np.clip(0.5 + 0.05 * g.normal(size=(n, d)), 0, 1), np.zeros(n, int), 1)
    O = Dataset(g.uniform(size=(n, d)), np.zeros(n, int), 1)
    return C, O


def test_training_is_deterministic_and_stops_early():
    g = np.random.default_rng(6)
    C, O = _toy_sets(g)
    cfg = VaeConfig(hidden=(16,), latent_dim=4, epochs=400, window=5, tol=1e-2, seed=3)
    a = train_vardetect_vae(C, O, cfg=cfg)
    b = train_vardetect_vae(C, O, cfg=cfg)
    assert a.history == b.history
    assert len(a.history) < 400
    # stopping rule: best of the last window barely beat the best before it
    hist = a.history
    before, recent = min(hist[: -cfg.window]), min(hist[-cfg.window :])
    assert (before - recent) / abs(before) < cfg.tol


def test_training_separates_toy_sets_and_reference_is_frozen():
    g = np.random.default_rng(7)
    C, O = _toy_sets(g)
    cfg = VaeConfig(hidden=(32,), latent_dim=4, epochs=300, lr=3e-3, seed=1, tol=1e-6)
    targets = LatentTargets.default(4)
    model = train_vardetect_vae(C, O, targets, cfg)
    zc, zo = encode_mu(model, C.X), encode_mu(model, O.X)
    mid = 0.5 * (targets.mu_C + targets.mu_O)
    w = targets.mu_O - targets.mu_C
    assert np.mean((zc - mid) @ w < 0) > 0.9
    assert np.mean((zo - mid) @ w > 0) > 0.9
    ref = build_reference(model, C)
    assert ref.u.shape == (len(C), 4)
    with pytest.raises(ValueError):
        ref.u[0, 0] = 1.0
