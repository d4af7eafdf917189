import math

import numpy as np
import pytest
import torch

from latent_poison import attack as atk
from latent_poison import substrate
from latent_poison.attack import (
    TABLE2_GRID,
    AttackConfig,
    attack_apply,
    attack_train,
    bce_multilabel,
    build_networks,
    composite_loss,
    interpolate,
    make_target_softlabels,
    poison_latents,
    project_simplex,
    select_target,
    solve_widths,
)
from latent_poison.classifiers import build_classifier
from latent_poison.dataio import LabeledImageSet
from latent_poison.latentstats import ClassLatentStats
from latent_poison.vae import VaeConfig, build_vae


@pytest.fixture(scope="module")
def models():
    vae = build_vae(VaeConfig(seed=0)).eval()
    clf = build_classifier("lenet-small", seed=0).eval()
    for p in list(vae.parameters()) + list(clf.parameters()):
        p.requires_grad_(False)
    return vae, clf


@pytest.fixture(scope="module")
def stats():
    rng = np.random.default_rng(0)
    return ClassLatentStats(
        mu_z=rng.normal(size=(10, 10)), sigma_z=rng.random((10, 10)) + 0.1,
        mu_c=rng.dirichlet(np.ones(10), 10), sigma_c=rng.random((10, 10)) * 0.05,
        counts=np.full(10, 100),
    )


def _x(n=4, seed=0):
    return torch.rand(n, 28, 28, generator=torch.Generator().manual_seed(seed))


def test_select_target_examples():
    assert select_target([0.7, 0.2, 0.1]) == (0, 1)
    assert select_target([0.25] * 4) == (0, 1)
    assert select_target([0.5, 0.5]) == (0, 1)
    assert select_target([0.1, 0.3, 0.6]) == (2, 1)
    t1, t2 = select_target(torch.tensor([[0.1, 0.1, 0.8], [0.4, 0.4, 0.2]]))
    assert t1.tolist() == [2, 0] and t2.tolist() == [0, 1]


def test_target_softlabels():
    assert make_target_softlabels(0, 1, 3).tolist() == [1, 1, 0]
    t = make_target_softlabels(3, 7, 10)
    assert torch.nonzero(t).flatten().tolist() == [3, 7]
    assert float(t.sum()) == 2.0
    assert make_target_softlabels(0, 2, 3, mode="softmax").tolist() == [0.5, 0.0, 0.5]
    with pytest.raises(ValueError):
        make_target_softlabels(1, 1, 3)


@pytest.mark.parametrize("budget", [12_000, 29_000])
def test_networks_meet_budget(budget):
    nets = build_networks(AttackConfig(param_budget=budget), 10, 10, 10)
    assert abs(substrate.count_params(nets) - budget) <= 0.05 * budget


def test_solve_widths_monotone():
    assert solve_widths(12_000, 10, 10, 10)[0] < solve_widths(29_000, 10, 10, 10)[0]


@pytest.mark.parametrize("alpha,beta", TABLE2_GRID)
def test_table2_grid_accepted(alpha, beta):
    cfg = AttackConfig(lambda_org=alpha, lambda_noised=beta)
    assert cfg.lambda_org == alpha and cfg.lambda_noised == beta


@pytest.mark.parametrize("kw", [dict(lambda_org=1.5), dict(lambda_noised=-0.1), dict(lambda0=0, lambda1=0, lambda2=0),
                                dict(norm_choice="l1"), dict(lambda_noised="sometimes"), dict(eta_bound=0.0)])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        AttackConfig(**kw)


def test_learned_mode_parses():
    assert AttackConfig(lambda_noised="learned").learned
    assert AttackConfig(lambda_noised="0.8").lambda_noised == 0.8


def test_project_simplex():
    c = torch.tensor([[0.2, -0.1, 0.6], [-1.0, -2.0, 0.0], [1.0, 1.0, 2.0]])
    p = project_simplex(c)
    assert torch.allclose(p[0], torch.tensor([0.25, 0.0, 0.75]))
    assert torch.allclose(p[1], torch.full((3,), 1 / 3))
    assert torch.allclose(p.sum(1), torch.ones(3))
    assert (p >= 0).all()


def test_poison_identity_end(stats):
    z = torch.randn(3, 10)
    c = torch.softmax(torch.randn(3, 10), 1)
    nets = build_networks(AttackConfig(), 10, 10, 10)
    out = poison_latents(z, c, stats, torch.tensor([1, 2, 3]), nets, AttackConfig(lambda_org=1.0, lambda_noised=0.0))
    assert torch.equal(out.code.z, z)
    assert torch.allclose(out.code.c, c, atol=1e-7)


def test_poison_pure_target_mean(stats):
    z = torch.randn(2, 10)
    c = torch.softmax(torch.randn(2, 10), 1)
    cfg = AttackConfig(lambda_org=0.0, lambda_noised=1.0)
    eta = (torch.zeros(2, 10), torch.zeros(2, 10))
    out = poison_latents(z, c, stats, torch.tensor([4, 9]), None, cfg, eta=eta)
    assert torch.allclose(out.code.z, torch.as_tensor(stats.mu_z[[4, 9]], dtype=torch.float32))


@pytest.mark.parametrize("a", [0.0, 0.3, 1.0])
def test_mixing_linearity(stats, a):
    z = torch.randn(2, 10)
    c = torch.softmax(torch.randn(2, 10), 1)
    nets = build_networks(AttackConfig(), 10, 10, 10)
    out = poison_latents(z, c, stats, torch.tensor([0, 1]), nets, AttackConfig(lambda_org=a, lambda_noised=0.0))
    assert torch.equal(out.code.z, a * z)


@pytest.mark.parametrize("bound", [0.5, 3.0])
def test_eta_bound_respected(bound):
    nets = build_networks(AttackConfig(eta_bound=bound), 10, 10, 10)
    with torch.no_grad():
        for layer in nets.noise_learner:
            if isinstance(layer, torch.nn.Linear):
                layer.weight.mul_(50)
        eta_z, eta_c, _ = nets(torch.randn(64, 10), torch.softmax(torch.randn(64, 10), 1), torch.arange(64) % 10)
    assert eta_z.abs().max() <= bound and eta_c.abs().max() <= bound
    assert eta_z.abs().max() > 0.9 * bound


def test_eta_unbounded_option():
    nets = build_networks(AttackConfig(eta_bound=None), 10, 10, 10)
    with torch.no_grad():
        nets.noise_learner[2].bias.fill_(10.0)
        eta_z, _, _ = nets(torch.zeros(2, 10), torch.full((2, 10), 0.1), torch.tensor([0, 1]))
    assert torch.all(eta_z > 9.0)


def test_learned_coefficient_in_unit_interval(stats):
    cfg = AttackConfig(lambda_noised="learned")
    nets = build_networks(cfg, 10, 10, 10)
    out = poison_latents(torch.randn(5, 10), torch.softmax(torch.randn(5, 10), 1), stats, torch.arange(5), nets, cfg)
    assert ((out.lambda_noised > 0) & (out.lambda_noised < 1)).all()


def test_bce_examples():
    assert float(bce_multilabel(torch.tensor([0.5]), torch.tensor([1.0]))) == pytest.approx(math.log(2))
    perfect = bce_multilabel(torch.tensor([1.0, 0.0, 1.0]), torch.tensor([1.0, 0.0, 1.0]))
    assert float(perfect) == pytest.approx(0.0, abs=1e-5)
    p, t = torch.tensor([0.3, 0.6, 0.1]), torch.tensor([1.0, 1.0, 0.0])
    assert float(bce_multilabel(p, t, weights=2 * torch.ones(3))) == pytest.approx(2 * float(bce_multilabel(p, t)))


def test_composite_identity_and_reduction():
    x = _x(3)
    target = torch.zeros(3, 10)
    target[:, 0] = 1
    target[:, 1] = 1
    probs = torch.full((3, 10), 0.05)
    probs[:, :2] = 0.3
    t = composite_loss(x, x.clone(), probs, target, AttackConfig())
    assert float(t.l1) == 0.0
    assert float(t.l2) == pytest.approx(0.0, abs=1e-6)
    t2 = composite_loss(x, torch.rand(3, 28, 28), probs, target, AttackConfig(lambda1=0, lambda2=0))
    assert float(t2.total) == pytest.approx(float(t2.l0))
    t3 = composite_loss(x, 1 - x, probs, target, AttackConfig(norm_choice="linf"))
    assert float(t3.l1) >= float((x - (1 - x)).abs().amax(dim=(1, 2)).mean())


@pytest.mark.parametrize("norm,learned", [("l2", False), ("linf", False), ("l2", True)])
def test_composite_gradient_finite_differences(stats, norm, learned):
    cfg = AttackConfig(norm_choice=norm, lambda_noised="learned" if learned else 1.0, lambda_org=0.2, seed=3)
    vae = build_vae(VaeConfig(seed=1)).double().eval()
    clf = build_classifier("lenet-small", seed=1).double().eval()
    for p in list(vae.parameters()) + list(clf.parameters()):
        p.requires_grad_(False)
    nets = build_networks(cfg, 10, 10, 10).double()
    st = stats.torch(torch.float64)
    x = _x(4).double()

    def loss(_store):
        out = atk.attack_forward(nets, vae, clf, st, x, cfg)
        return composite_loss(x, out.x_adv, out.probs_adv, out.target, cfg).total

    store = substrate.ParamStore.from_module(nets)
    assert substrate.finite_diff_check(loss, store, probes=30, eps=1e-4, seed=1, atol=1e-6, kink_tol=1e-4) <= 1e-4


def test_attack_train_keeps_models_frozen(models, stats):
    vae, clf = models
    rng = np.random.default_rng(0)
    data = LabeledImageSet(rng.random((48, 28, 28), dtype=np.float32), rng.integers(0, 10, 48), "train")
    before = [p.clone() for p in list(vae.parameters()) + list(clf.parameters())]
    cfg = AttackConfig(epochs=2, batch_size=16, seed=0)
    nets_a, hist_a = attack_train(vae, clf, stats, data, cfg)
    nets_b, hist_b = attack_train(vae, clf, stats, data, cfg)
    after = list(vae.parameters()) + list(clf.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, after))
    assert hist_a == hist_b
    assert all(torch.equal(a, b) for a, b in zip(nets_a.parameters(), nets_b.parameters()))
    with pytest.raises(ValueError):
        attack_train(vae, clf, stats, LabeledImageSet(data.images, data.labels, "test"), cfg)


def test_attack_train_detects_unfrozen_mutation(models, stats, monkeypatch):
    vae, clf = models
    rng = np.random.default_rng(0)
    data = LabeledImageSet(rng.random((16, 28, 28), dtype=np.float32), rng.integers(0, 10, 16), "train")
    real_forward = atk.attack_forward

    def sneaky(*args, **kw):
        with torch.no_grad():
            next(vae.parameters()).add_(1e-3)
        return real_forward(*args, **kw)

    monkeypatch.setattr(atk, "attack_forward", sneaky)
    try:
        with pytest.raises(AssertionError):
            attack_train(vae, clf, stats, data, AttackConfig(epochs=1, batch_size=16))
    finally:
        with torch.no_grad():
            next(vae.parameters()).sub_(1e-3)


def test_attack_apply_identity_is_reconstruction(models, stats):
    vae, clf = models
    cfg = AttackConfig(lambda_org=1.0, lambda_noised=0.0)
    nets = build_networks(cfg, 10, 10, 10)
    x = _x(3)
    records, x_adv = attack_apply(nets, vae, clf, stats, x, [1, 2, 3], cfg,
                                  eta=(torch.zeros(3, 10), torch.zeros(3, 10)))
    assert torch.allclose(x_adv, vae.reconstruct(x), atol=1e-6)
    assert x_adv.min() >= 0 and x_adv.max() <= 1
    for r in records:
        assert 0 < r.ssim <= 1 and r.success is None
        r.set_test_predictions(r.original_label, (r.original_label + 1) % 10)
        assert r.success


def test_attack_apply_deterministic(models, stats):
    vae, clf = models
    cfg = AttackConfig()
    nets = build_networks(cfg, 10, 10, 10)
    a, xa = attack_apply(nets, vae, clf, stats, _x(2), [0, 1], cfg)
    b, xb = attack_apply(nets, vae, clf, stats, _x(2), [0, 1], cfg)
    assert torch.equal(xa, xb) and [r.to_json() for r in a] == [r.to_json() for r in b]


def test_interpolate_endpoints(models):
    vae, _ = models
    x1, x2 = _x(1, 1)[0], _x(1, 2)[0]
    assert torch.allclose(interpolate(vae, x1, x2, 1.0, 0.0), vae.reconstruct(x1[None])[0], atol=1e-6)
    assert torch.allclose(interpolate(vae, x1, x2, 0.0, 1.0), vae.reconstruct(x2[None])[0], atol=1e-6)
    mid = interpolate(vae, x1, x2, 0.5, 0.5)
    assert mid.shape == (28, 28) and mid.min() >= 0 and mid.max() <= 1


def test_optimize_single_runs(models, stats):
    vae, clf = models
    out = atk.optimize_single(vae, clf, stats, _x(2), AttackConfig(lambda_noised="learned"), steps=3)
    assert out.x_adv.shape == (2, 28, 28)


def test_network_checkpoint_round_trip(tmp_path):
    cfg = AttackConfig(lambda_org=0.3, lambda_noised=0.8, eta_bound=2.0)
    nets = build_networks(cfg, 10, 10, 10)
    atk.save_networks(nets, cfg, tmp_path / "a.ckpt")
    back, bcfg = atk.load_networks(tmp_path / "a.ckpt")
    assert bcfg == cfg and back.eta_bound == 2.0
    assert all(torch.equal(a, b) for a, b in zip(nets.parameters(), back.parameters()))


def test_image_codec_round_trip():
    img = np.random.default_rng(0).integers(0, 256, (28, 28)).astype(np.float32) / 255
    assert np.array_equal(atk.decode_image(atk._encode_image(img)), img)
