import math

import numpy as np
import pytest
import torch
from scipy import integrate
from scipy.stats import norm

from oracles import dense_conv, dense_h0, rel_err
from spherecodec import layers as L
from spherecodec.healpix import build_grid
from spherecodec.model import (
    CheckpointError,
    ModelConfig,
    SphereCompressionModel,
    count_params,
    forward_model,
    load_checkpoint,
    load_config,
    save_checkpoint,
    unpool_param_count,
)
from spherecodec.rate import LAMBDAS, SIGMA_MIN, gaussian_likelihood, gaussian_rate_bits, quantize, rd_loss
from spherecodec.training import TrainingDivergedError, adam_step, train

torch.set_default_dtype(torch.float64)

TINY = dict(
    n=4,
    m=4,
    in_channels=1,
    encoder=("down:N", "rb", "down:M"),
    decoder=("up:N", "rb", "up:C"),
    hyper_encoder=("conv:N", "relu", "down:N"),
    hyper_decoder=("up:N", "relu", "conv:2M"),
)


def relu(a):
    return np.maximum(a, 0)


def np_block(block, x, table):
    """Residual block evaluated with dense matrices and numpy only."""
    n = x.shape[0]
    r, c, e = block.reduce, block.conv, block.expand
    h = (dense_h0(n, r.weight.detach().numpy()) @ x.reshape(-1)).reshape(n, -1) + r.bias.detach().numpy()
    h = relu(h)
    h = (dense_conv(table, c.weights[0].detach().numpy()) @ h.reshape(-1)).reshape(n, -1) + c.biases[0].detach().numpy()
    h = relu(h)
    h = (dense_h0(n, e.weight.detach().numpy()) @ h.reshape(-1)).reshape(n, -1) + e.bias.detach().numpy()
    return x + h


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


# ------------------------------------------------------------------ layers


def test_residual_block_identity_and_oracle():
    grid = build_grid(2)
    torch.manual_seed(0)
    block = L.ResidualBlock(6)
    x = torch.randn(48, 6)
    expected = np_block(block, x.numpy(), grid.neighbor_table)
    assert rel_err(block(x, grid)[0].detach(), expected) <= 1e-12

    zero_(block)
    xr = x.clone().requires_grad_(True)
    out, _ = block(xr, grid)
    assert torch.equal(out, x)
    jac = torch.autograd.functional.jacobian(lambda t: block(t, grid)[0], x)
    assert torch.equal(jac.reshape(288, 288), torch.eye(288))
    with pytest.raises(ValueError):
        L.ResidualBlock(5)


def test_attention_identities_and_oracle():
    grid = build_grid(2)
    table = grid.neighbor_table
    torch.manual_seed(1)
    att = L.Attention(4)
    x = torch.randn(48, 4)

    xn = x.numpy()
    a = xn
    for blk in att.trunk.blocks:
        a = np_block(blk, a, table)
    b = xn
    for blk in att.mask_branch.blocks:
        b = np_block(blk, b, table)
    gate = b @ att.gate.weight.detach().numpy() + att.gate.bias.detach().numpy()
    expected = xn + a * (1 / (1 + np.exp(-gate)))
    assert rel_err(att(x, grid)[0].detach(), expected) <= 1e-12

    zero_(att.gate)
    half = xn + 0.5 * a
    assert rel_err(att(x, grid)[0].detach(), half) <= 1e-12

    # trunk whose blocks all have zero final weights is the identity, so f1(x) = x
    for blk in att.trunk.blocks:
        zero_(blk.expand)
    assert rel_err(att(x, grid)[0].detach(), 1.5 * xn) <= 1e-12


def test_attention_zero_trunk_output():
    # additive identity when the trunk output itself vanishes
    grid = build_grid(2)
    att = L.Attention(4)
    x = torch.randn(48, 4)
    trunk_out = torch.zeros(48, 4)
    b, _ = att.mask_branch(x, grid)
    g, _ = att.gate(b, grid)
    assert torch.equal(x + trunk_out * torch.sigmoid(g), x)


def test_layer_frames_follow_resolution():
    grid = build_grid(4)
    x = torch.randn(2, 192, 3)
    down = L.SphereDown(3, 5, hops=2)
    y, f = down(x, grid)
    assert y.shape == (2, 48, 5) and f.n_side == 2
    for unpool in ("tconv", "shuffle"):
        up = L.SphereUp(5, 3, hops=2, unpool=unpool)
        z, f2 = up(y, f)
        assert z.shape == (2, 192, 3) and f2.n_side == 4
    with pytest.raises(ValueError):
        L.SphereUp(5, 3, unpool="nearest")
    with pytest.raises(ValueError):
        L.SphereConv(3, 3, hops=0)


# ------------------------------------------------------------- quantization


def test_quantize_examples():
    y = torch.tensor([2.4, -2.4, 1.0])
    assert quantize(y, "round").tolist() == [2.0, -2.0, 1.0]
    assert quantize(torch.tensor([1.0]), "round", torch.tensor([0.3])).item() == pytest.approx(1.3, abs=1e-15)
    big = torch.randn(10000)
    noisy = quantize(big, "noise", generator=torch.Generator().manual_seed(0))
    assert torch.all(torch.abs(noisy - big) < 0.5)
    assert abs(float((noisy - big).mean())) < 0.02
    with pytest.raises(ValueError):
        quantize(y, "floor")


def test_quantize_gradients_pass_through():
    y = torch.randn(20, requires_grad=True)
    for mode in ("noise", "round"):
        (g,) = torch.autograd.grad(quantize(y, mode).sum(), y)
        assert torch.equal(g, torch.ones(20))


# --------------------------------------------------------------------- rate


def test_rate_closed_form():
    bits = gaussian_rate_bits(torch.tensor([0.0]), 0.0, torch.tensor([0.5])).item()
    exact = -math.log2(norm.cdf(1) - norm.cdf(-1))
    assert bits == pytest.approx(exact, abs=1e-12)
    assert bits == pytest.approx(0.5513, abs=1e-3)


@pytest.mark.parametrize("mu,sigma,y", [(0.0, 3.0, 0.0), (0.4, 12.0, 2.0), (-1.2, 0.8, 1.0), (0.0, 60.0, -7.0)])
def test_rate_matches_quadrature(mu, sigma, y):
    mass, _ = integrate.quad(lambda t: norm.pdf(t, mu, sigma), y - 0.5, y + 0.5, epsabs=1e-14)
    bits = gaussian_rate_bits(torch.tensor([y]), torch.tensor([mu]), torch.tensor([sigma])).item()
    assert bits == pytest.approx(-math.log2(mass), rel=1e-9)


def test_rate_large_sigma_growth_and_monotonicity():
    s = torch.tensor([100.0])
    bits = gaussian_rate_bits(torch.tensor([0.0]), 0.0, s).item()
    assert bits == pytest.approx(math.log2(100 * math.sqrt(2 * math.pi)), abs=1e-4)
    offsets = torch.linspace(0, 4, 30)
    per = [gaussian_rate_bits(o[None], 0.0, torch.tensor([0.7])).item() for o in offsets]
    assert all(b > a for a, b in zip(per, per[1:]))


def test_rate_clamps_small_sigma():
    a = gaussian_likelihood(torch.tensor([0.3]), 0.0, torch.tensor([1e-4]))
    b = gaussian_likelihood(torch.tensor([0.3]), 0.0, torch.tensor([SIGMA_MIN]))
    assert torch.equal(a, b)


# ------------------------------------------------------------------ rd loss


def test_rd_loss_examples():
    x = torch.rand(2, 48, 3)
    assert rd_loss(x, x, torch.tensor(0.0), 0.01).total.item() == 0.0
    x_hat = x + 0.1
    a = rd_loss(x, x_hat, torch.tensor(96.0), 0.01)
    b = rd_loss(x, x_hat, torch.tensor(96.0), 0.02)
    assert a.rate.item() == 1.0
    assert (b.total - b.rate).item() == pytest.approx(2 * (a.total - a.rate).item(), rel=1e-15)
    assert a.distortion.item() == pytest.approx(0.01, rel=1e-12)
    lam = torch.tensor(0.01, requires_grad=True)
    total = a.rate + lam * a.distortion
    (g,) = torch.autograd.grad(total, lam)
    assert g.item() == a.distortion.item()
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            rd_loss(x, x, torch.tensor(0.0), bad)
    assert LAMBDAS == (0.0005, 0.0018, 0.0067, 0.0130, 0.025, 0.0483, 0.0932, 0.18)


# -------------------------------------------------------------------- model


def test_forward_shapes_and_finite_bits():
    cfg = ModelConfig(**TINY)
    torch.manual_seed(0)
    x = torch.rand(768, 1)
    for mode in ("noise", "round"):
        x_hat, bits, out = forward_model(x, cfg, mode=mode, generator=torch.Generator().manual_seed(0))
        assert x_hat.shape == x.shape
        assert torch.isfinite(bits) and bits.item() > 0
        assert out["mu"].shape == out["sigma"].shape == (48, 4)
        assert torch.all(out["sigma"] >= SIGMA_MIN)


def test_forward_rejects_small_resolution():
    model = SphereCompressionModel(ModelConfig(**TINY))
    with pytest.raises(ValueError):
        model(torch.rand(192, 1), build_grid(4))


def test_round_mode_matches_parallel_evaluation():
    torch.manual_seed(3)
    model = SphereCompressionModel(ModelConfig(**TINY)).eval()
    x = torch.rand(768, 1)
    out = model(x, build_grid(8), mode="round")
    mu, sigma = model.entropy_parameters(out["y_hat"].detach(), out["hyper"], out["frames"][0])
    assert torch.equal(mu, out["mu"])
    assert torch.equal(sigma, out["sigma"])


@pytest.mark.parametrize("n_side,exhaustive", [(2, True), (8, False)])
def test_context_model_causality(n_side, exhaustive):
    torch.manual_seed(5)
    model = SphereCompressionModel(ModelConfig(**TINY))
    grid = build_grid(n_side)
    n = grid.n_pix
    hyper = torch.randn(n, 8)
    y = torch.randn(n, 4)
    with torch.no_grad():
        mu0, s0 = model.entropy_parameters(y, hyper, grid)
        rows = range(n) if exhaustive else np.random.default_rng(0).choice(n, 40, replace=False)
        for i in rows:
            y2 = y.clone()
            y2[i:] += torch.randn(n - i, 4) * 50
            mu, s = model.entropy_parameters(y2, hyper, grid)
            assert torch.equal(mu[: i + 1], mu0[: i + 1])
            assert torch.equal(s[: i + 1], s0[: i + 1])


def test_aggregation_rejects_spatial_layers():
    with pytest.raises(ValueError):
        SphereCompressionModel(ModelConfig(**{**TINY, "aggregation": ("conv:2M:1",)}))


def test_config_validation_and_text_roundtrip(tmp_path):
    cfg = ModelConfig(n=8, m=12, unpool="shuffle", lmbda=0.025)
    again = ModelConfig.from_text(cfg.to_text())
    assert again == cfg and again.digest() == cfg.digest()
    path = tmp_path / "toy.cfg"
    path.write_text("# toy\nn = 8\nm = 12\nunpool = shuffle\nlmbda = 0.025\n")
    assert load_config(path) == cfg
    assert cfg.resolve("10M/3") == 40
    for bad in (dict(unpool="nearest"), dict(lmbda=0), dict(n=1), dict(down_mode="max")):
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    with pytest.raises(ValueError):
        ModelConfig.from_text("width = 3\n")
    with pytest.raises(ValueError):
        SphereCompressionModel(ModelConfig(**{**TINY, "decoder": ("up:N", "up:C", "up:C")}))


# ------------------------------------------------------------- param counts


def test_unpool_param_formula():
    assert unpool_param_count(128, 192, "tconv") == 221_376
    assert unpool_param_count(128, 192, "shuffle") == 885_504
    for l_in in (1, 3, 16, 128):
        for l_out in (1, 5, 48, 192):
            layer_t = L.SphereUp(l_in, l_out, hops=1, unpool="tconv")
            layer_s = L.SphereUp(l_in, l_out, hops=1, unpool="shuffle")
            t = sum(p.numel() for p in layer_t.parameters())
            s = sum(p.numel() for p in layer_s.parameters())
            assert t == (9 * l_in + 1) * l_out
            assert s == 4 * t


def test_count_params_tables():
    assert sum(p.numel() for p in L.Conv0(192, 192).parameters()) == 192 * 192 + 192
    base = dict(n=8, m=12)
    rows_t = count_params(ModelConfig(**base, unpool="tconv"))
    rows_s = count_params(ModelConfig(**base, unpool="shuffle"))
    assert [r[0] for r in rows_t] == [r[0] for r in rows_s]
    changed = 0
    for (name, kind_t, c_t), (_, kind_s, c_s) in zip(rows_t, rows_s):
        if kind_t == "tconv":
            assert kind_s == "shuffle" and c_s == 4 * c_t
            changed += 1
        else:
            assert c_s == c_t
    assert changed == 5
    model = SphereCompressionModel(ModelConfig(**base))
    assert sum(r[2] for r in rows_t) == sum(p.numel() for p in model.parameters())


# ------------------------------------------------------------------ optimizer


def test_adam_step_properties():
    p = [torch.randn(5), torch.randn(2, 3)]
    before = [t.clone() for t in p]
    state = {}
    adam_step(p, [torch.zeros(5), torch.zeros(2, 3)], state, lr=1e-3)
    assert all(torch.equal(a, b) for a, b in zip(p, before))

    p = [torch.randn(50)]
    start = p[0].clone()
    g = torch.randn(50)
    adam_step(p, [g], {}, lr=1e-3)
    delta = start - p[0]
    expected = 1e-3 * g / (g.abs() + 1e-8)
    assert torch.allclose(delta, expected, rtol=1e-12, atol=1e-18)
    assert torch.all(delta.abs() <= 1e-3)
    with pytest.raises(ValueError):
        adam_step([torch.zeros(3)], [torch.zeros(4)], {}, lr=1e-3)


def test_adam_determinism():
    def run():
        torch.manual_seed(0)
        p = [torch.randn(10)]
        state = {}
        for k in range(5):
            adam_step(p, [torch.sin(p[0] + k)], state, lr=1e-2)
        return p[0]

    assert torch.equal(run(), run())


# ------------------------------------------------------------------ training


def _tiny_images(n_images=2, n_side=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(n_images, 12 * n_side * n_side, 1))


def test_single_step_reduces_loss_on_toy_config():
    torch.manual_seed(0)
    model = SphereCompressionModel(ModelConfig()).float()
    grid = build_grid(64)
    from spherecodec.data import synthetic_field

    theta, phi = grid.centers()
    x = torch.from_numpy(synthetic_field(theta, phi, 0)).float()[None]
    params = list(model.parameters())

    def loss():
        out = model(x, grid, mode="noise", generator=torch.Generator().manual_seed(0))
        return rd_loss(x, out["x_hat"], out["bits"], 0.0067, scale=255.0**2).total

    first = loss()
    grads = torch.autograd.grad(first, params)
    adam_step(params, grads, {}, lr=1e-4)
    with torch.no_grad():
        second = loss()
    assert second.item() < first.item()


def test_training_sanity_and_reproducibility():
    images = _tiny_images(1)

    def run():
        torch.manual_seed(0)
        model = SphereCompressionModel(ModelConfig(**TINY))
        log = train(model, images, 0.01, 200, lr=1e-3, seed=0)
        return model, log

    m1, log1 = run()
    m2, log2 = run()
    ma = log1.smoothed(10)
    assert ma[-1] < ma[0]
    assert log1.loss == log2.loss
    assert m1.digest() == m2.digest()
    with pytest.raises(ValueError):
        train(m1, images, 0.0, 1)


def test_training_on_patches():
    torch.manual_seed(0)
    model = SphereCompressionModel(ModelConfig(**TINY))
    log = train(model, _tiny_images(3, n_side=16), 0.01, 5, batch_size=2, patch_depth=3, seed=1)
    assert len(log.loss) == 5 and all(np.isfinite(log.loss))


def test_training_divergence_restores_last_good():
    torch.manual_seed(0)
    model = SphereCompressionModel(ModelConfig(**TINY))
    before = model.digest()
    images = _tiny_images(1)
    images[0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train(model, images, 0.01, 3)
    assert info.value.step == 0
    assert model.digest() == before


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(2)
    model = SphereCompressionModel(ModelConfig(**TINY))
    path = tmp_path / "m.osck"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert loaded.digest() == model.double().digest()
    x = torch.rand(768, 1)
    a = model(x, build_grid(8), mode="round")["x_hat"]
    b = loaded(x, build_grid(8), mode="round")["x_hat"]
    assert torch.equal(a, b)

    data = path.read_bytes()
    (tmp_path / "bad.osck").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.osck")
    (tmp_path / "short.osck").write_bytes(data[:-9])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.osck")
