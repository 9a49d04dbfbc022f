import numpy as np
import pytest

from mapdiff import degrade as D
from mapdiff import kernels as K
from mapdiff import schedule as S
from mapdiff.mcformer import (
    GDFN,
    MCFormer,
    MCFormerConfig,
    MDTA,
    GaussianPriorDenoiser,
    Modulation,
    OracleDenoiser,
    count_parameters,
    modulate1,
    modulate2,
    sinusoidal_embedding,
)
from mapdiff.tensor import Tensor, ops
from mapdiff.tensor.gradcheck import check_gradients
from mapdiff.tensor.nn import layer_norm_channels

DEFAULT_PARAM_COUNT = 24_630_023


@pytest.fixture(scope="module")
def toy():
    return MCFormer(MCFormerConfig.toy(), seed=0)


def _inputs(seed=0, b=2, n=16, s=2):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, 3, n, n)), rng.uniform(size=(b, 3, n // s, n // s))


def _embeds(seed, b=2, e=16):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(b, e))), Tensor(rng.normal(size=(b, e)))


# ---- config ---------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        MCFormerConfig(levels=2, blocks_per_level=[1], channels_per_level=[8, 16], heads_per_level=[1, 2])
    with pytest.raises(ValueError):
        MCFormerConfig(levels=2, blocks_per_level=[1, 1], channels_per_level=[8, 16], heads_per_level=[3, 2])


def test_default_profile_doubles_channels():
    c = MCFormerConfig().channels_per_level
    assert all(b == 2 * a for a, b in zip(c, c[1:]))


@pytest.mark.parametrize("cfg", [MCFormerConfig.toy(), MCFormerConfig()])
def test_config_vector_round_trip(cfg):
    assert MCFormerConfig.from_vector(cfg.to_vector()) == cfg


def test_parameter_count_regression():
    cfg = MCFormerConfig()
    assert count_parameters(cfg) == DEFAULT_PARAM_COUNT
    assert MCFormer(cfg, seed=3).num_parameters() == DEFAULT_PARAM_COUNT


def test_closed_form_count_matches_instance(toy):
    assert toy.num_parameters() == count_parameters(toy.cfg)
    names = [n for n, _ in toy.named_parameters()]
    assert len(names) == len(set(names))


# ---- kernel estimator -------------------------------------------------------

def test_zero_head_gives_zero_code():
    m = MCFormer(MCFormerConfig.toy(), seed=1, zero_head=True)
    x, y = _inputs(1)
    out = m.evaluate(Tensor(x), 10, y)
    assert out.kernel_code.shape == (2, 10)
    np.testing.assert_array_equal(out.kernel_code.data, 0.0)


def test_lr_extent_mismatch(toy):
    x = np.zeros((1, 3, 16, 16))
    with pytest.raises(ValueError):
        toy.evaluate(Tensor(x), 1, np.zeros((1, 3, 5, 5)))
    with pytest.raises(ValueError):
        toy.evaluate(Tensor(x), 1, np.zeros((1, 3, 8, 4)))


# ---- modulation -------------------------------------------------------------

def _identity_mod(c=4, e=16, gamma=1.0):
    mod = Modulation(e, c, np.random.default_rng(0))
    mod.gamma.weight.data[:] = 0.0
    mod.gamma.bias.data[:] = gamma
    mod.tau.weight.data[:] = 0.0
    mod.tau.bias.data[:] = 0.0
    return mod


def test_modulate1_identity_is_layer_norm():
    F = Tensor(np.random.default_rng(0).normal(size=(2, 4, 5, 5)))
    te, ke = _embeds(1)
    out = modulate1(_identity_mod(), F, te, ke)
    np.testing.assert_array_equal(out.data, layer_norm_channels(F).data)


def test_modulate1_zero_gamma_gives_tau():
    mod = _identity_mod(gamma=0.0)
    mod.tau.bias.data[:] = [0.1, -0.2, 0.3, 0.4]
    F = Tensor(np.random.default_rng(0).normal(size=(2, 4, 3, 3)))
    out = modulate1(mod, F, *_embeds(2))
    np.testing.assert_array_equal(out.data, np.broadcast_to(mod.tau.bias.data[None, :, None, None], F.shape))


def test_modulation_channel_mismatch():
    mod = Modulation(16, 4, np.random.default_rng(0))
    with pytest.raises(ValueError):
        modulate1(mod, Tensor(np.zeros((2, 5, 3, 3))), *_embeds(0))


def test_modulate1_sensitive_to_kernel_embedding():
    mod = Modulation(16, 4, np.random.default_rng(3))
    F = Tensor(np.random.default_rng(4).normal(size=(2, 4, 3, 3)))
    te, ke = _embeds(5)
    ke2 = Tensor(ke.data + np.random.default_rng(6).normal(size=ke.shape))
    diff = np.abs(modulate1(mod, F, te, ke).data - modulate1(mod, F, te, ke2).data)
    assert diff.max() > 0


def test_modulate2_identity_and_linearity():
    F = Tensor(np.random.default_rng(0).normal(size=(2, 4, 3, 3)))
    np.testing.assert_array_equal(modulate2(_identity_mod(), F, *_embeds(1)).data, F.data)
    mod = Modulation(16, 4, np.random.default_rng(2))
    te, ke = _embeds(3)
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 2, 4, 3, 3))
    f = lambda z: modulate2(mod, Tensor(z), te, ke).data
    zero = f(np.zeros_like(a))
    np.testing.assert_allclose(f(2.0 * a - b) - zero, 2.0 * (f(a) - zero) - (f(b) - zero), atol=1e-12)


def test_modulation_gradient_reaches_both_embedding_mlps(toy):
    x, y = _inputs(2)
    toy.zero_grad()
    out = toy.evaluate(Tensor(x), np.array([3, 40]), y)
    ops.sum(ops.square(out.eps_hat)).backward()
    for mlp in (toy.time_mlp, toy.kernel_mlp):
        for p in mlp.parameters():
            assert p.grad is not None and np.any(p.grad.data != 0)
    toy.zero_grad()


# ---- MDTA ---------------------------------------------------------------

def test_mdta_shape_and_softmax_rows():
    att = MDTA(8, 2, np.random.default_rng(0))
    F = Tensor(np.random.default_rng(1).normal(size=(2, 8, 6, 5)))
    out = att(F)
    assert out.shape == F.shape
    assert att.last_attention.shape == (2, 2, 4, 4)
    np.testing.assert_allclose(att.last_attention.sum(-1), 1.0, atol=1e-6)


def test_mdta_divisibility():
    with pytest.raises(ValueError):
        MDTA(6, 4, np.random.default_rng(0))


@pytest.mark.parametrize("seed", range(3))
def test_mdta_spatial_permutation_equivariance(seed):
    att = MDTA(4, 2, np.random.default_rng(seed))
    att.qkv_dw.weight.data[:] = 0.0
    att.qkv_dw.weight.data[:, :, 1, 1] = 1.0
    att.qkv_dw.bias.data[:] = 0.0
    rng = np.random.default_rng(seed + 10)
    F = rng.normal(size=(1, 4, 5, 5))
    perm = rng.permutation(25)
    permute = lambda a: a.reshape(a.shape[0], a.shape[1], 25)[:, :, perm].reshape(a.shape)
    out = att(Tensor(F)).data
    out_p = att(Tensor(permute(F))).data
    np.testing.assert_allclose(out_p, permute(out), atol=1e-12)


# ---- GDFN ---------------------------------------------------------------

def test_gdfn_zero_input_zero_bias():
    g = GDFN(4, 2.66, np.random.default_rng(0))
    for conv in (g.proj_in, g.dw, g.proj_out):
        conv.bias.data[:] = 0.0
    out = g(Tensor(np.zeros((1, 4, 5, 5))))
    assert out.shape == (1, 4, 5, 5)
    np.testing.assert_array_equal(out.data, 0.0)


def test_gdfn_zero_input_bias_only():
    g = GDFN(4, 2.0, np.random.default_rng(1))
    out = g(Tensor(np.zeros((1, 4, 5, 5)))).data
    # a constant input yields a spatially constant output away from the zero-padded border
    np.testing.assert_allclose(out[..., 1:-1, 1:-1], out[..., 2:3, 2:3] * np.ones((1, 1, 3, 3)), atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_gdfn_finite_differences(seed):
    g = GDFN(1, 2.66, np.random.default_rng(seed))
    x = np.random.default_rng(seed + 100).normal(size=(1, 1, 4, 4))
    err = check_gradients(lambda t: ops.sum(ops.square(g(t))), [x])
    assert err < 1e-4


# ---- full network -------------------------------------------------------------

def test_forward_shapes_and_determinism(toy):
    x, y = _inputs(3)
    a = toy.evaluate(Tensor(x), np.array([1, 50]), y)
    b = toy.evaluate(Tensor(x), np.array([1, 50]), y)
    assert a.eps_hat.shape == x.shape
    assert a.kernel_code.shape == (2, toy.cfg.kernel_code_dim)
    assert a.eps_hat.data.tobytes() == b.eps_hat.data.tobytes()
    assert np.all(np.isfinite(a.eps_hat.data))
    # same seed, fresh instance: identical weights
    other = MCFormer(MCFormerConfig.toy(), seed=0)
    c = other.evaluate(Tensor(x), np.array([1, 50]), y)
    assert a.eps_hat.data.tobytes() == c.eps_hat.data.tobytes()


def test_rejects_indivisible_extent(toy):
    with pytest.raises(ValueError):
        toy.evaluate(Tensor(np.zeros((1, 3, 9, 9))), 1, np.zeros((1, 3, 9, 9)))


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient_finite_differences(toy, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 3, 8, 8))
    y = rng.uniform(size=(1, 3, 4, 4))
    f = lambda t: ops.sum(ops.square(toy.evaluate(t, 7, y).eps_hat))
    err = check_gradients(f, [x], max_coords=48, rng=rng)
    assert err < 1e-3


def test_no_dead_branches():
    m = MCFormer(MCFormerConfig.toy(), seed=5)
    x, y = _inputs(5, b=2)
    out = m.evaluate(Tensor(x), np.array([4, 33]), y)
    code_gt = np.random.default_rng(6).normal(size=out.kernel_code.shape)
    loss = ops.mean(ops.square(out.eps_hat - Tensor(np.random.default_rng(7).normal(size=x.shape)))) \
        + ops.mean(ops.abs(out.kernel_code - Tensor(code_gt)))
    loss.backward()
    dead = [n for n, p in m.named_parameters() if p.grad is None or not np.any(p.grad.data)]
    assert dead == []


def test_kernel_code_conditioning_is_live(toy):
    x, y = _inputs(8, b=1)
    t_emb_in = np.array([12])
    te = toy.time_mlp(Tensor(sinusoidal_embedding(t_emb_in, toy.cfg.time_embed_dim)))
    codes = np.random.default_rng(9).normal(size=(2, 1, 10))
    blk = toy.encoder[0][0]
    F = toy.in_proj(toy.condition(Tensor(x), y))
    outs = [blk(F, te, toy.kernel_mlp(Tensor(c))).data for c in codes]
    assert np.abs(outs[0] - outs[1]).max() > 1e-6


# ---- analytic denoisers ----------------------------------------------------

def test_oracle_denoiser_recovers_x0():
    sched = S.scaled_linear_schedule(50)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(size=(1, 3, 16, 16))
    oracle = OracleDenoiser(sched, x0, np.zeros(10))
    for t in (1, 25, 50):
        xt = S.q_sample(sched, x0, t, rng.normal(size=x0.shape))
        out = oracle.evaluate(Tensor(xt), t)
        np.testing.assert_allclose(S.predict_x0(sched, xt, t, out.eps_hat.data), x0, atol=1e-12)
        assert out.kernel_code.shape == (1, 10)


def test_oracle_fidelity_at_noise_floor():
    sched = S.scaled_linear_schedule(50)
    rng = np.random.default_rng(1)
    x0 = rng.uniform(size=(1, 3, 16, 16))
    k = K.make_isotropic(21, 1.5)
    y = D.blur_downsample(x0, k, 2)
    oracle = OracleDenoiser(sched, x0, np.zeros(10))
    xt = S.q_sample(sched, x0, 30, rng.normal(size=x0.shape))
    x0_hat = S.predict_x0(sched, xt, 30, oracle.evaluate(Tensor(xt), 30).eps_hat.data)
    assert D.fidelity(y, k, x0_hat, 2).item() < 1e-25


def test_gaussian_prior_denoiser_is_posterior_mean():
    # scalar Monte Carlo check of E[x0 | x_t] for a Gaussian prior
    sched = S.scaled_linear_schedule(50)
    t, mean, var = 20, 0.4, 0.09
    den = GaussianPriorDenoiser(sched, np.array(mean), var, np.zeros(10))
    rng = np.random.default_rng(2)
    x0 = mean + np.sqrt(var) * rng.standard_normal(200_000)
    xt = S.q_sample(sched, x0, t, rng.standard_normal(x0.shape))
    eps = den.evaluate(Tensor(xt.reshape(-1, 1)), t).eps_hat.data.ravel()
    x0_hat = S.predict_x0(sched, xt, t, eps)
    # the MMSE estimate is uncorrelated with its own error
    resid = x0 - x0_hat
    assert abs(np.mean(resid)) < 3 * resid.std() / np.sqrt(x0.size)
    assert abs(np.corrcoef(resid, xt)[0, 1]) < 0.01
