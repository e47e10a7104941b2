from __future__ import annotations

import numpy as np
import pytest

from src import diffcore as dc
from src.diffcore import Tensor
from src.exceptions import DimensionError, InsufficientDataError
from src.npflow import (FlowChain, NpEncoder, PlanarStage, context_inputs, flow_inverse, flow_log_density,
                        gaussian_kl, gaussian_log_density, latent_entropy, sample_base, total_log_det, transform)

KINDS = ["planar", "radial", "realnvp"]


def perturbed_chain(kind: str, T: int, d_z: int, seed: int, scale: float = 0.3) -> FlowChain:
    rng = np.random.default_rng(seed)
    chain = FlowChain(kind, T, d_z, rng)
    for p in chain.parameters().values():
        p.data += rng.normal(0.0, scale, size=p.shape)
    return chain


def log_abs_det_numeric(chain: FlowChain, z: np.ndarray, h: float = 1e-6) -> float:
    d = z.shape[0]
    J = np.zeros((d, d))
    with dc.no_grad():
        for j in range(d):
            step = np.zeros(d)
            step[j] = h
            plus, _ = chain(Tensor((z + step)[None, :]))
            minus, _ = chain(Tensor((z - step)[None, :]))
            J[:, j] = (plus.data[0] - minus.data[0]) / (2 * h)
    return float(np.linalg.slogdet(J)[1])


# ---- encoder -----------------------------------------------------------

def test_context_summary_is_permutation_invariant(rng):
    enc = NpEncoder(2, 3, rng)
    rows = rng.normal(size=(20, 5))
    reference = enc.encode_context(Tensor(rows)).data
    for _ in range(100):
        shuffled = enc.encode_context(Tensor(rows[rng.permutation(20)])).data
        assert np.allclose(shuffled, reference, atol=1e-12, rtol=0)


def test_context_summary_is_the_mean_of_pair_encodings(rng):
    enc = NpEncoder(2, 3, rng)
    rows = Tensor(rng.normal(size=(4, 5)))
    assert np.allclose(enc.encode_context(rows).data, enc.encode_rows(rows).data.mean(axis=0))


def test_invocations_count_encoded_pairs(rng):
    enc = NpEncoder(2, 3, rng)
    enc.encode_rows(Tensor(rng.normal(size=(4, 5))))
    enc.encode_context(Tensor(rng.normal(size=(3, 5))))
    assert enc.invocations == 7


def test_encoder_rejects_empty_and_misshaped_context(rng):
    enc = NpEncoder(2, 3, rng)
    with pytest.raises(InsufficientDataError):
        enc.encode_rows(Tensor(np.zeros((0, 5))))
    with pytest.raises(DimensionError):
        enc.encode_rows(Tensor(np.zeros((2, 4))))
    with pytest.raises(InsufficientDataError):
        context_inputs(Tensor(np.zeros((3, 2))), np.array([], dtype=int), np.array([], dtype=int), np.array([]))


def test_context_inputs_layout():
    reps = Tensor([[1.0, 2.0], [3.0, 4.0]])
    rows = context_inputs(reps, np.array([0, 1]), np.array([1, 1]), np.array([1, 0])).data
    assert rows.tolist() == [[1.0, 2.0, 3.0, 4.0, 1.0], [3.0, 4.0, 3.0, 4.0, 0.0]]


def test_zero_sigma_head_gives_midpoint_sigma(rng):
    enc = NpEncoder(2, 3, rng)
    enc.sigma_head.weight.data[...] = 0.0
    enc.sigma_head.bias.data[...] = 0.0
    _, sigma = enc.base_distribution(Tensor(rng.normal(size=3)))
    assert np.allclose(sigma.data, 0.55)


def test_zero_trunk_passes_head_bias_to_mu(rng):
    enc = NpEncoder(2, 3, rng)
    enc.trunk.weight.data[...] = 0.0
    enc.mu_head.bias.data[...] = [1.0, -2.0, 0.5]
    mu, sigma = enc.base_distribution(Tensor(rng.normal(size=3)))
    assert mu.data.tolist() == [1.0, -2.0, 0.5]
    assert np.all((sigma.data >= 0.1) & (sigma.data < 1.0))


# ---- base distribution -------------------------------------------------

def test_standard_normal_log_density_at_zero():
    value = gaussian_log_density(Tensor(np.zeros((1, 1))), Tensor([0.0]), Tensor([1.0])).item()
    assert value == pytest.approx(-0.9189385, abs=1e-7)


def test_sample_base_with_explicit_noise():
    z0, eps = sample_base(Tensor([1.0, -1.0]), Tensor([0.5, 2.0]), eps=np.array([[0.0, 0.0], [2.0, 1.0]]))
    assert z0.data.tolist() == [[1.0, -1.0], [2.0, 1.0]]
    assert eps.shape == (2, 2)
    with pytest.raises(ValueError):
        sample_base(Tensor([0.0]), Tensor([1.0]))


def test_closed_form_kl_matches_monte_carlo():
    mu_q, sigma_q = np.array([1.5, -1.0]), np.array([0.5, 0.4])
    exact = gaussian_kl(mu_q, sigma_q, np.zeros(2), np.ones(2))
    rng = np.random.default_rng(42)
    z = Tensor(mu_q + sigma_q * rng.standard_normal((100_000, 2)))
    with dc.no_grad():
        log_q = gaussian_log_density(z, Tensor(mu_q), Tensor(sigma_q)).data
        log_p = gaussian_log_density(z, Tensor(np.zeros(2)), Tensor(np.ones(2))).data
    assert np.mean(log_q - log_p) == pytest.approx(exact, rel=0.01)


# ---- flow stages -------------------------------------------------------

def test_planar_with_zero_u_is_identity(rng):
    chain = FlowChain("planar", 2, 3, rng)
    for stage in chain.stages:
        stage.u.data[...] = 0.0
    z = rng.normal(size=(4, 3))
    out, log_dets = chain(Tensor(z))
    assert np.allclose(out.data, z, atol=1e-12, rtol=0)
    assert np.allclose(total_log_det(log_dets, 4).data, 0.0, atol=1e-12)


def test_realnvp_starts_as_identity(rng):
    chain = FlowChain("realnvp", 3, 4, rng)
    z = rng.normal(size=(5, 4))
    out, log_dets = chain(Tensor(z))
    assert np.allclose(out.data, z, atol=1e-14, rtol=0)
    assert np.array_equal(total_log_det(log_dets, 5).data, np.zeros(5))


def test_realnvp_scale_bias_costs_one_nat(rng):
    chain = FlowChain("realnvp", 1, 2, rng)
    chain.stages[0].scale_net.output_layer.bias.data[...] = 1.0
    mu, sigma = Tensor(np.zeros(2)), Tensor(np.ones(2))
    z0 = Tensor(rng.normal(size=(3, 2)))
    with dc.no_grad():
        base = gaussian_log_density(z0, mu, sigma).data
        flowed = flow_log_density(chain, mu, sigma, z0).data
    assert np.allclose(base - flowed, 1.0)


def test_zero_stages_is_identity(rng):
    chain = FlowChain("radial", 0, 2, rng)
    z = rng.normal(size=(3, 2))
    out, log_dets = chain(Tensor(z))
    assert np.array_equal(out.data, z)
    assert log_dets == []
    assert np.array_equal(total_log_det(log_dets, 3).data, np.zeros(3))


def test_chain_argument_errors(rng):
    with pytest.raises(ValueError):
        FlowChain("glow", 1, 2, rng)
    with pytest.raises(DimensionError):
        FlowChain("planar", 1, 2, rng)(Tensor(np.zeros((1, 3))))


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("d_z", [2, 4, 6])
@pytest.mark.parametrize("T", [1, 3])
def test_log_det_matches_numeric_jacobian(kind, d_z, T):
    chain = perturbed_chain(kind, T, d_z, seed=10 * d_z + T)
    z = np.random.default_rng(d_z + T).normal(size=d_z)
    with dc.no_grad():
        _, log_dets = chain(Tensor(z[None, :]))
    assert total_log_det(log_dets, 1).item() == pytest.approx(log_abs_det_numeric(chain, z), abs=1e-6)


@pytest.mark.parametrize("kind", KINDS)
def test_inverse_round_trip(kind):
    chain = perturbed_chain(kind, 3, 4, seed=5)
    z = np.random.default_rng(6).normal(size=(8, 4))
    with dc.no_grad():
        y, _ = chain(Tensor(z))
    assert np.abs(flow_inverse(chain, y.data) - z).max() < 1e-8


@pytest.mark.parametrize("kind", KINDS)
def test_transformed_density_integrates_to_one(kind):
    chain = perturbed_chain(kind, 2, 2, seed=21, scale=0.2)
    mu, sigma = Tensor(np.zeros(2)), Tensor(np.full(2, 0.5))
    axis = np.arange(-6.0, 6.0 + 1e-9, 0.1)
    grid = np.array(np.meshgrid(axis, axis)).reshape(2, -1).T
    with dc.no_grad():
        log_q = flow_log_density(chain, mu, sigma, Tensor(flow_inverse(chain, grid))).data
    assert np.exp(log_q).sum() * 0.01 == pytest.approx(1.0, abs=0.02)


def test_planar_stays_invertible_under_adversarial_updates():
    rng = np.random.default_rng(8)
    stage = PlanarStage(3, rng)
    state = dc.AdamState(lr=0.05)
    params = stage.parameters()
    for _ in range(1000):
        dc.adam_step(params, state, grads={k: rng.normal(0.0, 5.0, size=p.shape) for k, p in params.items()})
        assert stage.invertibility_margin() >= -1.0 - 1e-9


# ---- densities and entropy ---------------------------------------------

def test_entropy_of_standard_normal():
    chain = FlowChain("planar", 0, 1, np.random.default_rng(0))
    h = latent_entropy(chain, Tensor([0.0]), Tensor([1.0]), n_samples=20_000, rng=np.random.default_rng(1))
    assert h == pytest.approx(1.4189, abs=0.02)


def test_entropy_grows_with_sigma():
    chain = perturbed_chain("planar", 2, 2, seed=3, scale=0.1)
    mu = Tensor(np.zeros(2))
    values = [latent_entropy(chain, mu, Tensor(np.full(2, s)), n_samples=512, rng=np.random.default_rng(9))
              for s in (0.2, 0.5, 0.9)]
    assert values[0] < values[1] < values[2]


def test_entropy_needs_samples(rng):
    with pytest.raises(ValueError):
        latent_entropy(FlowChain("planar", 1, 2, rng), Tensor(np.zeros(2)), Tensor(np.ones(2)), n_samples=0,
                       rng=rng)


def test_transform_keeps_density_terms(rng):
    chain = perturbed_chain("radial", 2, 3, seed=4)
    mu, sigma = Tensor(rng.normal(size=3)), Tensor(np.full(3, 0.7))
    with dc.no_grad():
        state = transform(chain, mu, sigma, rng, n_samples=5)
        direct = flow_log_density(chain, mu, sigma, state.z0).data
    assert state.z_T.shape == (5, 3)
    assert len(state.log_dets) == 2
    assert np.allclose(state.base_log_density.data - state.sum_log_det.data, direct)


@pytest.mark.parametrize("kind", KINDS)
def test_flow_gradients(kind):
    chain = perturbed_chain(kind, 2, 3, seed=17)
    rng = np.random.default_rng(18)
    mu = Tensor(rng.normal(size=3), requires_grad=True)
    sigma = Tensor(rng.uniform(0.3, 0.9, size=3), requires_grad=True)
    eps = rng.standard_normal((4, 3))
    weights = Tensor(rng.normal(size=(4, 3)))

    def fn():
        state = transform(chain, mu, sigma, eps=eps)
        return (state.z_T * weights).sum() + (state.base_log_density - state.sum_log_det).sum()

    params = {**chain.parameters(), "mu": mu, "sigma": sigma}
    assert dc.gradient_check(fn, params) < 1e-4
