"""Nested-MCMC ground truth for the semi-modular posterior family.

The outer stage runs random-walk Metropolis chains on the power posterior of
the shared and auxiliary blocks; for each retained outer draw an inner chain
targets the analysis-stage conditional of the analysis block given the
imputed shared values.  All walking happens on the unconstrained scale
through the same domain maps the flows use, which avoids boundary-rejection
pathologies; proposal scales are tuned during burn-in toward a target
acceptance rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .flows import apply_domain_maps, invert_domain_maps
from .autodiff import value_of


class McmcError(RuntimeError):
    pass


@dataclass
class ChainConfig:
    """Chain sizes and proposal settings.

    Defaults were sized by the effective-sample-size suite, not taken from
    any reported configuration.  `chains` independent outer chains run
    vectorised; retained draws pool across chains after burn-in/thinning.
    """

    outer_steps: int = 40_000
    burn_in: int = 10_000
    thin: int = 20
    inner_steps: int = 100
    inner_first_steps: int = 500
    chains: int = 4
    seed: int = 0
    target_accept: float = 0.3
    adapt_interval: int = 100
    init_scale: float = 0.5
    scale_phi: float = 1.0
    scale_theta: float = 1.0
    abort_window: int = 2_000

    def validate(self):
        if not (self.outer_steps > self.burn_in >= 0):
            raise ValueError("need outer_steps > burn_in >= 0")
        if self.thin < 1 or self.inner_steps < 1 or self.chains < 1:
            raise ValueError("thin, inner_steps and chains must be positive")
        if self.init_scale <= 0 or self.scale_phi <= 0 or self.scale_theta <= 0:
            raise ValueError("proposal scales must be positive")


def accept_probability(log_ratio):
    """Metropolis acceptance probability for a symmetric proposal."""
    return np.exp(np.minimum(np.asarray(log_ratio, dtype=np.float64), 0.0))


def _metropolis_sweep(logpost, u, lp, scales, rng, block=None):
    """One vectorised random-walk update across chains (rows of u).

    With `block` (an index slice) only those coordinates move; the proposal
    stays symmetric so the plain Metropolis ratio applies.
    """
    z = rng.standard_normal(u.shape)
    if block is not None:
        step = np.zeros_like(u)
        step[:, block] = (scales * z)[:, block]
    else:
        step = scales * z
    prop = u + step
    lp_prop = logpost(prop)
    logr = lp_prop - lp
    accept = np.log(rng.uniform(size=u.shape[0])) < logr
    u = np.where(accept[:, None], prop, u)
    lp = np.where(accept, lp_prop, lp)
    return u, lp, accept


@dataclass
class PowerChain:
    """Retained outer draws of (shared, auxiliary) blocks, pooled over chains."""

    phi: np.ndarray
    theta_tilde: np.ndarray
    chain_id: np.ndarray
    accept_rate: float
    eta: np.ndarray
    scales: np.ndarray

    def per_chain(self, x):
        return [x[self.chain_id == k] for k in np.unique(self.chain_id)]


def _power_logpost(model, data, eta, dims):
    p_phi = model.p_phi

    def logpost(u):
        phi, ld1 = apply_domain_maps(u[:, :p_phi], model.phi_domains)
        tth, ld2 = apply_domain_maps(u[:, p_phi:], model.theta_domains)
        lp = model.log_powered_joint(data, phi, tth, eta)
        return value_of(lp) + value_of(ld1).sum(-1) + value_of(ld2).sum(-1)

    return logpost


def sample_power_posterior(model, data, eta, config: ChainConfig):
    """Random-walk Metropolis targeting the power posterior.

    Returns retained draws after burn-in and thinning, the post-burn-in
    acceptance rate, and the tuned per-coordinate proposal scales.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    eta = np.asarray(eta, dtype=np.float64).ravel()
    d = model.p_phi + model.p_theta
    K = config.chains

    base = np.concatenate([
        np.full(model.p_phi, config.scale_phi),
        np.full(model.p_theta, config.scale_theta),
    ])
    blocks = [slice(0, model.p_phi), slice(model.p_phi, d)]
    block_dim = [model.p_phi, model.p_theta]
    # per-block global factors, tuned during burn-in to the target acceptance
    factors = [config.init_scale / math.sqrt(bd) for bd in block_dim]
    logpost = _power_logpost(model, data, eta, d)

    u = 0.1 * rng.standard_normal((K, d))
    lp = logpost(u)

    kept_phi, kept_tth, kept_chain = [], [], []
    accepted_post = 0
    steps_post = 0
    window_accepts = 0
    window_steps = 0
    interval_accepts = [0, 0]

    for step in range(config.outer_steps):
        n_acc = 0
        for b, block in enumerate(blocks):
            u, lp, accept = _metropolis_sweep(logpost, u, lp, factors[b] * base,
                                              rng, block=block)
            a = int(accept.sum())
            n_acc += a
            interval_accepts[b] += a
        window_accepts += n_acc
        window_steps += 2 * K
        if window_steps >= config.abort_window * K and window_accepts == 0:
            raise McmcError(
                "no proposals accepted over a long window; "
                "reduce the proposal scales (scale_phi/scale_theta/init_scale)")
        if window_steps >= config.abort_window * K:
            window_accepts, window_steps = 0, 0

        if step < config.burn_in:
            if (step + 1) % config.adapt_interval == 0:
                for b in range(2):
                    rate = interval_accepts[b] / (config.adapt_interval * K)
                    factors[b] *= math.exp(rate - config.target_accept)
                    interval_accepts[b] = 0
        else:
            accepted_post += n_acc
            steps_post += 2 * K
            if (step - config.burn_in) % config.thin == 0:
                phi, _ = apply_domain_maps(u[:, :model.p_phi], model.phi_domains)
                tth, _ = apply_domain_maps(u[:, model.p_phi:], model.theta_domains)
                kept_phi.append(np.asarray(phi))
                kept_tth.append(np.asarray(tth))
                kept_chain.append(np.arange(K))

    # interleave chains: index (draw, chain) -> rows grouped per draw
    phi = np.concatenate(kept_phi, axis=0)
    tth = np.concatenate(kept_tth, axis=0)
    chain_id = np.concatenate(kept_chain)
    scales = base.copy()
    scales[blocks[0]] *= factors[0]
    scales[blocks[1]] *= factors[1]
    return PowerChain(phi=phi, theta_tilde=tth, chain_id=chain_id,
                      accept_rate=accepted_post / max(steps_post, 1),
                      eta=eta, scales=scales)


@dataclass
class SmiSamples:
    """Joint draws approximating the semi-modular posterior."""

    phi: np.ndarray
    theta: np.ndarray
    theta_tilde: np.ndarray
    chain_id: np.ndarray
    eta: np.ndarray
    outer_accept_rate: float
    inner_accept_rate: float

    def stacked(self):
        return np.concatenate([self.phi, self.theta, self.theta_tilde], axis=1)

    def per_chain(self, x):
        return [x[self.chain_id == k] for k in np.unique(self.chain_id)]


def _analysis_logpost(model, data, phi_fixed):
    def logpost(u):
        theta, ld = apply_domain_maps(u, model.theta_domains)
        lp = model.log_analysis_conditional(data, theta, phi_fixed)
        return value_of(lp) + value_of(ld).sum(-1)

    return logpost


def nested_smi_sample(model, data, eta, config: ChainConfig):
    """Outer power-posterior chain plus inner analysis chains.

    Inner chains process each outer chain's retained draws in order,
    warm-starting from the previous inner state; the first draw per chain
    gets a longer run.  The output triples approximate the semi-modular
    posterior at the given influence vector.
    """
    power = sample_power_posterior(model, data, eta, config)
    rng = np.random.default_rng(np.random.default_rng(config.seed).integers(2 ** 63) + 1)

    K = config.chains
    n_kept = power.phi.shape[0]
    draws_per_chain = n_kept // K

    # retained draws are interleaved (draw-major); view per chain
    phi_c = power.phi.reshape(draws_per_chain, K, model.p_phi)
    tth_c = power.theta_tilde.reshape(draws_per_chain, K, model.p_theta)

    # pilot tuning of the inner proposal scale at the first imputation
    scale = config.init_scale / math.sqrt(model.p_theta)
    u = invert_domain_maps(np.clip(tth_c[0], *_safe_range(model.theta_domains)),
                           model.theta_domains)
    logpost = _analysis_logpost(model, data, phi_c[0])
    lp = logpost(u)
    interval = 50
    acc = 0
    for step in range(config.inner_first_steps):
        u, lp, a = _metropolis_sweep(logpost, u, lp, scale, rng)
        acc += int(a.sum())
        if (step + 1) % interval == 0:
            rate = acc / (interval * K)
            scale *= math.exp(rate - config.target_accept)
            acc = 0

    thetas = np.empty((draws_per_chain, K, model.p_theta))
    total_acc = 0
    total_steps = 0
    for t in range(draws_per_chain):
        logpost = _analysis_logpost(model, data, phi_c[t])
        lp = logpost(u)
        for _ in range(config.inner_steps):
            u, lp, a = _metropolis_sweep(logpost, u, lp, scale, rng)
            total_acc += int(a.sum())
            total_steps += K
        theta, _ = apply_domain_maps(u, model.theta_domains)
        thetas[t] = np.asarray(theta)

    return SmiSamples(
        phi=power.phi,
        theta=thetas.reshape(n_kept, model.p_theta),
        theta_tilde=power.theta_tilde,
        chain_id=power.chain_id,
        eta=power.eta,
        outer_accept_rate=power.accept_rate,
        inner_accept_rate=total_acc / max(total_steps, 1),
    )


def _safe_range(domains):
    lo = np.array([1e-9 if k != "unbounded" else -np.inf for k in domains])
    hi = np.array([1 - 1e-9 if k == "unit" else np.inf for k in domains])
    return lo, hi


def effective_sample_size(chain):
    """Autocorrelation-sum ESS per coordinate (Geyer initial monotone rule).

    `chain` is (n,) or (n, d) from a single chain; a constant coordinate
    returns 1 by convention.
    """
    x = np.asarray(chain, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 100:
        raise ValueError("need a chain of length >= 100")
    out = np.empty(x.shape[1])
    for j in range(x.shape[1]):
        v = x[:, j] - x[:, j].mean()
        var = np.dot(v, v) / n
        if var == 0.0:
            out[j] = 1.0
            continue
        # autocovariance via FFT
        m = 1 << (2 * n - 1).bit_length()
        f = np.fft.rfft(v, m)
        acov = np.fft.irfft(f * np.conj(f), m)[:n].real / n
        rho = acov / acov[0]
        # Geyer: sum consecutive pairs while positive, enforce monotone
        tau = 1.0
        prev_pair = np.inf
        k = 1
        while k + 1 < n:
            pair = rho[k] + rho[k + 1]
            if pair <= 0:
                break
            pair = min(pair, prev_pair)
            tau += 2.0 * pair
            prev_pair = pair
            k += 2
        out[j] = min(n, n / tau)
    return out


def samples_to_csv(samples: SmiSamples, model, path):
    """One row per retained draw: named coordinates plus the influence vector."""
    phi_names, theta_names = model.coordinate_names()
    header = phi_names + theta_names + [f"{n}_tilde" for n in theta_names] \
        + [f"eta_{c + 1}" for c in range(samples.eta.size)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        eta = list(samples.eta)
        for row in samples.stacked():
            writer.writerow([repr(float(v)) for v in row] + [repr(float(v)) for v in eta])
