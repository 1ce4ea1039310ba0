"""Benchmark models: the HPV/cancer epidemiology model, the hierarchical
random-effects model with one cut per group, and a conjugate Gaussian toy
whose semi-modular posterior is available in closed form.

The toy is the workhorse verification oracle: its power posterior stays
jointly Gaussian for every influence value, so the library's samplers and
variational fits can be checked against exact moments.
"""

from __future__ import annotations

import importlib.resources
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import autodiff as ad
from .autodiff import value_of
from .models import DataBundle, DataError, ModularModel, UnsupportedOperation, load_table

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# conjugate Gaussian toy (likelihood cut)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConjugateGaussianToy(ModularModel):
    """Scalar two-module model, fully Gaussian and fully solvable.

    Z_i ~ N(phi, s_z^2), Y_j ~ N(phi + theta, s_y^2), independent normal
    priors on phi and theta.  theta_tilde shares theta's prior.
    """

    s_z: float = 1.0
    s_y: float = 1.0
    m_phi: float = 0.0
    v_phi: float = 1.0
    m_theta: float = 0.0
    v_theta: float = 1.0
    true_phi: float = 0.0
    true_theta: float = 1.0

    p_phi = 1
    p_theta = 1
    phi_domains = ("unbounded",)
    theta_domains = ("unbounded",)
    n_cuts = 1
    cut_kind = "likelihood"

    def simulate(self, rng, n_z=20, n_y=20):
        z = self.true_phi + self.s_z * rng.standard_normal(n_z)
        y = self.true_phi + self.true_theta + self.s_y * rng.standard_normal(n_y)
        return DataBundle(y={"y": y}, z={"z": z})

    # densities ---------------------------------------------------------------

    def log_lik_z(self, data, phi):
        if data.z is None or data.n_z == 0:
            return 0.0
        z = data.z["z"]
        phi0 = phi[..., 0] if ad.is_node(phi) else np.asarray(phi)[..., 0]
        terms = ad.normal_logpdf(z, ad.reshape(phi0, np.shape(value_of(phi0)) + (1,)),
                                 self.s_z ** 2)
        return ad.mul(data.z_scale, ad.vsum(terms, axis=-1))

    def log_lik_y(self, data, phi, theta):
        y = data.y["y"]
        phi0 = phi[..., 0] if ad.is_node(phi) else np.asarray(phi)[..., 0]
        th0 = theta[..., 0] if ad.is_node(theta) else np.asarray(theta)[..., 0]
        loc = ad.add(phi0, th0)
        terms = ad.normal_logpdf(y, ad.reshape(loc, np.shape(value_of(loc)) + (1,)),
                                 self.s_y ** 2)
        return ad.mul(data.y_scale, ad.vsum(terms, axis=-1))

    def log_prior_phi(self, phi):
        phi0 = phi[..., 0] if ad.is_node(phi) else np.asarray(phi)[..., 0]
        return ad.normal_logpdf(phi0, self.m_phi, self.v_phi)

    def log_prior_theta(self, phi, theta):
        th0 = theta[..., 0] if ad.is_node(theta) else np.asarray(theta)[..., 0]
        return ad.normal_logpdf(th0, self.m_theta, self.v_theta)

    def per_datum_loglik(self, data, phi, theta):
        phi0 = phi[..., :1] if ad.is_node(phi) else np.asarray(phi)[..., :1]
        th0 = theta[..., :1] if ad.is_node(theta) else np.asarray(theta)[..., :1]
        cols = []
        if data.z is not None and data.n_z:
            cols.append(ad.normal_logpdf(data.z["z"], phi0, self.s_z ** 2))
        cols.append(ad.normal_logpdf(data.y["y"], ad.add(phi0, th0), self.s_y ** 2))
        return ad.concat(cols, axis=-1) if len(cols) > 1 else cols[0]

    def simulate_replicates(self, rng, n_rep, data=None):
        n_z = data.n_z if data is not None else 1
        n_y = data.n_y if data is not None else 1
        z = self.true_phi + self.s_z * rng.standard_normal(n_rep * n_z)
        y = self.true_phi + self.true_theta + self.s_y * rng.standard_normal(n_rep * n_y)
        return DataBundle(y={"y": y}, z={"z": z}), n_rep

    def coordinate_names(self):
        return ["phi"], ["theta"]

    # closed forms -------------------------------------------------------------

    def power_moments(self, data, eta):
        """Exact Gaussian moments of the power posterior on (phi, ttheta)."""
        eta = float(np.asarray(eta).ravel()[0])
        z = np.asarray(data.z["z"]) if data.z is not None else np.zeros(0)
        y = np.asarray(data.y["y"])
        n, m = z.size, y.size
        lam = np.array([
            [1.0 / self.v_phi + n / self.s_z ** 2 + eta * m / self.s_y ** 2,
             eta * m / self.s_y ** 2],
            [eta * m / self.s_y ** 2,
             1.0 / self.v_theta + eta * m / self.s_y ** 2],
        ])
        b = np.array([
            self.m_phi / self.v_phi + z.sum() / self.s_z ** 2 + eta * y.sum() / self.s_y ** 2,
            self.m_theta / self.v_theta + eta * y.sum() / self.s_y ** 2,
        ])
        cov = np.linalg.inv(lam)
        return cov @ b, cov

    def analysis_coefficients(self, data):
        """theta | Y, phi ~ N(c + d*phi, v): returns (c, d, v)."""
        y = np.asarray(data.y["y"])
        m = y.size
        prec = 1.0 / self.v_theta + m / self.s_y ** 2
        c = (self.m_theta / self.v_theta + y.sum() / self.s_y ** 2) / prec
        d = -(m / self.s_y ** 2) / prec
        return c, d, 1.0 / prec

    def smi_moments(self, data, eta):
        """Exact mean (3,) and covariance (3,3) of the semi-modular posterior
        in the order (phi, theta, theta_tilde)."""
        mu_pow, cov_pow = self.power_moments(data, eta)
        c, d, v = self.analysis_coefficients(data)
        mean = np.array([mu_pow[0], c + d * mu_pow[0], mu_pow[1]])
        cov = np.zeros((3, 3))
        cov[0, 0] = cov_pow[0, 0]
        cov[2, 2] = cov_pow[1, 1]
        cov[0, 2] = cov[2, 0] = cov_pow[0, 1]
        cov[1, 1] = v + d * d * cov_pow[0, 0]
        cov[0, 1] = cov[1, 0] = d * cov_pow[0, 0]
        cov[1, 2] = cov[2, 1] = d * cov_pow[0, 1]
        return mean, cov

    def log_power_evidence(self, data, eta):
        """log of the powered-joint normalising constant over (phi, ttheta)."""
        eta = float(np.asarray(eta).ravel()[0])
        z = np.asarray(data.z["z"]) if data.z is not None else np.zeros(0)
        y = np.asarray(data.y["y"])
        n, m = z.size, y.size
        mu, cov = self.power_moments(data, eta)
        lam = np.linalg.inv(cov)
        b = lam @ mu
        c = (self.m_phi ** 2 / self.v_phi + self.m_theta ** 2 / self.v_theta
             + np.sum(z ** 2) / self.s_z ** 2 + eta * np.sum(y ** 2) / self.s_y ** 2)
        out = -0.5 * c + 0.5 * b @ cov @ b
        out += LOG_2PI - 0.5 * np.linalg.slogdet(lam)[1]
        out -= 0.5 * math.log(2.0 * math.pi * self.v_phi)
        out -= 0.5 * math.log(2.0 * math.pi * self.v_theta)
        out -= 0.5 * n * math.log(2.0 * math.pi * self.s_z ** 2)
        out -= 0.5 * eta * m * math.log(2.0 * math.pi * self.s_y ** 2)
        return float(out)

    def predictive_moments(self, mean2, cov2):
        """Gaussian predictive for a fresh (z', y') given (phi, theta) moments."""
        m = np.array([mean2[0], mean2[0] + mean2[1]])
        s = np.array([
            [cov2[0, 0] + self.s_z ** 2, cov2[0, 0] + cov2[0, 1]],
            [cov2[0, 0] + cov2[0, 1],
             cov2[0, 0] + 2 * cov2[0, 1] + cov2[1, 1] + self.s_y ** 2],
        ])
        return m, s


def gaussian_cross_entropy(mean_p, cov_p, mean_q, cov_q):
    """E_{x ~ N(mean_p, cov_p)}[log N(x; mean_q, cov_q)]."""
    mean_p = np.atleast_1d(np.asarray(mean_p, dtype=np.float64))
    mean_q = np.atleast_1d(np.asarray(mean_q, dtype=np.float64))
    cov_p = np.atleast_2d(np.asarray(cov_p, dtype=np.float64))
    cov_q = np.atleast_2d(np.asarray(cov_q, dtype=np.float64))
    k = mean_p.size
    inv_q = np.linalg.inv(cov_q)
    d = mean_p - mean_q
    out = -0.5 * (k * LOG_2PI + np.linalg.slogdet(cov_q)[1]
                  + np.trace(inv_q @ cov_p) + d @ inv_q @ d)
    return float(out)


# ---------------------------------------------------------------------------
# epidemiology model (likelihood cut)
# ---------------------------------------------------------------------------

def load_epidemiology_data(path=None):
    """Bundled 13-group HPV prevalence / cancer incidence table.

    Columns: group, Z (HPV-positive count), N (sample size), Y (cancer
    cases), T (woman-years of follow-up, in units of 100 000).  Values come
    from the prior epidemiology literature and are treated as external input;
    the loader validates Z_i <= N_i.
    """
    if path is None:
        path = importlib.resources.files("semimodular").joinpath("data/epidemiology.csv")
    table = load_table(path)
    z_block = {"Z": table["Z"], "N": table["N"]}
    y_block = {"Y": table["Y"], "T": table["T"]}
    if np.any(z_block["Z"] > z_block["N"]):
        raise DataError("HPV-positive count exceeds sample size in some group")
    if np.any(z_block["Z"] < 0) or np.any(y_block["Y"] < 0) or np.any(y_block["T"] <= 0):
        raise DataError("counts must be nonnegative and exposures positive")
    return DataBundle(y=y_block, z=z_block)


@dataclass(frozen=True)
class EpidemiologyModel(ModularModel):
    """Binomial HPV-prevalence module coupled to a Poisson incidence module.

    Z_i ~ Binomial(N_i, phi_i); Y_i ~ Poisson(mu_i) with
    mu_i = T_i * exp(theta1 + theta2 * phi_i).  Truncated normal priors with
    variance `prior_var`, normalised on the truncation domain so log-prior
    differences are exact.
    """

    n_groups: int = 13
    prior_var: float = 1000.0

    n_cuts = 1
    cut_kind = "likelihood"

    @property
    def p_phi(self):
        return self.n_groups

    @property
    def p_theta(self):
        return 2

    @property
    def phi_domains(self):
        return ("unit",) * self.n_groups

    @property
    def theta_domains(self):
        return ("positive", "positive")

    def log_lik_z(self, data, phi):
        Z, N = data.z["Z"], data.z["N"]
        const = float(np.sum(ad.gammaln(N + 1) - ad.gammaln(Z + 1) - ad.gammaln(N - Z + 1)))
        terms = ad.add(ad.mul(Z, ad.log(phi)), ad.mul(N - Z, ad.log(ad.sub(1.0, phi))))
        return ad.mul(data.z_scale, ad.add(ad.vsum(terms, axis=-1), const))

    def _log_mu(self, data, phi, theta):
        th1 = theta[..., :1] if ad.is_node(theta) else np.asarray(theta)[..., :1]
        th2 = theta[..., 1:2] if ad.is_node(theta) else np.asarray(theta)[..., 1:2]
        return ad.add(np.log(data.y["T"]), ad.add(th1, ad.mul(th2, phi)))

    def log_lik_y(self, data, phi, theta):
        Y = data.y["Y"]
        log_mu = self._log_mu(data, phi, theta)
        const = float(np.sum(-ad.gammaln(Y + 1)))
        terms = ad.sub(ad.mul(Y, log_mu), ad.exp(log_mu))
        return ad.mul(data.y_scale, ad.add(ad.vsum(terms, axis=-1), const))

    def log_prior_phi(self, phi):
        # N(0, prior_var) truncated to (0, 1), normalised
        sd = math.sqrt(self.prior_var)
        log_norm = math.log(norm.cdf(1.0 / sd) - 0.5)
        per = ad.sub(ad.mul(-0.5, ad.add(math.log(2 * math.pi * self.prior_var),
                                         ad.div(ad.mul(phi, phi), self.prior_var))),
                     log_norm)
        return ad.vsum(per, axis=-1)

    def log_prior_theta(self, phi, theta):
        # N(0, prior_var) truncated to (0, inf), normalised
        log_norm = math.log(0.5)
        per = ad.sub(ad.mul(-0.5, ad.add(math.log(2 * math.pi * self.prior_var),
                                         ad.div(ad.mul(theta, theta), self.prior_var))),
                     log_norm)
        return ad.vsum(per, axis=-1)

    def per_datum_loglik(self, data, phi, theta):
        """One datum per group: Binomial term plus Poisson term."""
        Z, N, Y = data.z["Z"], data.z["N"], data.y["Y"]
        binom_const = value_of(ad.gammaln(N + 1)) - value_of(ad.gammaln(Z + 1)) \
            - value_of(ad.gammaln(N - Z + 1))
        binom = ad.add(ad.add(ad.mul(Z, ad.log(phi)),
                              ad.mul(N - Z, ad.log(ad.sub(1.0, phi)))), binom_const)
        log_mu = self._log_mu(data, phi, theta)
        pois = ad.sub(ad.sub(ad.mul(Y, log_mu), ad.exp(log_mu)), value_of(ad.gammaln(Y + 1)))
        return ad.add(binom, pois)

    def coordinate_names(self):
        return [f"phi_{i + 1}" for i in range(self.n_groups)], ["theta1", "theta2"]


# ---------------------------------------------------------------------------
# random effects model (prior cut, one influence weight per group)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RandomEffectsModel(ModularModel):
    """Hierarchical Gaussian model with one potential cut per group.

    y_ij ~ N(beta_i, sigma_i^2); beta_i | tau ~ N(0, tau^2);
    p(sigma_i^2) proportional to sigma_i^-2; p(tau | sigma) proportional to
    1 / (tau^2 + mean_i(sigma_i^2 / n_i)).  The imputation stage swaps each
    group's beta prior for the modulated normal with variance ttau^2 / eta_i
    (flat at exactly eta_i = 0), keeping the tau-given-sigma factor.

    Shared block phi = sigma (N groups); analysis block theta = (beta, tau).
    """

    n_groups: int = 30
    n_reps: int = 5
    true_effects: tuple = field(default=None)
    true_scale: float = 1.0

    cut_kind = "prior"

    def __post_init__(self):
        if self.true_effects is None:
            eff = np.zeros(self.n_groups)
            eff[0] = 10.0
            if self.n_groups > 1:
                eff[1] = 5.0
            object.__setattr__(self, "true_effects", tuple(eff))

    @property
    def p_phi(self):
        return self.n_groups

    @property
    def p_theta(self):
        return self.n_groups + 1

    @property
    def phi_domains(self):
        return ("positive",) * self.n_groups

    @property
    def theta_domains(self):
        return ("unbounded",) * self.n_groups + ("positive",)

    @property
    def n_cuts(self):
        return self.n_groups

    # data ---------------------------------------------------------------------

    def simulate(self, rng):
        groups = np.repeat(np.arange(self.n_groups), self.n_reps)
        reps = np.tile(np.arange(self.n_reps), self.n_groups)
        y = np.asarray(self.true_effects)[groups] + self.true_scale * rng.standard_normal(groups.size)
        return DataBundle(y={"group": groups.astype(float), "replicate": reps.astype(float), "y": y})

    def simulate_replicates(self, rng, n_rep, data=None):
        groups = np.tile(np.repeat(np.arange(self.n_groups), self.n_reps), n_rep)
        y = np.asarray(self.true_effects)[groups] + self.true_scale * rng.standard_normal(groups.size)
        reps = np.tile(np.arange(self.n_reps * n_rep), self.n_groups)[:groups.size]
        return DataBundle(y={"group": groups.astype(float), "replicate": reps.astype(float), "y": y}), n_rep

    # densities ------------------------------------------------------------------

    def _split_theta(self, theta):
        beta = theta[..., :self.n_groups] if ad.is_node(theta) else np.asarray(theta)[..., :self.n_groups]
        tau = theta[..., self.n_groups:] if ad.is_node(theta) else np.asarray(theta)[..., self.n_groups:]
        return beta, tau

    def log_lik_y(self, data, phi, theta):
        groups = data.y["group"].astype(int)
        y = data.y["y"]
        beta, _ = self._split_theta(theta)
        sig = ad.take(phi, groups, axis=-1)
        b = ad.take(beta, groups, axis=-1)
        terms = ad.normal_logpdf(y, b, ad.mul(sig, sig))
        return ad.mul(data.y_scale, ad.vsum(terms, axis=-1))

    def log_prior_phi(self, phi):
        # p(sigma_i^2) ~ sigma_i^-2 expressed as a density in sigma_i
        return ad.neg(ad.vsum(ad.log(phi), axis=-1))

    def _log_tau_prior(self, phi, tau):
        sig_sq = ad.mul(phi, phi)
        cbar = ad.mean(ad.div(sig_sq, float(self.n_reps)), axis=-1)
        tau0 = tau[..., 0] if ad.is_node(tau) else np.asarray(tau)[..., 0]
        return ad.neg(ad.log(ad.add(ad.mul(tau0, tau0), cbar)))

    def log_prior_theta(self, phi, theta):
        beta, tau = self._split_theta(theta)
        tau0 = tau[..., 0] if ad.is_node(tau) else np.asarray(tau)[..., 0]
        tt = ad.reshape(tau0, np.shape(value_of(tau0)) + (1,))
        terms = ad.normal_logpdf(beta, 0.0, ad.mul(tt, tt))
        return ad.add(self._log_tau_prior(phi, tau), ad.vsum(terms, axis=-1))

    def modulated_log_prior(self, phi, theta_tilde, eta):
        """Per-group N(0, ttau^2/eta_i); groups at eta_i = 0 contribute a flat
        zero term (the cut prior)."""
        eta = np.asarray(value_of(eta), dtype=np.float64).ravel()
        beta, tau = self._split_theta(theta_tilde)
        tau0 = tau[..., 0] if ad.is_node(tau) else np.asarray(tau)[..., 0]
        active = eta > 0.0
        n_active = int(active.sum())
        out = self._log_tau_prior(phi, tau)
        if n_active == 0:
            return out
        log_eta_const = float(np.sum(0.5 * np.log(eta[active]) - 0.5 * LOG_2PI))
        tt = ad.reshape(tau0, np.shape(value_of(tau0)) + (1,))
        quad = ad.vsum(ad.mul(np.where(active, eta, 0.0),
                              ad.div(ad.mul(beta, beta), ad.mul(tt, tt))), axis=-1)
        out = ad.add(out, ad.sub(log_eta_const, ad.mul(float(n_active), ad.log(tau0))))
        return ad.sub(out, ad.mul(0.5, quad))

    def per_datum_loglik(self, data, phi, theta):
        """One datum per observation y_ij."""
        groups = data.y["group"].astype(int)
        y = data.y["y"]
        beta, _ = self._split_theta(theta)
        sig = ad.take(phi, groups, axis=-1)
        b = ad.take(beta, groups, axis=-1)
        return ad.normal_logpdf(y, b, ad.mul(sig, sig))

    def coordinate_names(self):
        phi = [f"sigma_{i + 1}" for i in range(self.n_groups)]
        theta = [f"beta_{i + 1}" for i in range(self.n_groups)] + ["tau"]
        return phi, theta


# ---------------------------------------------------------------------------
# 1-d prior-cut toy and the order-coherence quadrature check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorCutToy1D(ModularModel):
    """Scalar prior-cut model for the belief-update coherence check.

    phi ~ N(0, v_phi); theta | phi ~ N(phi, v_theta) (the suspect prior
    link); Y_i ~ N(phi + theta, s_y^2).  The cut prior on theta_tilde is
    flat, and the modulated prior is N(phi, v_theta / eta).
    """

    s_y: float = 1.0
    v_phi: float = 1.0
    v_theta: float = 1.0

    p_phi = 1
    p_theta = 1
    phi_domains = ("unbounded",)
    theta_domains = ("unbounded",)
    n_cuts = 1
    cut_kind = "prior"

    def log_lik_y(self, data, phi, theta):
        y = data.y["y"]
        loc = ad.add(phi[..., :1] if ad.is_node(phi) else np.asarray(phi)[..., :1],
                     theta[..., :1] if ad.is_node(theta) else np.asarray(theta)[..., :1])
        return ad.mul(data.y_scale, ad.vsum(ad.normal_logpdf(y, loc, self.s_y ** 2), axis=-1))

    def log_prior_phi(self, phi):
        phi0 = phi[..., 0] if ad.is_node(phi) else np.asarray(phi)[..., 0]
        return ad.normal_logpdf(phi0, 0.0, self.v_phi)

    def log_prior_theta(self, phi, theta):
        phi0 = phi[..., 0] if ad.is_node(phi) else np.asarray(phi)[..., 0]
        th0 = theta[..., 0] if ad.is_node(theta) else np.asarray(theta)[..., 0]
        return ad.normal_logpdf(th0, phi0, self.v_theta)

    def modulated_log_prior(self, phi, theta_tilde, eta):
        eta = float(np.asarray(value_of(eta)).ravel()[0])
        if eta == 0.0:
            return 0.0
        phi0 = phi[..., 0] if ad.is_node(phi) else np.asarray(phi)[..., 0]
        th0 = theta_tilde[..., 0] if ad.is_node(theta_tilde) else np.asarray(theta_tilde)[..., 0]
        return ad.normal_logpdf(th0, phi0, self.v_theta / eta)

    def per_datum_loglik(self, data, phi, theta):
        loc = ad.add(phi[..., :1] if ad.is_node(phi) else np.asarray(phi)[..., :1],
                     theta[..., :1] if ad.is_node(theta) else np.asarray(theta)[..., :1])
        return ad.normal_logpdf(data.y["y"], loc, self.s_y ** 2)


def _grid_normalise(log_density, dphi, dtheta):
    d = np.exp(log_density - log_density.max())
    return d / (d.sum() * dphi * dtheta)


def coherence_check(model: PriorCutToy1D, y_first, y_second,
                    grid_size=400, span=8.0):
    """Sup-norm gap between the one-shot and two-stage cut posteriors.

    Both posteriors are computed by quadrature on a (phi, theta) grid:
    one-shot uses all the data at once; the sequential route updates with the
    first batch, then treats the stage-one posteriors as priors for the
    second batch (with the marginal-likelihood correction evaluated under
    the updated analysis prior).
    """
    y1 = np.asarray(y_first, dtype=np.float64)
    y2 = np.asarray(y_second, dtype=np.float64)
    y_all = np.concatenate([y1, y2])

    phi = np.linspace(-span, span, grid_size)
    theta = np.linspace(-span, span, grid_size)
    dphi = phi[1] - phi[0]
    dtheta = theta[1] - theta[0]
    P, T = np.meshgrid(phi, theta, indexing="ij")

    def loglik(y, p, t):
        if y.size == 0:
            return np.zeros_like(p)
        return np.sum(norm.logpdf(y[None, None, :], loc=(p + t)[..., None],
                                  scale=model.s_y), axis=-1)

    log_prior_phi = norm.logpdf(phi, 0.0, math.sqrt(model.v_phi))
    log_prior_theta = norm.logpdf(T, P, math.sqrt(model.v_theta))

    def imputation_marginal(y, log_tilde_prior):
        """log integral over theta_tilde of exp(loglik + tilde prior), per phi."""
        ll = loglik(y, P, T) + log_tilde_prior
        m = ll.max(axis=1, keepdims=True)
        return np.log(np.sum(np.exp(ll - m), axis=1) * dtheta) + m[:, 0]

    flat = np.zeros_like(T)  # flat cut prior on theta_tilde

    # one-shot cut posterior on (phi, theta)
    log_m_all = imputation_marginal(y_all, flat)
    log_analysis_all = log_prior_theta + loglik(y_all, P, T)
    norm_a = np.log(np.sum(np.exp(log_analysis_all - log_analysis_all.max(axis=1, keepdims=True)),
                           axis=1) * dtheta) + log_analysis_all.max(axis=1)
    log_one_shot = log_prior_phi[:, None] + log_m_all[:, None] \
        + log_analysis_all - norm_a[:, None]
    one_shot = _grid_normalise(log_one_shot, dphi, dtheta)

    # stage one: posteriors given the first batch
    log_m1 = imputation_marginal(y1, flat)
    log_tilde_1 = loglik(y1, P, T) + flat
    norm_t1 = np.log(np.sum(np.exp(log_tilde_1 - log_tilde_1.max(axis=1, keepdims=True)),
                            axis=1) * dtheta) + log_tilde_1.max(axis=1)
    log_tilde_1 = log_tilde_1 - norm_t1[:, None]  # updated imputation prior on ttheta
    log_a1 = log_prior_theta + loglik(y1, P, T)
    norm_a1 = np.log(np.sum(np.exp(log_a1 - log_a1.max(axis=1, keepdims=True)),
                            axis=1) * dtheta) + log_a1.max(axis=1)
    log_a1 = log_a1 - norm_a1[:, None]  # updated analysis prior on theta

    # stage two: update with the rest of the data
    log_m2 = imputation_marginal(y2, log_tilde_1)
    ll2 = loglik(y2, P, T)
    log_pm2 = np.log(np.sum(np.exp(log_a1 + ll2 - (log_a1 + ll2).max(axis=1, keepdims=True)),
                            axis=1) * dtheta) + (log_a1 + ll2).max(axis=1)
    log_two_stage = (log_prior_phi + log_m1 + log_m2)[:, None] \
        + log_a1 + ll2 - log_pm2[:, None]
    two_stage = _grid_normalise(log_two_stage, dphi, dtheta)

    return float(np.max(np.abs(one_shot - two_stage)))
