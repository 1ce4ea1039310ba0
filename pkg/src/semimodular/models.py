"""Multi-modular probabilistic models: per-module log densities, joint,
powered joint and analysis-stage conditional.

Two coupling structures are supported.  In a *likelihood cut* the suspect
module's likelihood is tempered by the influence weight at the imputation
stage.  In a *prior cut* the suspect links are prior densities; the
imputation stage swaps them for a normalised modulated prior that
interpolates between a flat cut prior (influence 0) and the original prior
(influence 1).  The analysis-stage conditional always keeps the original
prior.

All density functions broadcast over a leading batch axis and run on arrays
or autodiff nodes alike.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import value_of


class DomainError(ValueError):
    """A parameter point left the model's declared domain."""


class DataError(ValueError):
    """Malformed or inconsistent observation data."""


class UnsupportedOperation(RuntimeError):
    """The model does not support the requested optional operation."""


def validate_eta(eta, n_cuts):
    """Coerce to a float vector in [0,1]^C; scalars broadcast to C copies."""
    eta = np.asarray(value_of(eta), dtype=np.float64).ravel()
    if eta.size == 1 and n_cuts > 1:
        eta = np.full(n_cuts, eta[0])
    if eta.size != n_cuts:
        raise DomainError(f"influence vector has {eta.size} components, model declares {n_cuts}")
    if np.any(eta < 0.0) or np.any(eta > 1.0):
        raise DomainError("influence components must lie in [0, 1]")
    return eta


@dataclass(frozen=True)
class DataBundle:
    """Observations per module plus fixed covariates.

    `z` and `y` map column names to aligned 1-d arrays (record count = array
    length).  The scale factors rescale each module's log-likelihood when a
    random minibatch stands in for the full module, keeping the stochastic
    objective unbiased module by module.
    """

    y: dict
    z: dict | None = None
    y_scale: float = 1.0
    z_scale: float = 1.0

    def __post_init__(self):
        for name, table in (("y", self.y), ("z", self.z)):
            if table is None:
                continue
            sizes = {k: np.asarray(v).shape[0] for k, v in table.items()}
            if len(set(sizes.values())) > 1:
                raise DataError(f"{name}-block columns disagree in length: {sizes}")
            for k, v in table.items():
                if not np.all(np.isfinite(np.asarray(v, dtype=np.float64))):
                    raise DataError(f"{name}-block column {k!r} contains non-finite values")

    @property
    def n_y(self):
        return len(next(iter(self.y.values()))) if self.y else 0

    @property
    def n_z(self):
        return len(next(iter(self.z.values()))) if self.z else 0

    def subsample(self, rng, y_size=None, z_size=None):
        """Random minibatch with per-module rescaling factors."""
        out = self
        if y_size is not None and self.y and y_size < self.n_y:
            idx = rng.choice(self.n_y, size=y_size, replace=False)
            out = replace(out,
                          y={k: np.asarray(v)[idx] for k, v in out.y.items()},
                          y_scale=out.y_scale * self.n_y / y_size)
        if z_size is not None and self.z and z_size < self.n_z:
            idx = rng.choice(self.n_z, size=z_size, replace=False)
            out = replace(out,
                          z={k: np.asarray(v)[idx] for k, v in out.z.items()},
                          z_scale=out.z_scale * self.n_z / z_size)
        return out


def load_table(path, columns=None):
    """Read a headed CSV into a dict of float columns."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: empty table")
    names = columns if columns is not None else list(rows[0])
    out = {}
    for name in names:
        if name not in rows[0]:
            raise DataError(f"{path}: missing declared column {name!r}")
        out[name] = np.array([float(r[name]) for r in rows])
    return out


class ModularModel:
    """Interface for two-stage multi-modular models.

    Subclasses declare dimensions, per-coordinate domain kinds, the cut kind
    and count, and implement the per-module log densities.  Everything here
    must be finite on the declared domains and broadcast over a leading batch
    axis.
    """

    p_phi: int
    p_theta: int
    phi_domains: tuple
    theta_domains: tuple
    n_cuts: int
    cut_kind: str  # "likelihood" | "prior"

    # per-module densities ---------------------------------------------------

    def log_lik_z(self, data, phi):
        return 0.0

    def log_lik_y(self, data, phi, theta):
        raise NotImplementedError

    def log_prior_phi(self, phi):
        raise NotImplementedError

    def log_prior_theta(self, phi, theta):
        """log p(theta | phi), the analysis-stage prior."""
        raise NotImplementedError

    def modulated_log_prior(self, phi, theta_tilde, eta):
        """Normalised interpolating prior for prior-cut models."""
        raise NotImplementedError

    def per_datum_loglik(self, data, phi, theta):
        """(batch, n_data) log-likelihood at the model's datum granularity."""
        raise NotImplementedError

    # domain handling ---------------------------------------------------------

    def _check_block(self, name, x, domains):
        xv = np.asarray(value_of(x), dtype=np.float64)
        if xv.shape[-1] != len(domains):
            raise DomainError(f"{name} has dimension {xv.shape[-1]}, expected {len(domains)}")
        for i, kind in enumerate(domains):
            col = xv[..., i]
            if kind == "positive" and np.any(col <= 0.0):
                raise DomainError(f"{name}[{i}] must be positive")
            if kind == "unit" and (np.any(col <= 0.0) or np.any(col >= 1.0)):
                raise DomainError(f"{name}[{i}] must lie strictly inside (0, 1)")
            if not np.all(np.isfinite(col)):
                raise DomainError(f"{name}[{i}] is non-finite")

    def validate_point(self, phi=None, theta=None):
        if phi is not None:
            self._check_block("phi", phi, self.phi_domains)
        if theta is not None:
            self._check_block("theta", theta, self.theta_domains)

    # composite densities ------------------------------------------------------

    def log_joint(self, data, phi, theta):
        """log p(phi, theta) + log p(Z | phi) + log p(Y | phi, theta)."""
        self.validate_point(phi, theta)
        out = ad.add(self.log_lik_z(data, phi), self.log_lik_y(data, phi, theta))
        out = ad.add(out, self.log_prior_phi(phi))
        return ad.add(out, self.log_prior_theta(phi, theta))

    def log_powered_joint(self, data, phi, theta_tilde, eta):
        """Imputation-stage target with the cut factors tempered or swapped.

        Likelihood cut: log p(Z|phi) + eta * log p(Y|phi, ttheta) + log prior.
        Prior cut: log p(Y|phi, ttheta) + log p(phi) + modulated prior, with
        a flat (zero) contribution for components at exactly eta_c = 0.
        """
        eta = validate_eta(eta, self.n_cuts)
        self.validate_point(phi, theta_tilde)
        if self.cut_kind == "likelihood":
            # scalar influence on the single tempered module
            out = ad.add(self.log_lik_z(data, phi),
                         ad.mul(float(eta[0]), self.log_lik_y(data, phi, theta_tilde)))
            out = ad.add(out, self.log_prior_phi(phi))
            return ad.add(out, self.log_prior_theta(phi, theta_tilde))
        out = ad.add(self.log_lik_z(data, phi), self.log_lik_y(data, phi, theta_tilde))
        out = ad.add(out, self.log_prior_phi(phi))
        return ad.add(out, self.modulated_log_prior(phi, theta_tilde, eta))

    def log_analysis_conditional(self, data, theta, phi):
        """Unnormalised log p(theta | Y, phi): likelihood plus original prior."""
        self.validate_point(phi, theta)
        return ad.add(self.log_lik_y(data, phi, theta), self.log_prior_theta(phi, theta))

    # optional extras -----------------------------------------------------------

    def simulate_replicates(self, rng, n_rep):
        """Fresh datum draws from the true generative model, for synthetic
        studies only.  Returns (bundle, reps_per_datum)."""
        raise UnsupportedOperation(f"{type(self).__name__} has no true-model simulator")

    def coordinate_names(self):
        phi = [f"phi{i}" for i in range(self.p_phi)]
        theta = [f"theta{i}" for i in range(self.p_theta)]
        return phi, theta
