"""Predictive scoring and the influence-vector search.

The negative expected log pointwise predictive density is estimated with
the WAIC (log pointwise predictive density minus a per-datum variance
penalty, all through log-sum-exp), or, for synthetic studies, by scoring
fresh draws from the true generative model.  The search for the best
influence vector runs a greedy backward pass over single-component cuts
from the all-ones (full-feedback) configuration, then projected gradient
descent on the WAIC with derivatives taken through the meta-posterior all
the way into the sampled parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParameterStore, value_of
from .models import validate_eta


@dataclass
class ElpdReport:
    """One predictive-score evaluation at a fixed influence vector."""

    eta: np.ndarray
    neg_elpd: float
    se: float
    per_datum: np.ndarray  # per-datum log pointwise predictive density
    penalty: float
    n_samples: int
    trace: list = field(default_factory=list)

    def to_dict(self):
        return {
            "eta": [float(v) for v in np.atleast_1d(self.eta)],
            "neg_elpd": float(self.neg_elpd),
            "se": float(self.se),
            "per_datum": [float(v) for v in np.atleast_1d(self.per_datum)],
            "penalty": float(self.penalty),
            "n_samples": int(self.n_samples),
            "trace": self.trace,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


class PosteriorHandle:
    """A fitted variational posterior that can be sampled at any influence.

    Wraps either a fixed-influence fit (`kind="smi"`), a perceptron-map
    meta-posterior or an influence-conditioned flow; selection code only
    sees this surface.
    """

    def __init__(self, family, params, model, kind):
        self.family = family
        self.params = params
        self.model = model
        self.kind = kind

    @classmethod
    def from_smi(cls, flow, params, model):
        return cls(_FixedFamily(flow), params, model, "smi")

    @classmethod
    def from_vmp(cls, family, params, model):
        return cls(family, params, model, family.kind)

    @property
    def eta_responsive(self):
        return self.kind in ("map", "flow")

    def draw_base(self, n, rng):
        return self.family.flow.draw_base(n, rng)

    def sample_blocks(self, eta, eps, params=None, blocks=("phi", "theta")):
        p = self.params if params is None else params
        return self.family.sample_blocks(p, eta, eps, blocks=blocks)

    def draws(self, eta, n, rng):
        """Plain (phi, theta) draws; the fast sampling path."""
        eps = self.draw_base(n, rng)
        sb = self.sample_blocks(eta, eps)
        return np.asarray(value_of(sb.phi)), np.asarray(value_of(sb.theta))


class _FixedFamily:
    kind = "smi"

    def __init__(self, flow):
        self.flow = flow

    def sample_blocks(self, params, eta, eps, blocks=("phi", "theta")):
        feta = eta if self.flow.eta_dim else None
        return self.flow.sample_blocks(params, eps, eta=feta, blocks=blocks)


# ---------------------------------------------------------------------------
# WAIC and the true-model oracle
# ---------------------------------------------------------------------------

def _waic_terms(ll):
    """lppd and penalty per datum from a (samples, data) log-likelihood
    matrix; log-sum-exp throughout, never raw exponentials."""
    S = np.shape(value_of(ll))[0]
    lppd = ad.sub(ad.logsumexp(ll, axis=0), math.log(S))
    if S < 2:
        penalty = np.zeros(np.shape(value_of(lppd)))
    else:
        mean = ad.div(ad.vsum(ll, axis=0), float(S))
        dev = ad.sub(ll, ad.reshape(mean, (1,) + np.shape(value_of(mean))))
        penalty = ad.div(ad.vsum(ad.mul(dev, dev), axis=0), float(S - 1))
    return lppd, penalty


def waic_from_loglik(ll):
    """Negative-ELPD estimate from a log-likelihood matrix (tape-capable)."""
    lppd, penalty = _waic_terms(ll)
    return ad.neg(ad.vsum(ad.sub(lppd, penalty)))


def waic(handle: PosteriorHandle, data, eta, n_samples=1000, rng=None, eps=None):
    """WAIC report at one influence vector.

    Pass `eps` to reuse common base draws across compared configurations.
    """
    eta = validate_eta(eta, handle.model.n_cuts)
    if eps is None:
        eps = handle.draw_base(n_samples, rng)
    sb = handle.sample_blocks(eta, eps)
    ll = handle.model.per_datum_loglik(data, sb.phi, sb.theta)
    ll = np.asarray(value_of(ll))
    S = ll.shape[0]
    lppd, penalty = _waic_terms(ll)
    lppd = np.asarray(value_of(lppd))
    penalty = np.asarray(value_of(penalty))
    terms = lppd - penalty
    n = terms.size
    se = math.sqrt(n * float(np.var(terms, ddof=1))) if n > 1 else 0.0
    return ElpdReport(eta=eta, neg_elpd=float(-terms.sum()), se=se,
                      per_datum=lppd, penalty=float(penalty.sum()),
                      n_samples=S)


def posterior_predictive_logdensity(handle: PosteriorHandle, datum, eta,
                                    n_samples=1000, rng=None, eps=None):
    """log q_eta(new datum) = log mean over draws of the datum likelihood.

    `datum` is a DataBundle holding the new records; its joint density is
    scored (all per-datum columns summed inside the log-sum-exp).
    """
    eta = validate_eta(eta, handle.model.n_cuts)
    if eps is None:
        eps = handle.draw_base(n_samples, rng)
    sb = handle.sample_blocks(eta, eps)
    ll = np.asarray(value_of(handle.model.per_datum_loglik(datum, sb.phi, sb.theta)))
    joint = ll.sum(axis=1)
    S = joint.size
    return float(value_of(ad.logsumexp(joint)) - math.log(S))


def elpd_true_oracle(handle: PosteriorHandle, data, eta, n_samples=1000,
                     rng=None, n_rep=100, eps=None):
    """Negative ELPD scored on fresh draws from the true generative model.

    Available for synthetic-data models only; the estimate is one
    dataset-worth of expected predictive score, directly comparable to the
    WAIC estimate.
    """
    eta = validate_eta(eta, handle.model.n_cuts)
    rep_rng = np.random.default_rng(rng.integers(2 ** 63)) if rng is not None \
        else np.random.default_rng(0)
    bundle, n_rep = handle.model.simulate_replicates(rep_rng, n_rep, data=data)
    if eps is None:
        eps = handle.draw_base(n_samples, rng)
    sb = handle.sample_blocks(eta, eps)
    ll = np.asarray(value_of(handle.model.per_datum_loglik(bundle, sb.phi, sb.theta)))
    S = ll.shape[0]
    lppd, _ = _waic_terms(ll)
    lppd = np.asarray(value_of(lppd))
    total = -lppd.sum() / n_rep
    n_cols = lppd.size
    se = math.sqrt(n_cols * float(np.var(lppd, ddof=1))) / n_rep if n_cols > 1 else 0.0
    return ElpdReport(eta=eta, neg_elpd=float(total), se=se, per_datum=lppd,
                      penalty=0.0, n_samples=S)


# ---------------------------------------------------------------------------
# influence search
# ---------------------------------------------------------------------------

def greedy_init(handle: PosteriorHandle, data, n_samples=1000, seed=0,
                max_rounds=None):
    """Greedy backward search over single-component cuts.

    Starts from full feedback (all ones); each round scores every candidate
    obtained by cutting one more component to exactly zero, reusing
    identical base draws across the round's candidates, and commits the
    best strictly improving cut.  Stops when no cut improves.
    """
    if not handle.eta_responsive:
        raise ValueError("greedy search needs a meta-posterior handle")
    C = handle.model.n_cuts
    eta = np.ones(C)
    rng = np.random.default_rng(seed)
    trace = []
    rounds = max_rounds if max_rounds is not None else C
    for rnd in range(rounds):
        round_seed = int(rng.integers(2 ** 63))
        eps = handle.draw_base(n_samples, np.random.default_rng(round_seed))
        base = waic(handle, data, eta, eps=eps)
        trace.append({"round": rnd, "candidate": None, "committed": False,
                      "eta": [float(v) for v in eta],
                      "neg_elpd": base.neg_elpd, "seed": round_seed})
        best_c, best_score = None, base.neg_elpd
        for c in range(C):
            if eta[c] == 0.0:
                continue
            cand = eta.copy()
            cand[c] = 0.0
            rep = waic(handle, data, cand, eps=eps)
            trace.append({"round": rnd, "candidate": c, "committed": False,
                          "eta": [float(v) for v in cand],
                          "neg_elpd": rep.neg_elpd, "seed": round_seed})
            if rep.neg_elpd < best_score:
                best_c, best_score = c, rep.neg_elpd
        if best_c is None:
            break
        eta[best_c] = 0.0
        trace.append({"round": rnd, "candidate": best_c, "committed": True,
                      "eta": [float(v) for v in eta],
                      "neg_elpd": best_score, "seed": round_seed})
    return eta, trace


def _loglik_matrix(handle, data, eta, eps, params=None):
    sb = handle.sample_blocks(eta, eps, params=params)
    return handle.model.per_datum_loglik(data, sb.phi, sb.theta)


def waic_value_and_eta_grad(handle: PosteriorHandle, data, eta, eps,
                            chunk_size=128):
    """WAIC value and its exact gradient in the influence vector.

    Differentiation runs through the meta-posterior into every sampled
    parameter.  To bound memory the chain rule is split at the
    log-likelihood matrix: the outer WAIC cotangent is computed once, then
    draw chunks are re-traced and their contributions accumulated.
    """
    if not handle.eta_responsive:
        raise ValueError("eta optimisation needs a meta-posterior handle")
    eta = validate_eta(eta, handle.model.n_cuts)
    S = eps["eps1"].shape[0]

    # values of the full log-likelihood matrix, chunked, without a tape
    rows = []
    for lo in range(0, S, chunk_size):
        sub = {k: v[lo:lo + chunk_size] for k, v in eps.items()}
        rows.append(np.asarray(value_of(_loglik_matrix(handle, data, eta, sub))))
    ll_vals = np.concatenate(rows, axis=0)

    # outer pass: cotangent of the WAIC with respect to the matrix
    ll_leaf = Node(ll_vals)
    out = waic_from_loglik(ll_leaf)
    weight = ad.backward(out, [ll_leaf])[0]
    value = float(value_of(out))

    # inner passes: accumulate d(sum w*ll)/d(eta) chunk by chunk
    grad = np.zeros(eta.size)
    store = ParameterStore({"eta": eta})
    for lo in range(0, S, chunk_size):
        sub = {k: v[lo:lo + chunk_size] for k, v in eps.items()}
        w = weight[lo:lo + chunk_size]

        def f(leaves):
            ll = _loglik_matrix(handle, data, leaves["eta"], sub)
            return ad.vsum(ad.mul(w, ll))

        grad += ad.grad(f, store)["eta"]
    return value, grad


@dataclass
class EtaSearchConfig:
    steps: int = 200
    step_size: float = 0.05
    n_samples: int = 1000
    seed: int = 0
    chunk_size: int = 128


def optimize_eta(handle: PosteriorHandle, data, eta0,
                 config: EtaSearchConfig = EtaSearchConfig()):
    """Projected gradient descent on the WAIC over the influence hypercube.

    Iterates are clamped into [0, 1]^C exactly.  A non-finite score halves
    the step and retries.  One common pool of base draws keeps the descent
    surface fixed, so the run is deterministic given the seed.
    """
    eta = validate_eta(eta0, handle.model.n_cuts).copy()
    rng = np.random.default_rng(config.seed)
    eps = handle.draw_base(config.n_samples, rng)
    step = config.step_size
    trace = []
    for it in range(config.steps):
        try:
            value, grad = waic_value_and_eta_grad(handle, data, eta, eps,
                                                  chunk_size=config.chunk_size)
            ok = math.isfinite(value) and np.all(np.isfinite(grad))
        except ad.NonFiniteError:
            ok = False
        if not ok:
            step *= 0.5
            trace.append({"step": it, "eta": [float(v) for v in eta],
                          "neg_elpd": None, "note": "halved step"})
            if step < 1e-6:
                raise RuntimeError("eta descent could not find a finite score")
            continue
        trace.append({"step": it, "eta": [float(v) for v in eta],
                      "neg_elpd": value})
        eta = np.clip(eta - step * grad, 0.0, 1.0)
    return eta, trace
