"""The variational semi-modular loss and its single-loop SGD trainer.

The training objective has two summands sharing one set of reparameterised
draws: the power ELBO on the shared and auxiliary blocks, and a Bayes ELBO
on the shared and analysis blocks in which *every* appearance of the shared
parameters (as model argument and through its own log density) is
gradient-stopped.  As a result the first-block and auxiliary-block parameter
vectors receive gradients only from the power term and the analysis-block
vector only from the stopped Bayes term, and the stationary system decouples
exactly.

The loss is implemented as a quantity to *minimise*: the negative of the two
ELBOs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, ParameterStore, value_of


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _flow_eta(flow, eta):
    return eta if getattr(flow, "eta_dim", 0) else None


def power_elbo(model, data, flow, params, eta, eps):
    """Monte Carlo power ELBO on the (shared, auxiliary) blocks."""
    sb = flow.sample_blocks(params, eps, eta=_flow_eta(flow, eta),
                            blocks=("phi", "theta_tilde"))
    lp = model.log_powered_joint(data, sb.phi, sb.theta_tilde, eta)
    return ad.mean(ad.sub(lp, ad.add(sb.logq1, sb.logq3)))


def bayes_elbo_stopped(model, data, flow, params, eps, eta=None):
    """Bayes ELBO on (shared, analysis) with the shared block fully stopped.

    Both the model argument and the shared block's own log density are
    gradient-stopped, so this term contributes exactly zero gradient to the
    first-block parameters.
    """
    sb = flow.sample_blocks(params, eps, eta=_flow_eta(flow, eta),
                            blocks=("phi", "theta"))
    phi = ad.stop_gradient(sb.phi)
    logq1 = ad.stop_gradient(sb.logq1)
    lp = model.log_joint(data, phi, sb.theta)
    return ad.mean(ad.sub(lp, ad.add(logq1, sb.logq2)))


def bayes_elbo(model, data, flow, params, eps, eta=None):
    """Plain (unstopped) variational-Bayes ELBO on the (shared, analysis)
    blocks; the independent reference for the eta = 1 endpoint."""
    sb = flow.sample_blocks(params, eps, eta=_flow_eta(flow, eta),
                            blocks=("phi", "theta"))
    lp = model.log_joint(data, sb.phi, sb.theta)
    return ad.mean(ad.sub(lp, ad.add(sb.logq1, sb.logq2)))


def loss_parts(model, data, flow, params, eta, eps):
    """Both summands of the minimised loss, sharing one forward pass.

    Returns {"power": -power ELBO, "bayes": -stopped Bayes ELBO}; their sum
    is the training loss.
    """
    feta = _flow_eta(flow, eta)
    sb = flow.sample_blocks(params, eps, eta=feta)
    lp_pow = model.log_powered_joint(data, sb.phi, sb.theta_tilde, eta)
    power = ad.mean(ad.sub(lp_pow, ad.add(sb.logq1, sb.logq3)))
    phi_s = ad.stop_gradient(sb.phi)
    logq1_s = ad.stop_gradient(sb.logq1)
    lp_bayes = model.log_joint(data, phi_s, sb.theta)
    bayes = ad.mean(ad.sub(lp_bayes, ad.add(logq1_s, sb.logq2)))
    return {"power": ad.neg(power), "bayes": ad.neg(bayes)}


def smi_loss(model, data, flow, params, eta, eps):
    """The minimised stop-gradient loss: -(power ELBO + stopped Bayes ELBO)."""
    parts = loss_parts(model, data, flow, params, eta, eps)
    return ad.add(parts["power"], parts["bayes"])


def naive_smi_kl_terms(model, data, flow, params, eta, eps):
    """The three expectations of the naive KL objective, for demonstration.

    The middle term's companion, E[log p(Y, phi)], involves an intractable
    marginal over the analysis block; it has no Monte Carlo estimator in this
    framework, which is exactly why the stop-gradient loss exists.  Returned
    are the two tractable expectations and an explicit None placeholder.
    """
    feta = _flow_eta(flow, eta)
    sb = flow.sample_blocks(params, eps, eta=feta)
    lp_pow = model.log_powered_joint(data, sb.phi, sb.theta_tilde, eta)
    first = ad.mean(ad.sub(lp_pow, ad.add(sb.logq1, sb.logq3)))
    lp_y = ad.add(model.log_lik_y(data, sb.phi, sb.theta),
                  ad.add(model.log_prior_phi(sb.phi),
                         model.log_prior_theta(sb.phi, sb.theta)))
    second = ad.mean(ad.sub(lp_y, sb.logq2))
    return first, second, None


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Knobs for the stochastic-gradient loop.

    `mc_samples` is the number of reparameterised draws per step.  Plateau
    decay halves the learning rate of a loss component's parameter group
    when that component's moving average stops improving; component-wise
    monitoring keeps the shared/auxiliary trajectory independent of analysis
    data at influence zero.  `convergence_window` = 0 disables early
    stopping (the step count is then exact, which the reproducibility tests
    rely on).
    """

    steps: int = 5000
    mc_samples: int = 8
    lr: float = 1e-3
    optimizer: str = "adam"  # "adam" | "sgd"
    seed: int = 0
    convergence_window: int = 200
    convergence_tol: float = 1e-4
    plateau_patience: int = 0
    plateau_factor: float = 0.5
    min_lr_factor: float = 0.05
    divergence_window: int = 50
    minibatch_y: int | None = None
    minibatch_z: int | None = None
    # deterministic step-indexed decay: lr multiplied by lr_decay_factor at
    # each listed step (keeps trajectories data-independent where required)
    lr_decay_at: tuple = ()
    lr_decay_factor: float = 0.1
    # Polyak tail averaging: fraction of final steps averaged into the result
    average_tail: float = 0.0

    def validate(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


class TrainingDivergence(RuntimeError):
    """Loss stayed non-finite for a full window of consecutive steps."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class _Adam:
    def __init__(self, store, lr):
        self.lr = lr
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8
        self.m = {k: np.zeros_like(v) for k, v in store.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.items()}
        self.t = 0

    def update(self, store, grads, factors):
        self.t += 1
        corr1 = 1.0 - self.b1 ** self.t
        corr2 = 1.0 - self.b2 ** self.t
        for k in store.names():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / corr1
            vhat = self.v[k] / corr2
            store[k] = store[k] - self.lr * factors.get(k, 1.0) * mhat / (np.sqrt(vhat) + self.eps)


class _Sgd:
    def __init__(self, store, lr):
        self.lr = lr

    def update(self, store, grads, factors):
        for k in store.names():
            store[k] = store[k] - self.lr * factors.get(k, 1.0) * grads[k]


class _PlateauMonitor:
    """Per-component moving average with halving on stagnation."""

    def __init__(self, patience, factor, floor):
        self.patience = patience
        self.factor = factor
        self.floor = floor
        self.best = {}
        self.since = {}
        self.lr_factor = {}

    def update(self, part_values, window_avgs):
        changed = False
        for part, avg in window_avgs.items():
            if avg is None:
                continue
            f = self.lr_factor.setdefault(part, 1.0)
            best = self.best.get(part)
            if best is None or avg < best - 1e-12:
                self.best[part] = avg
                self.since[part] = 0
            else:
                self.since[part] = self.since.get(part, 0) + 1
                if self.patience and self.since[part] >= self.patience and f > self.floor:
                    self.lr_factor[part] = max(f * self.factor, self.floor)
                    self.since[part] = 0
                    changed = True
        return changed


def fit(step_parts, store, config: TrainConfig, block_groups=None):
    """Generic SGD driver.

    `step_parts(leaves, rng, step)` builds the loss parts for one step as a
    dict of scalar nodes; their sum is minimised.  `block_groups` maps block
    names to part names for component-wise plateau scheduling.  Returns the
    fitted store and a per-step trace.  Deterministic given the config seed.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    store = store.copy()
    opt = _Adam(store, config.lr) if config.optimizer == "adam" else _Sgd(store, config.lr)
    block_groups = block_groups or {}
    monitor = _PlateauMonitor(config.plateau_patience, config.plateau_factor,
                              config.min_lr_factor)
    trace = []
    part_history: dict = {}
    rejected = 0
    window = config.convergence_window
    avg_from = config.steps - int(math.ceil(config.average_tail * config.steps)) \
        if config.average_tail > 0 else None
    avg_sum = None
    avg_count = 0
    decay = 1.0

    for step in range(config.steps):
        if step in config.lr_decay_at:
            decay *= config.lr_decay_factor
        part_values = {}

        def total_loss(leaves):
            parts = step_parts(leaves, rng, step)
            total = None
            for name, node in parts.items():
                part_values[name] = float(value_of(node))
                total = node if total is None else ad.add(total, node)
            return total

        try:
            grads, loss_value = ad.grad(total_loss, store, return_value=True)
        except NonFiniteError as err:
            rejected += 1
            trace.append({"step": step, "loss": math.nan, "grad_norm": math.nan,
                          "rejected": 1, "reason": str(err)})
            if rejected >= config.divergence_window:
                raise TrainingDivergence(
                    f"loss non-finite for {rejected} consecutive steps", trace)
            continue
        rejected = 0

        grad_norm = math.sqrt(sum(float(np.dot(g, g)) for g in grads.blocks.values()))
        for name, v in part_values.items():
            part_history.setdefault(name, []).append(v)

        # component-wise learning-rate factors
        window_avgs = {}
        for name, hist in part_history.items():
            if config.plateau_patience and len(hist) >= 50:
                window_avgs[name] = float(np.mean(hist[-50:]))
            else:
                window_avgs[name] = None
        monitor.update(part_values, window_avgs)
        factors = {}
        for block in store.names():
            part = block_groups.get(block)
            factors[block] = decay * (monitor.lr_factor.get(part, 1.0) if part else 1.0)

        opt.update(store, grads, factors)
        if avg_from is not None and step >= avg_from:
            if avg_sum is None:
                avg_sum = {k: store[k].copy() for k in store.names()}
            else:
                for k in store.names():
                    avg_sum[k] += store[k]
            avg_count += 1
        entry = {"step": step, "loss": loss_value, "grad_norm": grad_norm, "rejected": 0}
        entry.update(part_values)
        trace.append(entry)

        # convergence: relative change of the windowed moving-average loss
        if window and step >= 2 * window and step % window == 0:
            losses = [t["loss"] for t in trace if not math.isnan(t["loss"])]
            if len(losses) >= 2 * window:
                cur = float(np.mean(losses[-window:]))
                prev = float(np.mean(losses[-2 * window:-window]))
                scale = max(abs(prev), 1.0)
                if abs(cur - prev) / scale < config.convergence_tol:
                    break
    if avg_sum is not None and avg_count > 0:
        store = ParameterStore({k: v / avg_count for k, v in avg_sum.items()})
    return store, trace


SMI_BLOCK_GROUPS = {
    "lambda1": "power", "lambda3": "power", "mu1": "power", "mu3": "power",
    "lambda2": "bayes", "mu2": "bayes",
}


def train_smi(model, data, flow, eta, config: TrainConfig, init=None):
    """Single-loop SGD on the stop-gradient loss at fixed influence.

    Returns the fitted parameter store and the loss trace.
    """
    store = init.copy() if init is not None else flow.init_params(config.seed)
    eta = np.asarray(eta, dtype=np.float64).ravel()

    def step_parts(leaves, rng, step):
        batch = data
        if config.minibatch_y or config.minibatch_z:
            batch = data.subsample(rng, y_size=config.minibatch_y,
                                   z_size=config.minibatch_z)
        eps = flow.draw_base(config.mc_samples, rng)
        return loss_parts(model, batch, flow, leaves, eta, eps)

    return fit(step_parts, store, config, block_groups=SMI_BLOCK_GROUPS)


def train_bayes(model, data, flow, config: TrainConfig, init=None):
    """Plain variational Bayes on the (shared, analysis) blocks; the
    reference fit for the influence-one endpoint."""
    full = init.copy() if init is not None else flow.init_params(config.seed)
    store = ParameterStore({k: full[k] for k in ("lambda1", "lambda2")})

    def step_parts(leaves, rng, step):
        batch = data
        if config.minibatch_y or config.minibatch_z:
            batch = data.subsample(rng, y_size=config.minibatch_y,
                                   z_size=config.minibatch_z)
        eps = flow.draw_base(config.mc_samples, rng)
        return {"bayes": ad.neg(bayes_elbo(model, batch, flow, leaves, eps))}

    return fit(step_parts, store, config)


def trace_to_csv(trace, path):
    """Loss trace as CSV with columns step, loss, grad_norm (plus parts)."""
    if not trace:
        return
    keys = ["step", "loss", "grad_norm"]
    extra = sorted(set().union(*(t.keys() for t in trace)) - set(keys))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys + extra, restval="")
        writer.writeheader()
        for t in trace:
            writer.writerow(t)
