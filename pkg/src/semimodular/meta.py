"""The variational meta-posterior: one parameter set for every influence value.

Two parameterisations.  The *map* route trains perceptron heads taking the
influence vector to the three flow parameter blocks; the *flow* route makes
the influence vector an extra conditioner input of every transform (weights
in separate mu blocks) so that zeroing those weights recovers the plain
family exactly.  Both are trained on the meta-loss: the per-influence
stop-gradient loss averaged over a fresh batch of influence draws each step,
sampled componentwise from Beta(a, 1) to concentrate effort near the cut
boundary where the posterior family changes fastest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import smi
from .autodiff import ParameterStore, value_of
from .flows import SmiFlow, mlp_layout, mlp_apply, unflatten_layout, _init_mlp


@dataclass(frozen=True)
class EtaSampler:
    """Componentwise Beta(a, 1) draws on [0, 1]^dim."""

    dim: int
    a: float = 0.2

    def __post_init__(self):
        if not (0.0 < self.a < 1.0):
            raise ValueError("shape a must lie in (0, 1)")
        if self.dim < 1:
            raise ValueError("dimension must be positive")

    def sample(self, n, rng):
        return rng.beta(self.a, 1.0, size=(n, self.dim))


class VmpMap:
    """Perceptron map from the influence vector to flow parameters.

    Three heads, one per flow parameter block, so improving the shared-block
    fit at one influence value cannot disturb the analysis-block map.
    Initialised to a constant function: zero final layers plus a bias set to
    a reference parameter vector (typically from a short fixed-influence
    pre-training run).
    """

    def __init__(self, flow: SmiFlow, eta_dim, hidden=(16, 16)):
        if flow.eta_dim:
            raise ValueError("the map route uses a plain flow (no eta conditioner)")
        self.flow = flow
        self.eta_dim = eta_dim
        self.hidden = tuple(hidden)
        sizes = flow.lambda_sizes
        self.layouts = {
            f"alpha{k}": mlp_layout(f"h{k}", eta_dim, self.hidden, sizes[f"lambda{k}"])
            for k in (1, 2, 3)
        }
        self._indices = {name: {n: None for n, _ in lay}
                         for name, lay in self.layouts.items()}

    def init_params(self, seed=0, lam0: ParameterStore | None = None):
        if lam0 is None:
            lam0 = self.flow.init_params(seed)
        rng = np.random.default_rng(seed)
        blocks = {}
        for k in (1, 2, 3):
            name = f"alpha{k}"
            out: dict = {}
            _init_mlp(rng, self.layouts[name], f"h{k}", out)
            last = len(self.hidden)
            out[f"h{k}.b{last}"] = np.asarray(lam0[f"lambda{k}"], dtype=np.float64).copy()
            blocks[name] = np.concatenate([out[n].ravel() for n, _ in self.layouts[name]])
        return ParameterStore(blocks)

    def apply(self, alpha, eta):
        """lambda(alpha, eta): deterministic, continuous in eta, and
        differentiable in both arguments."""
        eta2 = ad.reshape(eta, (1, self.eta_dim)) \
            if np.shape(value_of(eta)) == (self.eta_dim,) else eta
        get = alpha.get if isinstance(alpha, dict) else alpha.__getitem__
        lam = {}
        for k in (1, 2, 3):
            name = f"alpha{k}"
            params = unflatten_layout(get(name), self.layouts[name])
            out = mlp_apply(params, self._indices[name], f"h{k}", eta2)
            lam[f"lambda{k}"] = ad.reshape(out, (np.shape(value_of(out))[-1],))
        return lam

    def arch_dict(self):
        return {"eta_dim": self.eta_dim, "hidden": list(self.hidden)}


def make_vmp_flow(model, config, eta_dim=None):
    """An eta-conditioned flow sized for the given model."""
    return SmiFlow(model.p_phi, model.p_theta, model.phi_domains,
                   model.theta_domains, config=config,
                   eta_dim=model.n_cuts if eta_dim is None else eta_dim)


def meta_loss(model, data, family, params, etas, eps_batches):
    """Mean of the per-influence stop-gradient loss over an influence batch."""
    total = None
    for eta, eps in zip(etas, eps_batches):
        term = family.loss_parts(model, data, params, eta, eps)
        val = ad.add(term["power"], term["bayes"])
        total = val if total is None else ad.add(total, val)
    return ad.div(total, float(len(etas)))


class VmpMapFamily:
    """Handle pairing a plain flow with a perceptron map."""

    kind = "map"

    def __init__(self, flow: SmiFlow, vmp_map: VmpMap):
        self.flow = flow
        self.map = vmp_map

    def loss_parts(self, model, data, params, eta, eps):
        lam = self.map.apply(params, eta)
        return smi.loss_parts(model, data, self.flow, lam, eta, eps)

    def lambda_at(self, params, eta):
        lam = self.map.apply(params, eta)
        return {k: np.asarray(value_of(v)) for k, v in lam.items()}

    def sample_blocks(self, params, eta, eps, blocks=("phi", "theta", "theta_tilde")):
        lam = self.map.apply(params, eta)
        return self.flow.sample_blocks(lam, eps, eta=None, blocks=blocks)


class VmpFlowFamily:
    """Handle for the eta-conditioned flow."""

    kind = "flow"

    def __init__(self, flow: SmiFlow):
        if not flow.eta_dim:
            raise ValueError("the flow route needs eta_dim > 0")
        self.flow = flow

    def loss_parts(self, model, data, params, eta, eps):
        return smi.loss_parts(model, data, self.flow, params, eta, eps)

    def sample_blocks(self, params, eta, eps, blocks=("phi", "theta", "theta_tilde")):
        return self.flow.sample_blocks(params, eps, eta=eta, blocks=blocks)


@dataclass
class VmpConfig:
    """Meta-training protocol: draws per step of the influence batch (R) and
    the Beta shape concentrating them near the cut boundary."""

    R: int = 8
    a: float = 0.2

    def validate(self):
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if not (0.0 < self.a < 1.0):
            raise ValueError("a must lie in (0, 1)")


def train_vmp(model, data, family, config: smi.TrainConfig,
              vmp_config: VmpConfig = VmpConfig(), init=None):
    """SGD on the meta-loss with a fresh influence batch each step."""
    vmp_config.validate()
    sampler = EtaSampler(dim=model.n_cuts, a=vmp_config.a)
    if init is not None:
        store = init.copy()
    elif family.kind == "map":
        store = family.map.init_params(config.seed)
    else:
        store = family.flow.init_params(config.seed)

    groups = dict(smi.SMI_BLOCK_GROUPS)
    groups.update({"alpha1": "power", "alpha3": "power", "alpha2": "bayes"})

    def step_parts(leaves, rng, step):
        batch = data
        if config.minibatch_y or config.minibatch_z:
            batch = data.subsample(rng, y_size=config.minibatch_y,
                                   z_size=config.minibatch_z)
        etas = sampler.sample(vmp_config.R, rng)
        power = None
        bayes = None
        for eta in etas:
            eps = family.flow.draw_base(config.mc_samples, rng)
            parts = family.loss_parts(model, batch, leaves, eta, eps)
            power = parts["power"] if power is None else ad.add(power, parts["power"])
            bayes = parts["bayes"] if bayes is None else ad.add(bayes, parts["bayes"])
        r = float(len(etas))
        return {"power": ad.div(power, r), "bayes": ad.div(bayes, r)}

    return smi.fit(step_parts, store, config, block_groups=groups)


def pretrain_reference(model, data, flow, config: smi.TrainConfig, eta_center=0.5):
    """Short fixed-influence run giving the constant-map initialisation."""
    eta = np.full(model.n_cuts, eta_center)
    lam, _ = smi.train_smi(model, data, flow, eta, config)
    return lam
