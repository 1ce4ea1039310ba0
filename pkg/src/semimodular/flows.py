"""Flow-based and mean-field variational families.

A family is a composed diffeomorphism over three base-noise blocks: an
unconditional transform for the shared parameters, a conditional transform
(conditioned on the first noise block) for the analysis-stage parameters, and
a structural clone of the conditional transform for the auxiliary copy used
at the imputation stage.  The Jacobian of the composed map is block lower
triangular, so the log-determinant splits into per-block terms and cross
gradients between block parameter vectors vanish structurally.

Three family kinds share one surface:

* ``spline``    rational-quadratic spline transformers with perceptron
                conditioners arranged in coupling layers (the default),
* ``affine``    diagonal location-scale with a linear conditioner; exact for
                jointly Gaussian targets, used heavily by the oracle tests,
* ``meanfield`` diagonal location-scale with no cross-block conditioning.

Every forward computation runs equally on plain numpy arrays (fast sampling)
or on autodiff nodes (training), because all arithmetic goes through the
dispatch ops in :mod:`semimodular.autodiff`.  Inverse passes are plain-numpy
only; they back density evaluation and the round-trip tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import value_of

MIN_BIN_FRACTION = 1e-3
MIN_DERIVATIVE = 1e-3
# softplus(_DERIV_OFFSET) + MIN_DERIVATIVE == 1, so zero raw output gives the
# identity spline exactly.
_DERIV_OFFSET = math.log(math.expm1(1.0 - MIN_DERIVATIVE))

DOMAIN_KINDS = ("unbounded", "positive", "unit")


# ---------------------------------------------------------------------------
# rational-quadratic spline transformer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplineParams:
    """Monotone rational-quadratic spline on [-bound, bound].

    `widths` and `heights` are the K bin sizes (each summing to 2*bound);
    `interior_derivs` are the K-1 strictly positive knot derivatives.  The
    boundary derivatives are pinned to 1 so the spline continues as the
    identity outside the interval.  Invalid parameters fail here, at
    construction, never at evaluation time.
    """

    widths: np.ndarray
    heights: np.ndarray
    interior_derivs: np.ndarray
    bound: float

    def __post_init__(self):
        w = np.asarray(self.widths, dtype=np.float64)
        h = np.asarray(self.heights, dtype=np.float64)
        d = np.asarray(self.interior_derivs, dtype=np.float64)
        if self.bound <= 0:
            raise ValueError("spline bound must be positive")
        if w.ndim != 1 or h.shape != w.shape:
            raise ValueError("widths and heights must be 1-d and equal length")
        if d.shape != (w.size - 1,):
            raise ValueError("need K-1 interior derivatives for K bins")
        if np.any(w <= 0) or np.any(h <= 0):
            raise ValueError("bin widths and heights must be strictly positive")
        if np.any(d <= 0):
            raise ValueError("knot derivatives must be strictly positive")
        span = 2.0 * self.bound
        if not (math.isclose(w.sum(), span, rel_tol=1e-8) and math.isclose(h.sum(), span, rel_tol=1e-8)):
            raise ValueError("widths and heights must each sum to 2*bound")
        object.__setattr__(self, "widths", w)
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "interior_derivs", d)

    @property
    def num_bins(self):
        return self.widths.size

    def full_derivs(self):
        return np.concatenate([[1.0], self.interior_derivs, [1.0]])

    @classmethod
    def identity(cls, num_bins=8, bound=5.0):
        span = 2.0 * bound / num_bins
        return cls(
            widths=np.full(num_bins, span),
            heights=np.full(num_bins, span),
            interior_derivs=np.ones(num_bins - 1),
            bound=bound,
        )


def _gather_last(t, idx):
    """Gather along the last axis with an index of one fewer dimension."""
    out = ad.take_along(t, idx[..., None], axis=-1)
    return ad.reshape(out, idx.shape)


def _rqs_core_forward(x, widths, heights, derivs, bound):
    """Spline forward on the clipped input; caller handles the tails.

    x: (...,); widths/heights: (..., K); derivs: (..., K+1).  Returns the
    transformed value and the log-derivative, both (...,).
    """
    xv = np.clip(value_of(x), -bound, bound)
    inside = np.abs(value_of(x)) <= bound
    xc = ad.where(inside, x, xv)  # clip, keeping gradient on interior lanes

    kx = ad.concat([np.full(value_of(widths).shape[:-1] + (1,), -bound),
                    ad.add(ad.cumsum(widths, axis=-1), -bound)], axis=-1)
    ky = ad.concat([np.full(value_of(heights).shape[:-1] + (1,), -bound),
                    ad.add(ad.cumsum(heights, axis=-1), -bound)], axis=-1)

    kxv = value_of(kx)
    idx = np.sum(kxv[..., 1:-1] <= xv[..., None], axis=-1)

    xk = _gather_last(kx, idx)
    yk = _gather_last(ky, idx)
    wk = _gather_last(widths, idx)
    hk = _gather_last(heights, idx)
    dk = _gather_last(derivs, idx)
    dk1 = _gather_last(derivs, idx + 1)

    xi = ad.div(ad.sub(xc, xk), wk)
    s = ad.div(hk, wk)
    omx = ad.sub(1.0, xi)
    cross = ad.mul(xi, omx)
    slope_gap = ad.sub(ad.add(dk1, dk), ad.mul(2.0, s))
    denom = ad.add(s, ad.mul(slope_gap, cross))

    numer_y = ad.add(ad.mul(s, ad.mul(xi, xi)), ad.mul(dk, cross))
    y = ad.add(yk, ad.div(ad.mul(hk, numer_y), denom))

    numer_d = ad.mul(ad.mul(s, s),
                     ad.add(ad.add(ad.mul(dk1, ad.mul(xi, xi)),
                                   ad.mul(ad.mul(2.0, s), cross)),
                            ad.mul(dk, ad.mul(omx, omx))))
    log_deriv = ad.sub(ad.log(numer_d), ad.mul(2.0, ad.log(denom)))
    return y, log_deriv, inside


def rqs_batch_forward(x, widths, heights, derivs, bound):
    """Vectorised spline with identity linear tails outside [-bound, bound]."""
    y_in, ld_in, inside = _rqs_core_forward(x, widths, heights, derivs, bound)
    y = ad.where(inside, y_in, x)
    log_deriv = ad.where(inside, ld_in, np.zeros(np.shape(value_of(x))))
    return y, log_deriv


def rqs_batch_inverse(y, widths, heights, derivs, bound):
    """Analytic spline inverse (plain numpy); returns x and the *forward*
    log-derivative evaluated at x, which the caller negates as needed."""
    y = np.asarray(value_of(y), dtype=np.float64)
    widths = np.asarray(value_of(widths), dtype=np.float64)
    heights = np.asarray(value_of(heights), dtype=np.float64)
    derivs = np.asarray(value_of(derivs), dtype=np.float64)

    inside = np.abs(y) <= bound
    yv = np.clip(y, -bound, bound)

    kx = np.concatenate([np.full(widths.shape[:-1] + (1,), -bound),
                         np.cumsum(widths, axis=-1) - bound], axis=-1)
    ky = np.concatenate([np.full(heights.shape[:-1] + (1,), -bound),
                         np.cumsum(heights, axis=-1) - bound], axis=-1)
    idx = np.sum(ky[..., 1:-1] <= yv[..., None], axis=-1)

    def gather(t, i):
        return np.take_along_axis(t, i[..., None], axis=-1)[..., 0]

    xk = gather(kx, idx)
    yk = gather(ky, idx)
    wk = gather(widths, idx)
    hk = gather(heights, idx)
    dk = gather(derivs, idx)
    dk1 = gather(derivs, idx + 1)

    s = hk / wk
    delta = yv - yk
    gap = dk1 + dk - 2.0 * s
    a = hk * (s - dk) + delta * gap
    b = hk * dk - delta * gap
    c = -s * delta
    disc = b * b - 4.0 * a * c
    xi = 2.0 * c / (-b - np.sqrt(np.maximum(disc, 0.0)))
    x = xk + xi * wk

    cross = xi * (1.0 - xi)
    denom = s + gap * cross
    numer_d = s * s * (dk1 * xi * xi + 2.0 * s * cross + dk * (1.0 - xi) ** 2)
    log_deriv = np.log(numer_d) - 2.0 * np.log(denom)

    x = np.where(inside, x, y)
    log_deriv = np.where(inside, log_deriv, 0.0)
    return x, log_deriv


def rqs_forward(x, params: SplineParams):
    """Single-spline forward map: returns (y, log dy/dx)."""
    x = np.asarray(value_of(x), dtype=np.float64)
    shape = x.shape + (params.num_bins,)
    w = np.broadcast_to(params.widths, shape)
    h = np.broadcast_to(params.heights, shape)
    d = np.broadcast_to(params.full_derivs(), x.shape + (params.num_bins + 1,))
    y, ld = rqs_batch_forward(x, w, h, d, params.bound)
    return value_of(y), value_of(ld)


def rqs_inverse(y, params: SplineParams):
    """Single-spline inverse map: returns (x, log dx/dy)."""
    y = np.asarray(value_of(y), dtype=np.float64)
    shape = y.shape + (params.num_bins,)
    w = np.broadcast_to(params.widths, shape)
    h = np.broadcast_to(params.heights, shape)
    d = np.broadcast_to(params.full_derivs(), y.shape + (params.num_bins + 1,))
    x, ld_forward = rqs_batch_inverse(y, w, h, d, params.bound)
    return x, -ld_forward


def spline_params_from_raw(raw, num_bins, bound):
    """Map raw conditioner outputs (..., 3K-1) onto valid spline parameters.

    Positivity comes from softmax/softplus; widths and heights are normalised
    to fill [-bound, bound].  Zero raw input yields the identity spline.
    """
    K = num_bins
    w_raw = raw[..., :K] if ad.is_node(raw) else np.asarray(raw)[..., :K]
    h_raw = raw[..., K:2 * K] if ad.is_node(raw) else np.asarray(raw)[..., K:2 * K]
    d_raw = raw[..., 2 * K:] if ad.is_node(raw) else np.asarray(raw)[..., 2 * K:]

    def normalise(z):
        m = np.max(value_of(z), axis=-1, keepdims=True)
        e = ad.exp(ad.sub(z, m))
        tot = ad.vsum(e, axis=-1)
        frac = ad.div(e, ad.reshape(tot, np.shape(value_of(tot)) + (1,)))
        frac = ad.add(ad.mul(1.0 - K * MIN_BIN_FRACTION, frac), MIN_BIN_FRACTION)
        return ad.mul(2.0 * bound, frac)

    widths = normalise(w_raw)
    heights = normalise(h_raw)
    interior = ad.add(ad.softplus(ad.add(d_raw, _DERIV_OFFSET)), MIN_DERIVATIVE)
    one = np.ones(np.shape(value_of(interior))[:-1] + (1,))
    derivs = ad.concat([one, interior, one], axis=-1)
    return widths, heights, derivs


def conditioner_apply(x_inputs, shared, weights, layout, prefix, num_bins, bound):
    """Run a perceptron conditioner and return per-coordinate SplineParams.

    `x_inputs` are the untransformed coordinates (may be empty), `shared` the
    common conditioning variables (may be None).  Plain-numpy entry point for
    inspection and tests; layer forward passes use the raw path directly.
    """
    parts = []
    if x_inputs is not None and np.size(x_inputs):
        parts.append(np.atleast_2d(np.asarray(x_inputs, dtype=np.float64)))
    if shared is not None and np.size(shared):
        parts.append(np.atleast_2d(np.asarray(shared, dtype=np.float64)))
    batch = parts[0].shape[0] if parts else 1
    u = np.concatenate(parts, axis=-1) if parts else np.zeros((batch, 0))
    raw = mlp_apply(weights, layout, prefix, u)
    m = raw.shape[-1] // (3 * num_bins - 1)
    raw = raw.reshape(batch, m, 3 * num_bins - 1)
    w, h, d = spline_params_from_raw(raw, num_bins, bound)
    out = []
    for b in range(batch):
        row = []
        for i in range(m):
            row.append(SplineParams(w[b, i], h[b, i], d[b, i, 1:-1], bound))
        out.append(row)
    return out[0] if batch == 1 else out


# ---------------------------------------------------------------------------
# perceptrons
# ---------------------------------------------------------------------------

def mlp_layout(prefix, in_dim, hidden, out_dim):
    dims = [in_dim] + list(hidden) + [out_dim]
    entries = []
    for i in range(len(dims) - 1):
        entries.append((f"{prefix}.W{i}", (dims[i], dims[i + 1])))
        entries.append((f"{prefix}.b{i}", (dims[i + 1],)))
    return entries


def mlp_apply(params, layout_index, prefix, u):
    """Forward pass; tanh between layers, linear output head."""
    i = 0
    h = u
    while f"{prefix}.W{i}" in layout_index:
        W = params[f"{prefix}.W{i}"]
        b = params[f"{prefix}.b{i}"]
        h = ad.add(ad.dot(h, W), b)
        i += 1
        if f"{prefix}.W{i}" in layout_index:
            h = ad.tanh(h)
    return h


def unflatten_layout(vec, layout):
    """Split a flat vector (array or node) into named shaped parts."""
    out = {}
    pos = 0
    for name, shape in layout:
        n = int(np.prod(shape))
        part = vec[pos:pos + n] if ad.is_node(vec) else np.asarray(vec)[pos:pos + n]
        out[name] = ad.reshape(part, shape)
        pos += n
    return out


def _init_mlp(rng, layout, prefix, out):
    """Random tanh-scaled hidden layers; zero-weighted final layer so the
    initial map is exactly the identity transform."""
    names = [n for n, _ in layout if n.startswith(prefix + ".W")]
    last = max(int(n.rsplit("W", 1)[1]) for n in names)
    for name, shape in layout:
        if not name.startswith(prefix + "."):
            continue
        if name.endswith(f"W{last}") or name.endswith(f"b{last}"):
            out[name] = np.zeros(shape)
        elif ".W" in name:
            fan_in = max(shape[0], 1)
            out[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
        else:
            out[name] = np.zeros(shape)


# ---------------------------------------------------------------------------
# domain maps
# ---------------------------------------------------------------------------

def domain_map(kind, x):
    """Map an unconstrained value onto a coordinate domain.

    Returns (constrained value, log-derivative).  positive -> softplus,
    unit -> logistic sigmoid, unbounded -> identity.
    """
    if kind == "unbounded":
        return x, ad.mul(0.0, x)
    if kind == "positive":
        return ad.softplus(x), ad.neg(ad.softplus(ad.neg(x)))
    if kind == "unit":
        y = ad.sigmoid(x)
        return y, ad.neg(ad.add(ad.softplus(x), ad.softplus(ad.neg(x))))
    raise ValueError(f"unknown domain kind {kind!r}")


def domain_map_inverse(kind, y):
    y = np.asarray(value_of(y), dtype=np.float64)
    if kind == "unbounded":
        return y
    if kind == "positive":
        # softplus^-1, written to stay finite for large y
        return y + np.log(-np.expm1(-y))
    if kind == "unit":
        return np.log(y) - np.log1p(-y)
    raise ValueError(f"unknown domain kind {kind!r}")


def apply_domain_maps(x, domains):
    kinds = np.asarray(domains)
    if np.all(kinds == "unbounded"):
        return x, np.zeros(np.shape(value_of(x)))
    pos = kinds == "positive"
    unit = kinds == "unit"
    sp_x = ad.softplus(x)
    sp_nx = ad.softplus(ad.neg(x))
    y = ad.where(pos, sp_x, ad.where(unit, ad.sigmoid(x), x))
    zeros = np.zeros(np.shape(value_of(x)))
    ld = ad.where(pos, ad.neg(sp_nx),
                  ad.where(unit, ad.neg(ad.add(sp_x, sp_nx)), zeros))
    return y, ld


def invert_domain_maps(y, domains):
    kinds = np.asarray(domains)
    y = np.asarray(value_of(y), dtype=np.float64)
    x = y.copy()
    for kind in ("positive", "unit"):
        mask = kinds == kind
        if mask.any():
            x[..., mask] = domain_map_inverse(kind, y[..., mask])
    return x


# ---------------------------------------------------------------------------
# flow blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FlowConfig:
    """Architecture knobs shared by all blocks of one family.

    Defaults follow the reference setup used throughout: eight coupling
    layers, 8 spline bins on [-5, 5], perceptron conditioners with two
    32-unit hidden layers.
    """

    kind: str = "spline"
    layers: int = 8
    bins: int = 8
    bound: float = 5.0
    hidden: tuple = (32, 32)
    eta_hidden: tuple = (32, 32)
    perm_seed: int = 0

    def to_dict(self):
        return {
            "kind": self.kind,
            "layers": self.layers,
            "bins": self.bins,
            "bound": self.bound,
            "hidden": list(self.hidden),
            "eta_hidden": list(self.eta_hidden),
            "perm_seed": self.perm_seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (32, 32)))
        d["eta_hidden"] = tuple(d.get("eta_hidden", (32, 32)))
        return cls(**d)


def _coupling_permutations(dim, layers, seed):
    """Seeded permutations, resampled until every coordinate is transformed
    at least once across the composed layers."""
    rng = np.random.default_rng(seed)
    d = dim // 2
    for _ in range(1000):
        perms = [rng.permutation(dim) for _ in range(layers)]
        covered = set()
        for p in perms:
            covered.update(p[d:].tolist())
        if len(covered) == dim:
            return perms
    raise RuntimeError("could not find covering permutations")


class FlowBlock:
    """One diffeomorphism block (T1 or T2) plus its domain map."""

    def __init__(self, dim, cond_dim, domains, config: FlowConfig, eta_dim=0, name="t"):
        if len(domains) != dim:
            raise ValueError("one domain kind per coordinate required")
        for k in domains:
            if k not in DOMAIN_KINDS:
                raise ValueError(f"unknown domain kind {k!r}")
        if config.kind not in ("spline", "affine", "meanfield"):
            raise ValueError(f"unknown family kind {config.kind!r}")
        if config.kind == "meanfield" and eta_dim:
            raise ValueError("mean-field blocks have no influence conditioner")
        self.dim = dim
        self.cond_dim = cond_dim
        self.eta_dim = eta_dim
        self.domains = tuple(domains)
        self.config = config
        self.name = name
        self._build_layout()

    def _build_layout(self):
        cfg = self.config
        lam, mu = [], []
        if cfg.kind == "spline":
            self.split = self.dim // 2
            m = self.dim - self.split
            out = m * (3 * cfg.bins - 1)
            in_dim = self.split + self.cond_dim
            self.perms = _coupling_permutations(self.dim, cfg.layers, cfg.perm_seed)
            self.inv_perms = [np.argsort(p) for p in self.perms]
            for layer in range(cfg.layers):
                lam.extend(mlp_layout(f"L{layer}.c", in_dim, cfg.hidden, out))
                if self.eta_dim:
                    mu.extend(mlp_layout(f"L{layer}.e", self.eta_dim, cfg.eta_hidden, out))
        elif cfg.kind == "affine":
            lam.append(("loc", (self.dim,)))
            lam.append(("logscale", (self.dim,)))
            if self.cond_dim:
                lam.append(("W", (self.cond_dim, self.dim)))
            if self.eta_dim:
                mu.append(("Weta", (self.eta_dim, self.dim)))
        else:  # meanfield
            lam.append(("loc", (self.dim,)))
            lam.append(("logscale", (self.dim,)))
        self.lambda_layout = lam
        self.mu_layout = mu
        self.lambda_size = sum(int(np.prod(s)) for _, s in lam)
        self.mu_size = sum(int(np.prod(s)) for _, s in mu)
        self._lam_index = {n: None for n, _ in lam}
        self._mu_index = {n: None for n, _ in mu}

    def _unflatten(self, vec, layout):
        return unflatten_layout(vec, layout)

    def init_lambda(self, rng):
        out = {}
        if self.config.kind == "spline":
            for layer in range(self.config.layers):
                _init_mlp(rng, self.lambda_layout, f"L{layer}.c", out)
        else:
            for name, shape in self.lambda_layout:
                out[name] = np.zeros(shape)
        return np.concatenate([out[n].ravel() for n, _ in self.lambda_layout]) \
            if self.lambda_layout else np.zeros(0)

    def init_mu(self, rng):
        out = {}
        if self.config.kind == "spline":
            for layer in range(self.config.layers):
                _init_mlp(rng, self.mu_layout, f"L{layer}.e", out)
        else:
            for name, shape in self.mu_layout:
                out[name] = np.zeros(shape)
        return np.concatenate([out[n].ravel() for n, _ in self.mu_layout]) \
            if self.mu_layout else np.zeros(0)

    # -- forward -----------------------------------------------------------

    def _layer_raw(self, params, mu_params, layer, xa, cond, eta, batch):
        parts = []
        if self.split:
            parts.append(xa)
        if self.cond_dim:
            parts.append(cond)
        u = ad.concat(parts, axis=-1) if parts else np.zeros((batch, 0))
        raw = mlp_apply(params, self._lam_index, f"L{layer}.c", u)
        if self.eta_dim:
            eta2 = ad.reshape(eta, (1, self.eta_dim)) if np.shape(value_of(eta)) == (self.eta_dim,) else eta
            raw = ad.add(raw, mlp_apply(mu_params, self._mu_index, f"L{layer}.e", eta2))
        return raw

    def forward(self, lam, eps, cond=None, eta=None, mu=None):
        """Transform base noise into constrained parameters.

        eps: (batch, dim). cond: (batch, cond_dim) or None. Returns
        (value (batch, dim), logdet (batch,)) including domain-map terms.
        """
        cfg = self.config
        batch = np.shape(value_of(eps))[0]
        logdet = np.zeros(batch)
        if cfg.kind == "spline":
            params = self._unflatten(lam, self.lambda_layout)
            mu_params = self._unflatten(mu, self.mu_layout) if self.eta_dim else None
            x = eps
            d = self.split
            m = self.dim - d
            for layer in range(cfg.layers):
                z = ad.take(x, self.perms[layer], axis=-1)
                xa = z[..., :d] if ad.is_node(z) else np.asarray(z)[..., :d]
                xb = z[..., d:] if ad.is_node(z) else np.asarray(z)[..., d:]
                raw = self._layer_raw(params, mu_params, layer, xa, cond, eta, batch)
                raw = ad.reshape(raw, (batch, m, 3 * cfg.bins - 1))
                w, h, dv = spline_params_from_raw(raw, cfg.bins, cfg.bound)
                yb, ld = rqs_batch_forward(xb, w, h, dv, cfg.bound)
                x = ad.take(ad.concat([xa, yb], axis=-1), self.inv_perms[layer], axis=-1)
                logdet = ad.add(logdet, ad.vsum(ld, axis=-1))
        else:
            params = self._unflatten(lam, self.lambda_layout)
            u = ad.add(params["loc"], ad.mul(eps, ad.exp(params["logscale"])))
            if cfg.kind == "affine" and self.cond_dim:
                u = ad.add(u, ad.dot(cond, params["W"]))
            if cfg.kind == "affine" and self.eta_dim:
                mu_params = self._unflatten(mu, self.mu_layout)
                eta2 = ad.reshape(eta, (1, self.eta_dim)) if np.shape(value_of(eta)) == (self.eta_dim,) else eta
                u = ad.add(u, ad.dot(eta2, mu_params["Weta"]))
            x = u
            logdet = ad.add(logdet, ad.vsum(params["logscale"]))
        y, dld = apply_domain_maps(x, self.domains)
        logdet = ad.add(logdet, ad.vsum(dld, axis=-1))
        return y, logdet

    # -- inverse (plain numpy) ----------------------------------------------

    def inverse(self, lam, y, cond=None, eta=None, mu=None):
        """Recover base noise from constrained values; plain arrays only.

        Returns (eps, logdet) where logdet is the *forward* log|J| at eps.
        """
        cfg = self.config
        y = np.asarray(value_of(y), dtype=np.float64)
        lam = np.asarray(value_of(lam), dtype=np.float64)
        batch = y.shape[0]
        x = invert_domain_maps(y, self.domains)
        _, dld = apply_domain_maps(x, self.domains)
        logdet = np.sum(value_of(dld), axis=-1)
        if cfg.kind == "spline":
            params = self._unflatten(lam, self.lambda_layout)
            mu_params = self._unflatten(value_of(mu), self.mu_layout) if self.eta_dim else None
            d = self.split
            m = self.dim - d
            for layer in reversed(range(cfg.layers)):
                z = np.take(x, self.perms[layer], axis=-1)
                xa, yb = z[..., :d], z[..., d:]
                raw = self._layer_raw(params, mu_params, layer, xa, cond, eta, batch)
                raw = np.reshape(value_of(raw), (batch, m, 3 * cfg.bins - 1))
                w, h, dv = spline_params_from_raw(raw, cfg.bins, cfg.bound)
                xb, ld = rqs_batch_inverse(yb, value_of(w), value_of(h), value_of(dv), cfg.bound)
                x = np.take(np.concatenate([xa, xb], axis=-1), self.inv_perms[layer], axis=-1)
                logdet = logdet + np.sum(ld, axis=-1)
        else:
            params = self._unflatten(lam, self.lambda_layout)
            u = x - params["loc"]
            if cfg.kind == "affine" and self.cond_dim:
                u = u - np.matmul(np.asarray(value_of(cond)), params["W"])
            if cfg.kind == "affine" and self.eta_dim:
                mu_params = self._unflatten(value_of(mu), self.mu_layout)
                eta2 = np.reshape(value_of(eta), (1, self.eta_dim)) if np.shape(value_of(eta)) == (self.eta_dim,) else value_of(eta)
                u = u - np.matmul(eta2, mu_params["Weta"])
            x = u * np.exp(-params["logscale"])
            logdet = logdet + np.sum(params["logscale"])
        return x, logdet


# ---------------------------------------------------------------------------
# the composed three-block transform
# ---------------------------------------------------------------------------

@dataclass
class ParamPoint:
    """A concrete draw in model-parameter space."""

    phi: np.ndarray
    theta: np.ndarray
    theta_tilde: np.ndarray


@dataclass
class SampleBlocks:
    """Per-block outputs of one forward pass (arrays or tape nodes)."""

    phi: object = None
    theta: object = None
    theta_tilde: object = None
    logq1: object = None
    logq2: object = None
    logq3: object = None

    def logq_total(self):
        return ad.add(ad.add(self.logq1, self.logq2), self.logq3)


LOG_2PI = math.log(2.0 * math.pi)


def base_logpdf(eps):
    """Independent standard normal base density, summed over coordinates."""
    eps = np.asarray(value_of(eps), dtype=np.float64)
    return -0.5 * np.sum(eps * eps + LOG_2PI, axis=-1)


class SmiFlow:
    """Composed transform T = (T1, T2, T2-clone) with base distribution.

    T1 maps eps1 to the shared block; T2 maps eps2 (conditioned on eps1) to
    the analysis block; an identically shaped clone with its own parameters
    maps eps3 to the auxiliary imputation block.  With eta_dim > 0 every
    conditioner also receives the influence vector through a second additive
    conditioner whose weights live in separate mu blocks; zeroing those
    recovers the plain family exactly.
    """

    def __init__(self, p_phi, p_theta, phi_domains, theta_domains,
                 config: FlowConfig = FlowConfig(), eta_dim=0):
        self.p_phi = p_phi
        self.p_theta = p_theta
        self.config = config
        self.eta_dim = eta_dim
        cond = 0 if config.kind == "meanfield" else p_phi
        self.t1 = FlowBlock(p_phi, 0, phi_domains, config, eta_dim, name="t1")
        self.t2 = FlowBlock(p_theta, cond, theta_domains, config, eta_dim, name="t2")

    # -- layout --------------------------------------------------------------

    @property
    def lambda_sizes(self):
        return {"lambda1": self.t1.lambda_size,
                "lambda2": self.t2.lambda_size,
                "lambda3": self.t2.lambda_size}

    def block_names(self):
        names = ["lambda1", "lambda2", "lambda3"]
        if self.eta_dim:
            names += ["mu1", "mu2", "mu3"]
        return names

    def init_params(self, seed=0):
        rng = np.random.default_rng(seed)
        blocks = {
            "lambda1": self.t1.init_lambda(rng),
            "lambda2": self.t2.init_lambda(rng),
            "lambda3": self.t2.init_lambda(rng),
        }
        if self.eta_dim:
            blocks["mu1"] = self.t1.init_mu(rng)
            blocks["mu2"] = self.t2.init_mu(rng)
            blocks["mu3"] = self.t2.init_mu(rng)
        return ad.ParameterStore(blocks)

    def draw_base(self, n, rng):
        return {
            "eps1": rng.standard_normal((n, self.p_phi)),
            "eps2": rng.standard_normal((n, self.p_theta)),
            "eps3": rng.standard_normal((n, self.p_theta)),
        }

    # -- forward --------------------------------------------------------------

    def sample_blocks(self, params, eps, eta=None, blocks=("phi", "theta", "theta_tilde")):
        """Forward pass through the requested blocks.

        `params` maps block names to vectors (arrays or tape nodes); `eps`
        holds base draws.  log q per block is base log density minus the
        block log-determinant.
        """
        get = params.get if isinstance(params, dict) else params.__getitem__
        need_eta = self.eta_dim > 0
        out = SampleBlocks()
        if "phi" in blocks:
            phi, ld1 = self.t1.forward(get("lambda1"), eps["eps1"], cond=None,
                                       eta=eta if need_eta else None,
                                       mu=get("mu1") if need_eta else None)
            out.phi = phi
            out.logq1 = ad.sub(base_logpdf(eps["eps1"]), ld1)
        cond = None if self.config.kind == "meanfield" else eps["eps1"]
        if "theta" in blocks:
            theta, ld2 = self.t2.forward(get("lambda2"), eps["eps2"], cond=cond,
                                         eta=eta if need_eta else None,
                                         mu=get("mu2") if need_eta else None)
            out.theta = theta
            out.logq2 = ad.sub(base_logpdf(eps["eps2"]), ld2)
        if "theta_tilde" in blocks:
            ttheta, ld3 = self.t2.forward(get("lambda3"), eps["eps3"], cond=cond,
                                          eta=eta if need_eta else None,
                                          mu=get("mu3") if need_eta else None)
            out.theta_tilde = ttheta
            out.logq3 = ad.sub(base_logpdf(eps["eps3"]), ld3)
        return out

    def sample(self, params, n, rng, eta=None):
        """Plain fast-path sampling: n iid draws plus per-block log q."""
        eps = self.draw_base(n, rng)
        sb = self.sample_blocks(params, eps, eta=eta)
        point = ParamPoint(value_of(sb.phi), value_of(sb.theta), value_of(sb.theta_tilde))
        return point, value_of(sb.logq_total()), (
            value_of(sb.logq1), value_of(sb.logq2), value_of(sb.logq3))

    def log_density(self, params, phi, theta, theta_tilde=None, eta=None):
        """Density evaluation at given points via the inverse pass (plain)."""
        get = params.get if isinstance(params, dict) else params.__getitem__
        need_eta = self.eta_dim > 0
        phi = np.atleast_2d(np.asarray(value_of(phi), dtype=np.float64))
        theta = np.atleast_2d(np.asarray(value_of(theta), dtype=np.float64))
        eps1, ld1 = self.t1.inverse(get("lambda1"), phi, cond=None,
                                    eta=eta if need_eta else None,
                                    mu=get("mu1") if need_eta else None)
        cond = None if self.config.kind == "meanfield" else eps1
        logq1 = base_logpdf(eps1) - ld1
        eps2, ld2 = self.t2.inverse(get("lambda2"), theta, cond=cond,
                                    eta=eta if need_eta else None,
                                    mu=get("mu2") if need_eta else None)
        logq2 = base_logpdf(eps2) - ld2
        total = logq1 + logq2
        logq3 = None
        if theta_tilde is not None:
            ttheta = np.atleast_2d(np.asarray(value_of(theta_tilde), dtype=np.float64))
            eps3, ld3 = self.t2.inverse(get("lambda3"), ttheta, cond=cond,
                                        eta=eta if need_eta else None,
                                        mu=get("mu3") if need_eta else None)
            logq3 = base_logpdf(eps3) - ld3
            total = total + logq3
        return total, (logq1, logq2, logq3)

    # -- checkpointing ---------------------------------------------------------

    def arch_dict(self):
        return {
            "p_phi": self.p_phi,
            "p_theta": self.p_theta,
            "phi_domains": list(self.t1.domains),
            "theta_domains": list(self.t2.domains),
            "eta_dim": self.eta_dim,
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_arch(cls, arch):
        return cls(
            p_phi=int(arch["p_phi"]),
            p_theta=int(arch["p_theta"]),
            phi_domains=tuple(arch["phi_domains"]),
            theta_domains=tuple(arch["theta_domains"]),
            config=FlowConfig.from_dict(arch["config"]),
            eta_dim=int(arch["eta_dim"]),
        )


def meanfield_family(p_phi, p_theta, phi_domains, theta_domains):
    """Fully factorised location-scale family with the SmiFlow surface."""
    return SmiFlow(p_phi, p_theta, phi_domains, theta_domains,
                   config=FlowConfig(kind="meanfield", layers=1))


def affine_family(p_phi, p_theta, phi_domains, theta_domains, eta_dim=0):
    """Location-scale family with linear cross-block conditioning; contains
    every jointly Gaussian target with affine conditionals."""
    return SmiFlow(p_phi, p_theta, phi_domains, theta_domains,
                   config=FlowConfig(kind="affine", layers=1), eta_dim=eta_dim)
