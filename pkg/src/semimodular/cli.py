"""Batch front-end: configure, train, sample, score, search, export.

Subcommands: train, sample, select-eta, evaluate, mcmc.  Runs are configured
by a TOML file; every artifact a run writes (checkpoint, traces, manifest)
is reproducible byte-for-byte from the manifest's config and seeds.  Exit
codes: 0 success, 2 configuration or usage error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import checkpoints, mcmc, meta, selection, smi
from .autodiff import value_of
from .benchmarks import ConjugateGaussianToy, EpidemiologyModel, RandomEffectsModel, \
    load_epidemiology_data
from .flows import FlowConfig, SmiFlow
from .mcmc import ChainConfig, McmcError
from .models import DataBundle, DataError, DomainError, load_table
from .smi import TrainConfig, TrainingDivergence


class ConfigError(ValueError):
    pass


EXIT_CONFIG = 2
EXIT_DIVERGED = 3


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def read_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"invalid TOML in {path}: {err}") from err


def build_model(section):
    """Instantiate a model plus its data from the [model] config section."""
    if "name" not in section:
        raise ConfigError("[model] section needs a 'name' field")
    name = section["name"]
    if name == "toy_gaussian":
        model = ConjugateGaussianToy(
            s_z=section.get("s_z", 1.0), s_y=section.get("s_y", 1.0),
            v_phi=section.get("v_phi", 1.0), v_theta=section.get("v_theta", 1.0),
            true_phi=section.get("true_phi", 0.0),
            true_theta=section.get("true_theta", 1.0))
        if "z_data" in section or "y_data" in section:
            for key in ("z_data", "y_data"):
                if key not in section or not os.path.exists(section[key]):
                    raise ConfigError(f"[model] {key} must name an existing CSV")
            data = DataBundle(y={"y": load_table(section["y_data"])["y"]},
                              z={"z": load_table(section["z_data"])["z"]})
        else:
            rng = np.random.default_rng(section.get("data_seed", 0))
            data = model.simulate(rng, n_z=section.get("n_z", 20),
                                  n_y=section.get("n_y", 20))
    elif name == "epidemiology":
        model = EpidemiologyModel()
        path = section.get("data")
        if path is not None and not os.path.exists(path):
            raise ConfigError(f"[model] data file not found: {path}")
        data = load_epidemiology_data(path)
    elif name == "random_effects":
        model = RandomEffectsModel(n_groups=section.get("n_groups", 30),
                                   n_reps=section.get("n_reps", 5))
        if "data" in section:
            if not os.path.exists(section["data"]):
                raise ConfigError(f"[model] data file not found: {section['data']}")
            table = load_table(section["data"])
            data = DataBundle(y={k: table[k] for k in ("group", "replicate", "y")})
        else:
            data = model.simulate(np.random.default_rng(section.get("data_seed", 0)))
    else:
        raise ConfigError(f"unknown model {name!r}")
    return model, data


def build_flow(model, section, eta_dim=0):
    kind = section.get("kind", "spline")
    cfg = FlowConfig(
        kind=kind,
        layers=section.get("layers", 8 if kind == "spline" else 1),
        bins=section.get("bins", 8),
        bound=section.get("bound", 5.0),
        hidden=tuple(section.get("hidden", (32, 32))),
        eta_hidden=tuple(section.get("eta_hidden", (32, 32))),
        perm_seed=section.get("perm_seed", 0),
    )
    try:
        return SmiFlow(model.p_phi, model.p_theta, model.phi_domains,
                       model.theta_domains, config=cfg, eta_dim=eta_dim)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def build_train_config(section, seed_override=None):
    cfg = TrainConfig(
        steps=section.get("steps", 5000),
        mc_samples=section.get("mc_samples", 8),
        lr=section.get("lr", 1e-3),
        optimizer=section.get("optimizer", "adam"),
        seed=seed_override if seed_override is not None else section.get("seed", 0),
        convergence_window=section.get("convergence_window", 200),
        convergence_tol=section.get("convergence_tol", 1e-4),
        plateau_patience=section.get("plateau_patience", 0),
        minibatch_y=section.get("minibatch_y"),
        minibatch_z=section.get("minibatch_z"),
        lr_decay_at=tuple(section.get("lr_decay_at", ())),
        lr_decay_factor=section.get("lr_decay_factor", 0.1),
        average_tail=section.get("average_tail", 0.0),
    )
    try:
        cfg.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    return cfg


def parse_eta(text, n_cuts=None):
    try:
        eta = np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError as err:
        raise ConfigError(f"cannot parse influence vector {text!r}") from err
    if n_cuts is not None:
        if eta.size == 1 and n_cuts > 1:
            eta = np.full(n_cuts, eta[0])
        if eta.size != n_cuts:
            raise ConfigError(
                f"influence vector has {eta.size} components, model declares {n_cuts}")
    if np.any(eta < 0) or np.any(eta > 1):
        raise ConfigError("influence components must lie in [0, 1]")
    return eta


def parse_grid(text, n_cuts, base):
    """Per-dimension lattice counts; missing trailing dims default to 1
    (held at the base value)."""
    try:
        counts = [int(v) for v in text.split(",")]
    except ValueError as err:
        raise ConfigError(f"cannot parse grid counts {text!r}") from err
    if len(counts) > n_cuts or any(c < 1 for c in counts):
        raise ConfigError("grid counts must be positive, at most one per cut")
    counts = counts + [1] * (n_cuts - len(counts))
    axes = [np.linspace(0.0, 1.0, c) if c > 1 else np.array([base[i]])
            for i, c in enumerate(counts)]
    total = int(np.prod([len(a) for a in axes]))
    if total > 100_000:
        raise ConfigError(f"grid of {total} points is too large")
    return [np.array(pt) for pt in itertools.product(*axes)]


def _atomic_csv(path, header, rows):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def _manifest(out_dir, config, artifacts):
    doc = {"config": config, "artifacts": {}}
    for name, path in artifacts.items():
        with open(path, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        doc["artifacts"][name] = {"file": os.path.basename(path), "sha256": digest}
    checkpoints._atomic_write(os.path.join(out_dir, "manifest.json"),
                              json.dumps(doc, sort_keys=True, indent=2))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args):
    config = read_config(args.config)
    model, data = build_model(config.get("model", {}))
    train_section = dict(config.get("train", {}))
    mode = train_section.get("mode", "vmp-flow")
    if mode not in ("smi", "vmp-map", "vmp-flow"):
        raise ConfigError(f"unknown train mode {mode!r}")
    tcfg = build_train_config(train_section, seed_override=args.seed)
    vmp_section = config.get("vmp", {})
    os.makedirs(args.out, exist_ok=True)

    meta_doc = {"mode": mode, "model": config.get("model", {})}
    if mode == "smi":
        eta_field = args.eta or train_section.get("eta")
        if eta_field is None:
            raise ConfigError("smi mode needs an influence vector ([train] eta or --eta)")
        eta = parse_eta(eta_field if isinstance(eta_field, str)
                        else ",".join(str(v) for v in np.atleast_1d(eta_field)),
                        model.n_cuts)
        flow = build_flow(model, config.get("family", {}))
        store, trace = smi.train_smi(model, data, flow, eta, tcfg)
        arch = flow.arch_dict()
        meta_doc["eta"] = [float(v) for v in eta]
    elif mode == "vmp-flow":
        flow = build_flow(model, config.get("family", {}), eta_dim=model.n_cuts)
        family = meta.VmpFlowFamily(flow)
        vcfg = meta.VmpConfig(R=vmp_section.get("R", 8), a=vmp_section.get("a", 0.2))
        store, trace = meta.train_vmp(model, data, family, tcfg, vcfg)
        arch = flow.arch_dict()
        meta_doc["vmp"] = {"kind": "flow", "a": vcfg.a, "R": vcfg.R}
    else:  # vmp-map
        flow = build_flow(model, config.get("family", {}))
        vmap = meta.VmpMap(flow, eta_dim=model.n_cuts,
                           hidden=tuple(vmp_section.get("hidden", (16, 16))))
        pre_steps = vmp_section.get("pretrain_steps", 0)
        lam0 = None
        if pre_steps:
            pre_cfg = build_train_config({**train_section, "steps": pre_steps},
                                         seed_override=tcfg.seed)
            lam0 = meta.pretrain_reference(model, data, flow, pre_cfg)
        family = meta.VmpMapFamily(flow, vmap)
        vcfg = meta.VmpConfig(R=vmp_section.get("R", 8), a=vmp_section.get("a", 0.2))
        init = vmap.init_params(tcfg.seed, lam0=lam0)
        store, trace = meta.train_vmp(model, data, family, tcfg, vcfg, init=init)
        arch = {**flow.arch_dict(), "vmp_map": vmap.arch_dict()}
        meta_doc["vmp"] = {"kind": "map", "a": vcfg.a, "R": vcfg.R,
                           "hidden": list(vmap.hidden)}

    ck_path = os.path.join(args.out, "checkpoint.json")
    trace_path = os.path.join(args.out, "trace.csv")
    checkpoints.save_checkpoint(ck_path, store, arch, tcfg.seed, meta=meta_doc)
    smi.trace_to_csv(trace, trace_path + ".tmp")
    os.replace(trace_path + ".tmp", trace_path)
    _manifest(args.out, config, {"checkpoint": ck_path, "trace": trace_path})
    print(f"wrote {ck_path}")
    return 0


def _load_handle(path):
    """Rebuild the model, data and posterior handle from a checkpoint."""
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    ck = checkpoints.load_checkpoint(path)
    meta_doc = ck.get("meta", {})
    if "model" not in meta_doc:
        raise ConfigError("checkpoint lacks model metadata")
    model, data = build_model(meta_doc["model"])
    arch = ck["architecture"]
    flow = SmiFlow.from_arch({k: v for k, v in arch.items() if k != "vmp_map"})
    mode = meta_doc.get("mode", "smi")
    if mode == "smi":
        handle = selection.PosteriorHandle.from_smi(flow, ck["store"], model)
    elif mode == "vmp-flow":
        handle = selection.PosteriorHandle.from_vmp(
            meta.VmpFlowFamily(flow), ck["store"], model)
    elif mode == "vmp-map":
        vmap = meta.VmpMap(flow, eta_dim=arch["vmp_map"]["eta_dim"],
                           hidden=tuple(arch["vmp_map"]["hidden"]))
        handle = selection.PosteriorHandle.from_vmp(
            meta.VmpMapFamily(flow, vmap), ck["store"], model)
    else:
        raise ConfigError(f"checkpoint has unknown mode {mode!r}")
    return handle, data, ck, meta_doc


def cmd_sample(args):
    handle, data, ck, meta_doc = _load_handle(args.checkpoint)
    model = handle.model
    if args.eta is not None:
        eta = parse_eta(args.eta, model.n_cuts)
    elif meta_doc.get("mode") == "smi":
        eta = np.asarray(meta_doc.get("eta", np.ones(model.n_cuts)))
    else:
        raise ConfigError("meta-posterior checkpoints need --eta")
    if args.count < 0:
        raise ConfigError("count must be nonnegative")

    phi_names, theta_names = model.coordinate_names()
    header = phi_names + theta_names + [f"{n}_tilde" for n in theta_names] \
        + ["logq1", "logq2", "logq3", "logq"]
    rows = []
    if args.count:
        rng = np.random.default_rng(args.seed)
        eps = handle.draw_base(args.count, rng)
        sb = handle.sample_blocks(eta, eps, blocks=("phi", "theta", "theta_tilde"))
        phi = np.asarray(value_of(sb.phi))
        theta = np.asarray(value_of(sb.theta))
        tth = np.asarray(value_of(sb.theta_tilde))
        q1 = np.asarray(value_of(sb.logq1))
        q2 = np.asarray(value_of(sb.logq2))
        q3 = np.asarray(value_of(sb.logq3))
        for i in range(args.count):
            row = [repr(float(v)) for v in phi[i]] + \
                  [repr(float(v)) for v in theta[i]] + \
                  [repr(float(v)) for v in tth[i]] + \
                  [repr(float(q1[i])), repr(float(q2[i])), repr(float(q3[i])),
                   repr(float(q1[i] + q2[i] + q3[i]))]
            rows.append(row)
    _atomic_csv(args.out, header, rows)
    print(f"wrote {args.out}")
    return 0


def cmd_select_eta(args):
    handle, data, ck, meta_doc = _load_handle(args.checkpoint)
    if not handle.eta_responsive:
        raise ConfigError("select-eta needs a meta-posterior checkpoint")
    eta0, greedy_trace = selection.greedy_init(handle, data,
                                               n_samples=args.samples,
                                               seed=args.seed)
    search = selection.EtaSearchConfig(steps=args.steps, step_size=args.step_size,
                                       n_samples=args.samples, seed=args.seed + 1)
    eta_star, sgd_trace = selection.optimize_eta(handle, data, eta0, search)
    rng = np.random.default_rng(args.seed + 2)
    final = selection.waic(handle, data, eta_star, n_samples=args.samples, rng=rng)
    report = final.to_dict()
    report["eta"] = [float(v) for v in eta_star]
    report["trace"] = [{"stage": "greedy", **t} for t in greedy_trace] + \
                      [{"stage": "sgd", **t} for t in sgd_trace]
    report["eta_init"] = [float(v) for v in eta0]
    checkpoints._atomic_write(args.out, json.dumps(report, indent=2))
    print(f"wrote {args.out}")
    return 0


def cmd_evaluate(args):
    handle, data, ck, meta_doc = _load_handle(args.checkpoint)
    model = handle.model
    base = parse_eta(args.eta, model.n_cuts) if args.eta and args.grid \
        else np.ones(model.n_cuts)
    if args.grid:
        points = parse_grid(args.grid, model.n_cuts, base)
    elif args.eta:
        points = [parse_eta(part, model.n_cuts) for part in args.eta.split(";")]
    else:
        raise ConfigError("evaluate needs --eta or --grid")
    if not handle.eta_responsive and len(points) > 1:
        raise ConfigError("fixed-influence checkpoints evaluate a single point")

    rng = np.random.default_rng(args.seed)
    eps = handle.draw_base(args.samples, rng)
    header = [f"eta_{c + 1}" for c in range(model.n_cuts)] + ["neg_elpd_waic", "se"]
    if args.oracle:
        header.append("neg_elpd_true")
    rows = []
    for eta in points:
        rep = selection.waic(handle, data, eta, eps=eps)
        row = [repr(float(v)) for v in eta] + [repr(rep.neg_elpd), repr(rep.se)]
        if args.oracle:
            oracle = selection.elpd_true_oracle(
                handle, data, eta, rng=np.random.default_rng(args.seed + 1),
                n_rep=args.oracle_reps, eps=eps)
            row.append(repr(oracle.neg_elpd))
        rows.append(row)
    _atomic_csv(args.out, header, rows)
    print(f"wrote {args.out}")
    return 0


def cmd_mcmc(args):
    config = read_config(args.config)
    model, data = build_model(config.get("model", {}))
    eta = parse_eta(args.eta, model.n_cuts) if args.eta else np.ones(model.n_cuts)
    section = config.get("mcmc", {})
    ccfg = ChainConfig(
        outer_steps=section.get("outer_steps", 40_000),
        burn_in=section.get("burn_in", 10_000),
        thin=section.get("thin", 20),
        inner_steps=section.get("inner_steps", 100),
        chains=section.get("chains", 4),
        seed=args.seed if args.seed is not None else section.get("seed", 0),
    )
    try:
        ccfg.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err
    samples = mcmc.nested_smi_sample(model, data, eta, ccfg)
    tmp = args.out + ".tmp"
    mcmc.samples_to_csv(samples, model, tmp)
    os.replace(tmp, args.out)
    print(f"wrote {args.out} (outer acceptance {samples.outer_accept_rate:.2f})")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def make_parser():
    parser = argparse.ArgumentParser(
        prog="semimodular",
        description="Variational semi-modular inference: train, sample, score, search.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a posterior or meta-posterior")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--eta", default=None, help="comma-separated influence vector")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw from a fitted checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eta", default=None)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("select-eta", help="greedy + gradient search for the best influence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_select_eta)

    p = sub.add_parser("evaluate", help="predictive scores over influence points")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eta", default=None,
                   help="semicolon-separated list of comma-vectors, or the grid base point")
    p.add_argument("--grid", default=None, help="comma-separated per-dim lattice counts")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--oracle", action="store_true",
                   help="add the true-model score column (synthetic models)")
    p.add_argument("--oracle-reps", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mcmc", help="nested-MCMC ground-truth sampling")
    p.add_argument("--config", required=True)
    p.add_argument("--eta", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mcmc)
    return parser


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError, DomainError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, McmcError) as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
