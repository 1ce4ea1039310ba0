"""Variational semi-modular inference with flow families and meta-posteriors.

The package fits the family of semi-modular posteriors indexed by influence
weights eta in [0,1]^C with normalizing-flow variational families trained by
a stop-gradient loss, approximates the whole family at once with a
meta-posterior (map or eta-conditioned flow), scores candidates with the
WAIC, and searches for the best influence vector.  A nested random-walk
Metropolis sampler and an analytic conjugate Gaussian toy provide ground
truth for every moving part.
"""

from . import autodiff, benchmarks, flows, models

__all__ = [
    "autodiff",
    "benchmarks",
    "flows",
    "mcmc",
    "meta",
    "models",
    "selection",
    "smi",
]


def __getattr__(name):
    if name in ("mcmc", "meta", "selection", "smi"):
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(name)
