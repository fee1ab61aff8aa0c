"""Feedback cooling of a continuously measured quantum harmonic oscillator.

Three mutually validating layers:

* :mod:`fbcool.analytic` — closed-form asymptotic energies, variances,
  optima and relaxation-rate regimes;
* :mod:`fbcool.moments` — exact linear moment ODE systems (fixed points,
  spectra, time integration);
* :mod:`fbcool.trajectory` — stochastic Gaussian-trajectory ensembles of
  the conditional dynamics.

:mod:`fbcool.classical` holds the noiseless classical warm-up model and
:mod:`fbcool.cli` a data-emitting command line front end (sweeps, figure
reproduction, consistency validation).
"""

__version__ = "0.1.0"

from . import analytic, classical, core, moments, trajectory
from .core import (
    DetectorState,
    GaussianState,
    ProtocolConfig,
    ProtocolKind,
    energy_expectation,
    make_protocol,
    with_bath,
)

__all__ = [
    "analytic",
    "classical",
    "core",
    "moments",
    "trajectory",
    "DetectorState",
    "GaussianState",
    "ProtocolConfig",
    "ProtocolKind",
    "energy_expectation",
    "make_protocol",
    "with_bath",
]
