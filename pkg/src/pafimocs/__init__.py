"""Particle filtered tracking of template motion with sparse illumination change.

The package splits into small layers: ``models`` holds the state types and
transition kernels, ``dictionary`` the polynomial illumination basis,
``observation`` the region-of-interest camera model, ``solver`` the convex
mode-tracking optimizer, ``filters`` the particle filter variants, and
``harness`` the simulation, metrics, and experiment driver behind the CLI.
"""

__version__ = "0.1.0"

from .models import (  # noqa: F401
    FullState,
    ModelParams,
    MotionState,
    SupportSet,
    derive_pr_stationary,
)
