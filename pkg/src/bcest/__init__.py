"""Robust batch state estimation with learned measurement covariances."""

from .bce import BCEConfig, BCEReport, bce_solve, update_noise_from_gmm
from .factor_graph import (COV_FLOOR, BatchModel, Factor, FactorGraph, FactorTag, GaussianNoise, GraphError,
                           StateBlockKey, StateKind)
from .mixture import GMM, GaussianComponent, MixtureError, VBConfig, extract_point_gmm, vb_fit
from .robust import KernelSpec, irls_solve, kernel_eval
from .solver import SolverConfig, SolverError, SolveReport, lm_solve

__version__ = "0.1.0"
