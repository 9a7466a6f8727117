"""Detector tomography by direct reconstruction of POVM Wigner functions.

Displaced thermal probes are simulated hitting a photon-counting detector;
the click statistics are inverted point by point in phase space with a
box- and slab-constrained Tikhonov least-squares solve, and the pointwise
Wigner values are smoothed with a Gaussian-modulated polynomial fit.
"""

from .fockspace import (
    TruncationConfig,
    assoc_laguerre,
    binomial_loss,
    displaced_fock_overlap,
    displacement_matrix,
    laguerre,
    thermal_pmf,
)
from .detectors import (
    DetectorKind,
    DetectorModel,
    PovmElement,
    analytic_wigner,
    check_completeness,
    ideal_pnr_povm,
    lossy_pnr_povm,
)
from .forward import (
    ClickStatistics,
    NoiseConfig,
    PhaseGrid,
    ResponseMatrix,
    ThermalProbeSet,
    apply_lo_noise,
    build_response_matrix,
    click_statistics,
    fock_response_vector,
    sample_shots,
)
from .qp import QpProblem, SolverReport, condition_report, kkt_residual, solve
from .reconstruction import (
    ErrorReport,
    FitResult,
    WignerEstimate,
    gamma_sweep,
    fit_estimate,
    min_points_required,
    reconstruct_from_clicks,
    reconstruct_pointwise,
    relative_error,
    robust_gaussian_poly_fit,
    wigner_from_response,
)
from .config import ConfigError, RunConfig, load_config

__version__ = "0.1.0"
