"""Independent vector analysis toolkit: sources, bounds, identifiability and separation."""

__version__ = "0.1.0"

from .core import (DatasetEnsemble, DemixingEnsemble, Family, RngHandle, SourceComponentMatrix,
                   SourceModel, direct_sum, hadamard_quotient_trace)
from .score import gaussian_score, kappa_elliptical, mpe_rho, mpe_score
from .bounds import bound_report, isr_bound_elliptical, isr_bound_general
from .ident import check_iva_identifiability_general, check_iva_identifiability_iid, diag_similar
from .algos import FitOptions, fit_iva_mpe, fit_jdiag_sos

__all__ = [
    "DatasetEnsemble", "DemixingEnsemble", "Family", "RngHandle", "SourceComponentMatrix",
    "SourceModel", "direct_sum", "hadamard_quotient_trace", "gaussian_score", "kappa_elliptical",
    "mpe_rho", "mpe_score", "bound_report", "isr_bound_elliptical", "isr_bound_general",
    "check_iva_identifiability_general", "check_iva_identifiability_iid", "diag_similar",
    "FitOptions", "fit_iva_mpe", "fit_jdiag_sos",
]
