"""Robust composite estimation of variance components in mixed models."""

from .fit import (FitConfig, FitResult, beta_step, fit, fit_classical_S,
                  fit_composite_S, fit_composite_tau, gamma_step)
from .inference import (BreakdownConstants, InferenceResult, OutlierReport,
                        breakdown_constants, detect_outliers, sandwich_cov,
                        wald_test)
from .initial import initial_estimates
from .model import (Dataset, ModelSpec, PairIndex, Parameters, assemble_sigma,
                    build_crossed_design, build_random_coeff_design, feasible,
                    pair_list, pair_submatrix, pairwise_mahalanobis)
from .objective import (PairWorkspace, grad_beta, grad_gamma, loss_S,
                        loss_tau, solve_eta)
from .scales import (RhoConfig, ScaleResult, consistency_b, mscale, rho_opt,
                     rho_opt_sq, tau_scale, weight)
from .simplex import SimplexOptions, minimize_simplex
from .simulate import (SimScenario, StudyResult, contaminate_ccm,
                       contaminate_icm, fit_gaussian_ml, gen_clean, mkld,
                       msmd, run_study)

__version__ = "0.1.0"

__all__ = [
    "FitConfig", "FitResult", "beta_step", "fit", "fit_classical_S",
    "fit_composite_S", "fit_composite_tau", "gamma_step",
    "BreakdownConstants", "InferenceResult", "OutlierReport",
    "breakdown_constants", "detect_outliers", "sandwich_cov", "wald_test",
    "initial_estimates",
    "Dataset", "ModelSpec", "PairIndex", "Parameters", "assemble_sigma",
    "build_crossed_design", "build_random_coeff_design", "feasible",
    "pair_list", "pair_submatrix", "pairwise_mahalanobis",
    "PairWorkspace", "grad_beta", "grad_gamma", "loss_S", "loss_tau",
    "solve_eta",
    "RhoConfig", "ScaleResult", "consistency_b", "mscale", "rho_opt",
    "rho_opt_sq", "tau_scale", "weight",
    "SimplexOptions", "minimize_simplex",
    "SimScenario", "StudyResult", "contaminate_ccm", "contaminate_icm",
    "fit_gaussian_ml", "gen_clean", "mkld", "msmd", "run_study",
]
