"""Mixed-effects mixture-of-experts models for longitudinal data.

Fitting by a Laplace-EM algorithm, robust sandwich standard errors for the
expert coefficients, highest-density prediction sets for new responses, and
a simulation benchmark suite with restricted baselines.
"""

from .model import (Dataset, ModelParams, Observation, Subject,
                    conditional_mixture_logpdf, gate_probs, gaussian_logpdf)
from .laplace import (ModeConfig, SubjectPosterior, find_mode, h_grad,
                      h_hess_exact, h_hess_fisher, h_value, laplace_loglik)
from .em import (DatasetSums, FitConfig, FitError, FittedModel,
                 Responsibilities, e_step, fit, fit_from, m_step_Sigma,
                 m_step_alpha, m_step_beta, m_step_kappa, m_step_sigma2,
                 q_surrogate, select_k)
from .inference import SandwichReport, sandwich, score_beta
from .predict import (PredictionSet, PredictiveMixture, coverage_eval,
                      point_predict, prediction_set,
                      prediction_set_from_mixture, predictive_mixture)
from .simulate import (SimReport, SimTruth, align_experts, fit_baseline,
                       gen_example1, gen_example2, gen_example3, run_study)
from .io import (ArchiveError, DataError, LongCsvSchema, ModelArchive,
                 load_long_csv, load_model, save_model)

__version__ = "0.1.0"
