"""Time-frequency fading simulation, low-rank channel bases and covariance-based activity detection."""

from .channel import (BlockGrid, ChannelTensor, DopplerConfig, PathState, PowerDelayProfile,
                      PulseShape, generate_channels, map_index, max_doppler)
from .basis import (ApproxReport, Basis, CovarianceEstimate, approx_error_kappa, block_fading_basis,
                    bwl_basis, dft_basis, ls_project, pca_basis, prediction_horizon_error,
                    sample_covariance)
from .detector import (EffectivePilotSet, GammaState, coordinate_update, effective_pilots, nll_cost,
                       run_detection, threshold_activities)
from .harness import (DetectionReport, ExperimentConfig, TrialResult, evaluate_metrics,
                      generate_activity, generate_pilots, run_experiment, synthesize_received)

__version__ = "0.1.0"
