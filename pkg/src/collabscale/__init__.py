"""Collaboration scaling analysis: group metrics, power laws, mixed models and S3D."""

from .chained import RangeSpec, fit_chained, make_ranges, unify
from .ingest import TimeWindow, compute_activity_fraction, filter_window, load_events
from .lme import fit_random_intercept
from .metrics import assemble_rows, build_groups, effective_group_size
from .ols import fit_ols
from .pipeline import RunConfig, run_pipeline, sweep_windows
from .s3d import fit_s3d
from .scaling import fit_power_law, predict_mean_work, total_work
from .synth import SynthConfig, generate, truth_check

__version__ = "0.1.0"

__all__ = [
    "RangeSpec", "RunConfig", "SynthConfig", "TimeWindow", "assemble_rows", "build_groups",
    "compute_activity_fraction", "effective_group_size", "filter_window", "fit_chained", "fit_ols",
    "fit_power_law", "fit_random_intercept", "fit_s3d", "generate", "load_events", "make_ranges",
    "predict_mean_work", "run_pipeline", "sweep_windows", "total_work", "truth_check", "unify",
]
