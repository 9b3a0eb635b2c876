"""Optimal Flow Matching: straight-trajectory transport maps from convex potentials."""
from .benchmark import (BenchmarkTask, MetricsReport, cosine_metric, evaluate_map, l2_uvp,
                        lemma2_check, make_convex_task, make_eight_gaussians_task,
                        make_gaussian_task)
from .inversion import SolverOptions, conjugate, invert_flow_map
from .plans import DistributionSpec, PairedBatch, PlanSampler, assignment
from .potential import IcnnPotential, QuadraticPotential, ScalarNet, SoftplusRidgePotential
from .trainer import (TrainConfig, dual_ot_loss, ofm_distance, ofm_grad_step, ofm_loss, train,
                      transport)

__version__ = "0.1.0"

__all__ = [
    "BenchmarkTask", "DistributionSpec", "IcnnPotential", "MetricsReport", "PairedBatch",
    "PlanSampler", "QuadraticPotential", "ScalarNet", "SoftplusRidgePotential", "SolverOptions",
    "TrainConfig", "assignment", "conjugate", "cosine_metric", "dual_ot_loss", "evaluate_map",
    "invert_flow_map", "l2_uvp", "lemma2_check", "make_convex_task", "make_eight_gaussians_task",
    "make_gaussian_task", "ofm_distance", "ofm_grad_step", "ofm_loss", "train", "transport",
]
