"""Cost-minimal deployment of mixture-of-experts inference on serverless functions."""
from .config import (ConfigError, ModelSpec, PlannerConfig, PlatformProfile, TunerConfig,
                     WorkloadConfig, canonical_model, canonical_profile)
from .costmodel import DIRECT, INDIRECT, PIPELINED, DeploymentPlan, ExpertDemand, evaluate_plan
from .kernels import BACKEND
from .planner import NoPlanError, ods, plan_deployment, solve_fixed_method
from .predictor import FeatureTable, posterior, predict_demand
from .sim import simulate

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ConfigError", "DIRECT", "DeploymentPlan", "ExpertDemand", "FeatureTable",
    "INDIRECT", "ModelSpec", "NoPlanError", "PIPELINED", "PlannerConfig", "PlatformProfile",
    "TunerConfig", "WorkloadConfig", "canonical_model", "canonical_profile", "evaluate_plan",
    "ods", "plan_deployment", "posterior", "predict_demand", "simulate", "solve_fixed_method",
]
