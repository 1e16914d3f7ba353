"""Reconstructability-aware retain / approximate / evict KV-cache allocation."""

from .allocator import (CompressedCache, CompressionPlan, MemoryReport, binary_plan, build_cache, memory_report,
                        plan_allocation, plan_konly_ablation, read_value, route, route_with_config)
from .core import CompressionConfig, ConfigError, RoutingLabel, TokenRecord, deploy_pa, tier_sizes, validate_config
from .distortion import (DistortionInstance, DistortionReport, GaussianResidualModel, check_proposition,
                         distortion_curve, evaluate_distortion, expansion_threshold, gaussian_one_minus_r2,
                         truncated_normal_second_moment)
from .regression import (CalibrationModel, GramAccumulator, ProjectionPair, SingularSystemError, accumulate, fit,
                         merge, mp_pseudoinverse, per_token_residuals, r_squared, solve_ols)
from .rope import RopeTable
from .scorers import ImportanceScores, attention_window_score, key_diversity_score, random_score
from .toymodel import ToyLayer, ToyLayerSpec, attention_forward, generate_sequence

__version__ = "0.1.0"
