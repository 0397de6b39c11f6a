"""Structured white-box adversarial attacks: Frank-Wolfe over nuclear and
group-nuclear distortion balls, PGD/FGSM baselines, a self-contained
differentiable classifier, and a metrics harness.
"""

from .distortion import DistortionBall, GroupPartition, Vertex, ball_norm, lmo, project, variance_weights
from .fw import Backtracking, Decaying, FwTrace, ShortStep, fgsm, frank_wolfe, pgd
from .harness import AggregateReport, AttackConfig, SampleResult, attack_sample, make_adversarial_oracle, run_campaign
from .linalg import SingularTriple, full_svd_small, inner_product, nuclear_norm, tensor_nuclear_norm, top_singular_pair, vector_norms

__all__ = [
    "AggregateReport", "AttackConfig", "Backtracking", "Decaying",
    "DistortionBall", "FwTrace", "GroupPartition", "SampleResult",
    "ShortStep", "SingularTriple", "Vertex", "attack_sample", "ball_norm",
    "fgsm", "frank_wolfe", "full_svd_small", "inner_product", "lmo",
    "make_adversarial_oracle", "nuclear_norm", "pgd", "project",
    "run_campaign", "tensor_nuclear_norm", "top_singular_pair",
    "variance_weights", "vector_norms",
]
