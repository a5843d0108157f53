"""Analytic gradients and finite-difference verification."""
from .check import OPS, GradCheckReport, finite_diff_check, sign_flipped, vjp
from .vjp import cross_entropy, model_vjp, network_forward

__all__ = ["OPS", "GradCheckReport", "finite_diff_check", "sign_flipped", "vjp",
           "cross_entropy", "model_vjp", "network_forward"]
