"""DP-SGD privatization primitives and a Renyi-DP accountant."""
from .mechanism import clip_per_sample, flatten_per_sample, privatize_sum
from .noise import GaussianStream
from .rdp import (
    CONVERSION,
    DEFAULT_ORDERS,
    AccountantState,
    RdpAccountant,
    fresh_state,
    max_steps_for_budget,
    noise_for_budget,
    rdp_step,
    rdp_subsampled_gaussian,
    rdp_to_dp,
)

__all__ = [
    "AccountantState", "CONVERSION", "DEFAULT_ORDERS", "GaussianStream", "RdpAccountant",
    "clip_per_sample", "flatten_per_sample", "fresh_state", "max_steps_for_budget", "noise_for_budget",
    "privatize_sum", "rdp_step", "rdp_subsampled_gaussian", "rdp_to_dp",
]
