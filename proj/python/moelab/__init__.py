"""Mixture-of-experts router audit laboratory.

Thin re-export of the compiled extension: pass@K estimators, route preference
loss, load-balance penalty, candidate-route summaries, and the end-to-end
pipeline runner.
"""

from ._core import (
    MoelabError,
    bootstrap_ci,
    epo_loss,
    epo_score_grad,
    file_hash_hex,
    gumbel_top_k,
    lb_grad,
    load_curve_csv,
    pass_at_k,
    pass_at_k_log,
    passk_curve,
    profile_names,
    route_log_prob,
    run_pipeline,
    softmax,
    summarize_candidates,
    switch_lb_loss,
)

__all__ = [
    "MoelabError",
    "bootstrap_ci",
    "epo_loss",
    "epo_score_grad",
    "file_hash_hex",
    "gumbel_top_k",
    "lb_grad",
    "load_curve_csv",
    "pass_at_k",
    "pass_at_k_log",
    "passk_curve",
    "profile_names",
    "route_log_prob",
    "run_pipeline",
    "softmax",
    "summarize_candidates",
    "switch_lb_loss",
]
