"""Desk-scale drug-response modeling workbench.

Subpackages cover the full pipeline: dose-response curve fitting and
dose-independent targets (:mod:`~responder_bench.dose_response`),
expression preprocessing with batch-effect handling
(:mod:`~responder_bench.expression`), synthetic study generation and
table assembly (:mod:`~responder_bench.dataset`), a small dense-network
kernel (:mod:`~responder_bench.nn`), the training protocol
(:mod:`~responder_bench.trainer`), strict cross-validation and metrics
(:mod:`~responder_bench.evaluation`), resumable configuration sweeps
(:mod:`~responder_bench.sweep`), and sweep analytics
(:mod:`~responder_bench.analysis`).
"""

__version__ = "0.1.0"
