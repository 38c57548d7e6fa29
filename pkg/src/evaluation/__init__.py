"""
Evaluation, diagnostics and the ablation harness
"""
from src.evaluation.evaluator import EvalReport, compute_mmc, dump_attention, evaluate

__all__ = ['EvalReport', 'evaluate', 'compute_mmc', 'dump_attention']
