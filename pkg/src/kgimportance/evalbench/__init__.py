"""Evaluation harness: metrics, folds, protocols, synthetic data, experiments."""
from .metrics import EvaluationError, FoldError, make_folds, ndcg_aligned, ndcg_at_k, ndcg_vector
