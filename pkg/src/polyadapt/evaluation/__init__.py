"""Metrics, reports and figures."""

from polyadapt.evaluation.metrics import (frechet_distance, frechet_from_stats, pca_project,
                                          retrieval_accuracy, silhouette, sim_score)
from polyadapt.evaluation.report import EvalReport, LangRow, read_report, write_report

__all__ = ["frechet_distance", "frechet_from_stats", "pca_project", "retrieval_accuracy",
           "silhouette", "sim_score", "EvalReport", "LangRow", "read_report", "write_report"]
