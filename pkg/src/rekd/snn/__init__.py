"""Reverse knowledge distillation for spiking neural networks"""
__version__ = "0.1.0"

from enum import Enum


class LAYOUT(str, Enum):
    RUN_MANIFEST = "run-manifest.json"
    SEED = "seed-{seed}"
    BASELINE = "baseline"
    TEACHER = "teacher-r{ratio}"
    SPARSE = "sparse-r{ratio}"
    DEFAULT = "default"
    CHECKPOINT = "checkpoint"
    REPORT = "report.json"
    REPORT_CSV = "report.csv"
    EVAL = "eval.json"
    COMPARISON_CSV = "comparison.csv"
    COMPARISON_TXT = "comparison.txt"
    AGGREGATE_JSON = "aggregate.json"
    AGGREGATE_CSV = "aggregate.csv"
    PLOTS = "plots"
