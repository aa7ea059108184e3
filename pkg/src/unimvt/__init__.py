"""Unified multi-valued-treatment network: debiased base-CTR estimation plus
per-unit uplift, with synthetic benchmarks, cumulative-slope evaluation
metrics, S/T-Learner baselines and a coupon allocation engine."""

__version__ = "0.1.0"
