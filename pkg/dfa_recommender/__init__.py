"""
Double feature allocation recommender.

Bayesian collaborative filtering with paired user/item feature subsets,
ordinal probit ratings and consensus Monte Carlo over user shards.
"""

__version__ = "0.1.0"
