"""
pipeforge Package

Meta-learning guided search for classification pipelines: a search tree over
step sequences, per-structure hyperparameter optimization and greedy
ensembling of the best pipelines.
"""

__version__ = "1.0.0"
__author__ = "pipeforge"
__description__ = "Meta-learning guided pipeline structure search for tabular classification"
