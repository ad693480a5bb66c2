"""Heterogeneous EHR graph learning at desk scale.

Pipeline: tabular records -> typed heterogeneous graph -> translational
embedding pretraining -> graph-transformer encoding with causal/trivial
edge disentanglement -> variance-regularized multi-task training for
mortality, readmission, length-of-stay, and drug recommendation.
"""

__version__ = "0.1.0"
