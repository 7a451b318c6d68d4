"""Off-policy generative policy optimisation for flow policies, with desk-scale environments and baselines."""

__version__ = "0.1.0"
