"""Off-policy recurrent agent with a family of exploration/exploitation mixtures,
Soft Watkins Q(lambda) returns, trust-region value updates and policy distillation."""

__version__ = "0.1.0"
