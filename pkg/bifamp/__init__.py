"""
BiFAMP - Bayes-optimal matrix factorization
Approximate message passing, state evolution and free-entropy tools
"""
__version__ = "0.1.0"
