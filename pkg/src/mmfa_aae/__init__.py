"""Multi-domain feature generalization with an adversarial auto-encoder and MMD alignment."""

__version__ = "0.1.0"
