"""Discrete-event simulation of a small Kubernetes-like cluster under closed-loop load."""

__version__ = "0.1.0"
