"""Implicit-Euler inter-layer connections: autodiff core, ODE blocks, stability lab, toy encoder, robustness harness."""
