"""Calibration of Monte Carlo volatility models by shared-policy RL.

Trajectories of a simulated market act as cooperating players that choose
their own volatilities; a single shared policy is trained with PPO so that
cross-trajectory prices match target instruments (vanilla smiles, or an
early-exercise claim to be minimized subject to staying calibrated).
"""
from __future__ import annotations

__version__ = "0.1.0"
