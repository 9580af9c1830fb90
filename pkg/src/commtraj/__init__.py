"""Communication-constrained energy-optimal quadrotor trajectories via SCP."""

__version__ = "0.1.0"
