"""Radar-inertial odometry toolkit: FMCW spectra, detection, ego-velocity, IMU fusion and evaluation."""

__version__ = "0.1.0"
