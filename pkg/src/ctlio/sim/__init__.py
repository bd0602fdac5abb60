"""Synthetic worlds, trajectories and sensors with exact ground truth."""

from .sensors import ImuSpec, LidarSpec, SensorSpec, SimulatedScan, ideal_imu, simulate_imu, simulate_scan
from .trajectory import AnalyticTrajectory
from .world import WORLDS, Box, Panel, Plane, World

__all__ = [
    "AnalyticTrajectory", "Box", "ImuSpec", "LidarSpec", "Panel", "Plane", "SensorSpec", "SimulatedScan", "World",
    "WORLDS", "ideal_imu", "simulate_imu", "simulate_scan",
]
