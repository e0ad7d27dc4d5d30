"""Energy-optimal trajectories for connected automated vehicles in a control zone."""
from __future__ import annotations

__version__ = "0.1.0"
