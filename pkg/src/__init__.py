"""
Morphology-Agnostic Locomotion - attention-based joint encoders, a universal
action decoder and multi-task PPO over a fleet of legged robots
"""

__version__ = "1.0.0"
