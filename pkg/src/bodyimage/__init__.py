"""
Bodyimage - online self-body-image learning for a simulated tendon-driven arm

The self-body image maps joint angles and muscle tensions to muscle lengths.
It is trained once from the man-made geometric model, then corrected online
from the robot's own sensing while it moves and is loaded.
"""

__version__ = "0.1.0"
