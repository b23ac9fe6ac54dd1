"""Neural networks, reinforcement learning and measurement-based feedback on a simulated cavity."""
from . import numkit, nn, autoenc, rl, qsim, qcontrol, generative, statest

__version__ = "0.1.0"
