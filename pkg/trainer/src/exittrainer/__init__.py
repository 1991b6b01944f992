"""Reference external evaluator for early-exit architecture search."""

from .model import EarlyExitNet, Interpolate, structural_walk
from .runner import main, run_request
