"""Cross-entropy search over policies refined by analytic policy gradients
through differentiable cartpole, acrobot and double-cartpole simulators."""

__version__ = "0.1.0"
