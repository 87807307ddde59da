"""Linear attention with spatial-aware decay, desk scale.

Subpackages:
  numerics       float64 tensors + reverse-mode autodiff primitives
  attention      attention mechanisms (sequential, chunked, quadratic oracles)
  spatial_decay  row-boundary-aware decay schedules
  model          the class-conditional token-grid generator
  data           synthetic token-grid tasks and the toy image quantizer
  bench/verify/cli   the command-line harness
"""

__version__ = "0.1.0"
