"""Point-mutation continuous-time Markov chains over short sequences.

Generators, exact and per-site transition kernels, Gillespie and guided
samplers, likelihood fitting and the synthetic experiment harness.
"""

__version__ = "0.1.0"
