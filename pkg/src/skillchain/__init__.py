"""Compositional skill learning in a seeded crafting gridworld.

Symbolic skill operators over a counted-predicate abstraction, a
uniform-cost planner with multiplicity folding, a from-scratch PPO/GAE
learner with one expert head per skill, and trajectory-driven operator
refinement.
"""

__version__ = "0.1.0"
