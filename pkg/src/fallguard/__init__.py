"""fallguard: fall prediction and impact-damage mitigation for a planar
humanoid — data generation, GRU fall predictor, PPO mitigation policy, and
damage-metric evaluation."""

__version__ = "0.1.0"
