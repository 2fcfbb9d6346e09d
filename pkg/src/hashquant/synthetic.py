"""Closed-form search environment for exercising the agent at toy scale.

Four quantizable units (two hash levels plus one MLP layer) with concave
per-unit quality and linear cost, so the exhaustive optimum over all 8^4
policies is computable and the search loop can be validated end to end in
seconds.
"""

from __future__ import annotations

import math
from itertools import product

import numpy as np

from .oracle import NgpConfig
from .policy import QuantPolicy, policy_from_bits
from .search import build_observations, observation_maxima

# Per-unit quality weights (concave ln(1+b) response) and linear cycle costs,
# in action order: hash level 0, hash level 1, layer-0 weights, layer-0
# activations. Chosen so the optimum is the mixed policy (1, 1, 4, 2) and
# roughly 0.9% of the 4096 policies land within 5% of its reward.
QUALITY_WEIGHTS = (0.1, 0.45, 1.6, 0.55)
CYCLE_COSTS = (70, 35, 10, 6)
CYCLE_BASE = 18
PSNR_BASE = 30.0


class SyntheticEnv:
    """Analytic stand-in for the oracle + simulator pair."""

    def __init__(self, reward_scale: float = 0.1):
        self.reward_scale = reward_scale
        self.config = NgpConfig(num_levels=2, features_per_level=2, table_size_log2=8,
                                base_resolution=4, growth_factor=2.0, mlp_hidden_layers=0,
                                mlp_width=8, output_channels=3)
        self.observations = build_observations(self.config)
        self.maxima = observation_maxima(self.observations)
        self.psnr_org: float | None = None
        self.original_cost: int | None = None

    @property
    def num_units(self) -> int:
        return len(self.observations)

    def policy_from_bits(self, bits) -> QuantPolicy:
        return policy_from_bits(bits, self.config.num_levels, self.config.num_mlp_layers)

    def uniform_policy(self, bits: int) -> QuantPolicy:
        return QuantPolicy.uniform(bits, self.config.num_levels, self.config.num_mlp_layers)

    def quality(self, policy: QuantPolicy) -> float:
        bits = policy.all_bits()
        drop = sum(a * (math.log(9.0) - math.log(1.0 + b)) for a, b in zip(QUALITY_WEIGHTS, bits))
        return PSNR_BASE - drop

    def latency(self, policy: QuantPolicy) -> int:
        bits = policy.all_bits()
        return CYCLE_BASE + sum(c * b for c, b in zip(CYCLE_COSTS, bits))

    def evaluate(self, policy: QuantPolicy, finetune_steps: int = 0):
        return self.quality(policy), self.latency(policy)

    def baseline(self, finetune_steps: int = 0):
        quality, cycles = self.evaluate(self.uniform_policy(8))
        self.psnr_org = quality
        self.original_cost = cycles
        return quality, cycles

    def apply_budget(self, policy: QuantPolicy, budget_cycles: int):
        """Greedy decrement on the linear cost model."""
        current = policy
        while self.latency(current) > budget_cycles:
            bits = current.all_bits()
            candidates = [(CYCLE_COSTS[i], i) for i, b in enumerate(bits) if b > 1]
            if not candidates:
                return current, True
            _, idx = max(candidates, key=lambda t: (t[0], -t[1]))
            current = current.with_unit(idx, bits[idx] - 1)
        return current, False

    def reward_of(self, policy: QuantPolicy) -> float:
        if self.psnr_org is None:
            self.baseline()
        quality, cycles = self.evaluate(policy)
        return self.reward_scale * (quality - self.psnr_org + self.original_cost / cycles)

    def exhaustive_optimum(self):
        """(best_bits, best_reward) over all 8^num_units policies."""
        if self.psnr_org is None:
            self.baseline()
        best_bits = None
        best_reward = -np.inf
        for bits in product(range(1, 9), repeat=self.num_units):
            r = self.reward_of(self.policy_from_bits(bits))
            if r > best_reward:
                best_reward = r
                best_bits = bits
        return best_bits, best_reward
