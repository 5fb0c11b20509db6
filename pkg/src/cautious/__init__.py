"""Cautious policies from k-of-N counterfactual regret minimization over reward-ensemble beliefs."""

from .belief_ensemble import RewardEnsemble, mean_reward, synthetic_belief
from .errors import (
    BeliefExhaustedError,
    CautiousError,
    ConfigError,
    ConvergenceError,
    ShapeError,
)
from .kofn_cfr import KofnConfig, KofnRunRecord, kofn_value, rank_and_mix, run
from .mdp_core import RewardTable, StationaryPolicy, TabularMdp, validate_mdp
from .policy_eval import (
    advantages,
    discounted_state_distribution,
    evaluate_policy,
    optimal_policy,
    q_values,
)
from .regret_matching import RegretMatcher, regret_bound, regret_matching_policy

__version__ = "0.1.0"
