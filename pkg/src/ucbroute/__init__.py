"""Cost-aware routing of queries across candidate LLMs as a contextual bandit.

A small numpy network predicts each model's utility for a query and gates
exploration; NeuralUCB adds an uncertainty bonus from its last hidden layer.
Policies are evaluated by offline replay over datasets that record every
model's quality and cost, with only the chosen model's outcome revealed.
"""
from .baselines import BinaryRouterParams, binary_route, fit_binary_router, maxquality_policy, mincost_policy, random_policy
from .data import Dataset, DatasetError, RoutingContext, Sample, generate_synthetic, load_dataset, normalize_cost, write_dataset
from .harness import PolicySpec, ProtocolConfig, ReplaySimulator, TrainConfig, compare_runs, run_protocol
from .policy import Decision, UcbState, decide, rank1_update, rebuild, ucb_score
from .replay import ReplayBuffer, ReplayRecord
from .reward import FeedbackOracle, RewardParams, reward_table, utility_reward
from .utilitynet import LossConfig, OptimizerState, UtilityNetParams, forward, init_params, loss_and_gradients, train_epochs

__version__ = "0.1.0"
