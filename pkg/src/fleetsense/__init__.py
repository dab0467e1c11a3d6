"""Fleet crowdsensing simulator with graph-based multi-agent PPO and baselines."""

__version__ = "0.1.0"
