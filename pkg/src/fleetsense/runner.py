"""Episode loop shared by every policy."""

from __future__ import annotations

from typing import Optional

from .demand import STREAM_POLICY, slot_rng
from .env import FleetEnv, Metrics


def run_policy_episode(env: FleetEnv, policy, seed: int, events_sink: Optional[list] = None) -> Metrics:
    """Reset ``env`` to ``seed`` and play one episode with ``policy``.

    Policy randomness is drawn from the per-slot policy stream, so two
    policies evaluated on the same seed see the same orders and PoIs.
    """
    env.reset(seed)
    while not env.done:
        masks = env.legal_masks()
        rng = slot_rng(seed, env.t, STREAM_POLICY)
        actions = policy.act(env, masks, rng)
        out = env.step(actions)
        policy.observe(env, actions, out)
    policy.end_episode(env)
    if events_sink is not None:
        events_sink.extend(env.events)
    return env.metrics()
