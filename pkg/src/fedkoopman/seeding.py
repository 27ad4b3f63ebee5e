"""Deterministic RNG streams derived from one master seed.

Every random consumer in a run owns its own stream, keyed by role (and client
id where applicable), so evaluation order can never change results.
"""

import numpy as np

SYSTEM = 0        # ground-truth trajectories shared by all clients in a slot
SERVER = 1        # client-selection draws (random policy)
CLIENT_ARRIVAL = 2  # per-client observation success draws
CLIENT_NOISE = 3    # per-client observation noise and observer construction
CLIENT_TRAIN = 4    # per-client shuffling during local training
INIT = 5          # global model initialization
EVAL = 6          # held-out test trajectories
BENCH = 7         # estimator benchmark draws
SERVER_TRAIN = 8  # shuffling for pooled training in the centralized scheme
OBSERVER = 9      # perturbed-identity observer construction (recorded-data runs)
DATASET = 10      # simulated stand-in for the recorded dataset


def stream(master_seed, *key):
    """Independent Generator for the given role key under a master seed."""
    return np.random.default_rng(
        np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    )
