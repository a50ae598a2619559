"""Per-trial, per-stage random streams.

Every stochastic stage of a trial draws from its own Philox stream keyed by
``(master_seed, trial_index, stage)``.  A stage can therefore be re-run in
isolation, and strategies evaluated on the same trial index see the same
geometry, fading and noise (common random numbers).
"""

import zlib

import numpy as np

STAGES = (
    "layout",
    "shadowing",
    "channels",
    "pilot_noise",
    "data",
    "data_noise",
    "selection",
    "lsfd",
)


def stage_key(stage: str) -> int:
    return zlib.crc32(stage.encode("ascii"))


def stage_rng(master_seed: int, trial_index: int, stage: str) -> np.random.Generator:
    seq = np.random.SeedSequence(
        entropy=int(master_seed) & (2**64 - 1),
        spawn_key=(int(trial_index), stage_key(stage)),
    )
    return np.random.Generator(np.random.Philox(seq))
