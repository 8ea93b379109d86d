"""Seed discipline.

All randomness in the package flows from one root seed. Each pipeline stage
gets its own child stream derived from (root_seed, stage_code), so stages can
be re-run or reordered without perturbing each other, and per-sample streams
append the sample index so parallel execution order can never matter.
"""

import numpy as np

STAGE_CODES = {
    "synth": 1,
    "preprocess": 2,
    "train": 3,
    "eval": 4,
    "convert": 5,
    "verify": 6,
    "calibrate": 7,
    "infer": 8,
    "augment": 9,
    "smote": 10,
    "init": 11,
}


def stage_rng(root_seed: int, stage: str) -> np.random.Generator:
    """Generator for one named pipeline stage."""
    if stage not in STAGE_CODES:
        raise KeyError(f"unknown rng stage {stage!r}")
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), STAGE_CODES[stage]]))


def sample_rng(root_seed: int, stage: str, index: int) -> np.random.Generator:
    """Generator for one sample within a stage (order-independent)."""
    if stage not in STAGE_CODES:
        raise KeyError(f"unknown rng stage {stage!r}")
    return np.random.default_rng(
        np.random.SeedSequence([int(root_seed), STAGE_CODES[stage], int(index)])
    )
