"""
Shared constants and small plant/data helpers for the test suite.

Sizes are kept small so the closed-loop tests run in seconds; the shipped
configurations under configs/ carry the full-size examples.
"""

import numpy as np

from pydpcflow import ExperimentConfig, LtiModel, Method, PlantKind, TruncationMode, random_lti

SEED = 7

# Ball-beam coupling -m d g / (L (J/r^2 + m)) for the default parameters
BALL_BEAM_COUPLING = -0.70071

# Ten highest-degree buses of the bundled 39-bus network, ties to the lower index
IEEE39_GENERATORS = (2, 3, 4, 5, 6, 8, 10, 11, 16, 26)
IEEE39_BUSES = 39
IEEE39_LINES = 46

# Flop model hand evaluation: m=100, n=1000, ten blocks, k=20
FLOP_CASE = {"m": 100, "n": 1000, "n_blocks": 10, "k": 20}
FLOP_CASE_PER_BLOCK = 22_000_000
FLOP_CASE_MERGE = 1_648_000
FLOP_CASE_TOTAL = 234_832_000
FLOP_CASE_BOUND = 2.04e9

# Topology text of the default ten-leaf DAG without column ranges
MPT10_TOPOLOGY = """# mpt=10 fold=2
1 A 1 parents=
2 B 2 parents=1
3 B 2 parents=1
4 B 2 parents=1
5 B 2 parents=1
6 B 2 parents=1
7 B 2 parents=1
8 B 2 parents=1
9 B 2 parents=1
10 B 2 parents=1
11 B 2 parents=1
12 C 3 parents=2,3
13 C 3 parents=4,5
14 C 3 parents=6,7
15 C 3 parents=8,9
16 C 3 parents=10,11
17 C 4 parents=12,13
18 C 4 parents=14,15
19 D 5 parents=1,16,17,18
"""

SAMPLE_CONFIG_TEXT = """
# small random plant
plant = random
method = workflow   # trailing comments are fine
random_dim = 2
n_horizon = 3
j_cols = 60
observer_gain = 0.5, 0.0, 0.0, 0.5
observer_outputs = 0, 1
real_time = false
truncation = fixed-count
keep_count = 5
"""


def simulate(model: LtiModel, inputs: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
    """Outputs y(t + 1) for each input u(t), matching the (u(t), y(t + 1)) pairing of the data window"""
    x = np.zeros(model.state_dim) if x0 is None else np.asarray(x0, dtype=float)
    outputs = np.empty((len(inputs), model.output_dim))
    for t, u in enumerate(inputs):
        x = model.step(x, u)
        outputs[t] = model.output(x)
    return outputs


def lti_data(dim: int, samples: int, seed: int = SEED) -> tuple[LtiModel, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    model = random_lti(dim, rng)
    inputs = rng.uniform(-1.0, 1.0, size=(samples, dim))
    return model, inputs, simulate(model, inputs)


def small_config(**overrides) -> ExperimentConfig:
    """Two-state random plant, small window, four leaves"""
    base = ExperimentConfig(
        plant=PlantKind.RANDOM,
        method=Method.NATIVE,
        random_dim=2,
        n_horizon=3,
        j_cols=60,
        lam=0.01,
        truncation=TruncationMode.RANK_ONLY,
        observer_gain=(0.5,),
        duration=15,
        mpt=4,
        reference=0.1,
        dither=0.05,
        seed=SEED,
        cloud_flops_per_second=1e12,
    )
    return base.with_overrides(**overrides)
