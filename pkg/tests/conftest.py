from pathlib import Path

import numpy as np
import pytest

from ccopf.gridlib import (
    BranchRecord,
    BusRecord,
    BusType,
    GeneratorRecord,
    MatrixSet,
    NetworkCase,
    WindFarm,
    build_matrix_set,
    parse_case,
    transform_case,
)

CASE_DIR = Path(__file__).parent.parent / "cases"
RTS24_PATH = CASE_DIR / "case24_ieee_rts.m"

TWO_BUS = """function mpc = case2
mpc.version = '2';
mpc.baseMVA = 100;

%% bus data
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.06	0.94;
	2	1	50	10	0	0	1	1	0	230	1	1.06	0.94;
];

%% generator data
mpc.gen = [
	1	0	0	100	-100	1.0	100	1	200	0;
];

%% branch data
mpc.branch = [
	1	2	0.01	0.1	0	0	0	0	0	0	1	-360	360;
];

%% generator cost data
mpc.gencost = [
	2	0	0	3	0.01	10	0;
];
"""

# Bus 2 generator cannot produce reactive power but asks for a raised voltage
THREE_BUS = """function mpc = case3
mpc.version = '2';
mpc.baseMVA = 100;

mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	2	0	0	0	0	1	1	0	230	1	1.1	0.9;
	3	1	100	50	0	0	1	1	0	230	1	1.1	0.9;
];

mpc.gen = [
	1	0	0	300	-300	1.0	100	1	300	0;
	2	50	0	0	-50	1.05	100	1	100	0;
];

mpc.branch = [
	1	2	0.01	0.1	0.02	250	250	250	0	0	1	-360	360;
	2	3	0.01	0.1	0.02	250	250	250	0	0	1	-360	360;
	1	3	0.01	0.1	0.02	250	250	250	0	0	1	-360	360;
];

mpc.gencost = [
	2	0	0	3	0.02	20	0;
	2	0	0	3	0.01	15	0;
];
"""

BASE_STUDY = """
[case]
path = "case3.m"

[[wind_farms]]
bus = 3
rated = 60
forecast = 30

[participation]
"1" = 1.0

[uncertainty]
kind = "rect"
relative_bounds = 0.5
relative_sigma = 0.25

[policy]
mode = "cc-rect"
mu = 10

[evaluation]
n = 20
seed = 3

[output]
dir = "results"
"""


def write_study(tmp_path: Path, text: str = BASE_STUDY) -> Path:
    """Write the three bus case next to a study file and return the study's path."""
    (tmp_path / "case3.m").write_text(THREE_BUS)
    path = tmp_path / "study.toml"
    path.write_text(text)
    return path


def random_network(rng: np.random.Generator, n_bus: int) -> NetworkCase:
    """
    Build a random connected network with taps, phase shifts, line charging, and bus shunts.

    A random spanning tree is extended with up to `n_bus` extra branches; bus 1 is the slack and
    holds the only generator.
    """
    buses = [
        BusRecord(
            id=i + 1,
            bus_type=BusType.SLACK if i == 0 else BusType.PQ,
            p_load=rng.uniform(0, 0.5),
            q_load=rng.uniform(-0.1, 0.2),
            v_min=0.9,
            v_max=1.1,
            shunt_g=rng.uniform(0, 0.05),
            shunt_b=rng.uniform(-0.1, 0.1),
        )
        for i in range(n_bus)
    ]

    pairs = [(int(rng.integers(0, i)) + 1, i + 1) for i in range(1, n_bus)]
    for _ in range(int(rng.integers(0, n_bus + 1))):
        f, to = rng.choice(n_bus, size=2, replace=False) + 1
        pairs.append((int(f), int(to)))

    branches = [
        BranchRecord(
            from_bus=f,
            to_bus=to,
            r=rng.uniform(0, 0.05),
            x=rng.uniform(0.02, 0.3),
            b_sh=rng.uniform(0, 0.1),
            tap=rng.uniform(0.9, 1.1) if rng.random() < 0.5 else 1.0,
            shift=rng.uniform(-0.2, 0.2) if rng.random() < 0.5 else 0.0,
        )
        for f, to in pairs
    ]
    gen = GeneratorRecord(bus=1, p_min=0.0, p_max=5.0, q_min=-5.0, q_max=5.0)
    return NetworkCase(f"random{n_bus}", 100.0, tuple(buses), tuple(branches), (gen,))


@pytest.fixture
def two_bus() -> NetworkCase:
    return parse_case(TWO_BUS, name="case2")


@pytest.fixture
def three_bus() -> NetworkCase:
    return parse_case(THREE_BUS, name="case3")


@pytest.fixture
def three_bus_wind(three_bus: NetworkCase) -> NetworkCase:
    """Three bus case with a 60 MW rated farm forecast at 30 MW on bus 3, unit 1 participating."""
    farm = WindFarm(bus=3, rated=0.6, forecast=0.3, cos_phi=0.95)
    return three_bus.with_wind_farms([farm]).with_participation([1.0, 0.0])


@pytest.fixture(scope="session")
def rts24() -> NetworkCase:
    case = parse_case(RTS24_PATH.read_text(), name="case24_ieee_rts")
    return transform_case(case, min_transformer_r=1e-4)


@pytest.fixture(scope="session")
def rts24_matrices(rts24: NetworkCase) -> MatrixSet:
    return build_matrix_set(rts24)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
