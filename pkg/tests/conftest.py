import pathlib

import numpy as np
import pytest

import gridflow
from gridflow import case_io, grid_model, opf

CASES = pathlib.Path(gridflow.__file__).parent / "cases"


def load_case(name):
    return case_io.parse_matpower_case((CASES / f"{name}.m").read_text())


@pytest.fixture(scope="session")
def case3():
    return load_case("case3")


@pytest.fixture(scope="session")
def grid3(case3):
    return grid_model.build_linalg(case3)


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def grid14(case14):
    return grid_model.build_linalg(case14)


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


@pytest.fixture(scope="session")
def grid118(case118):
    return grid_model.build_linalg(case118)


@pytest.fixture(scope="session")
def case300():
    return load_case("synth300")


@pytest.fixture(scope="session")
def dataset14(case14):
    return opf.generate_dataset(
        case14, opf.SampleSpec(n_samples=160, seed=7,
                               cost_scale_range=(0.7, 1.3)))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
