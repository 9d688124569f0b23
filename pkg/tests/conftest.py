import json
from importlib import resources

import numpy as np
import pytest

from tubempc.ccm import CCM, SampleSpec, TubeConstants
from tubempc.model import load_system, quadrotor_model


def _data(name: str) -> dict:
    ref = resources.files("tubempc").joinpath("data", name)
    return json.loads(ref.read_text())


@pytest.fixture(scope="session")
def quad_sys():
    return quadrotor_model()


@pytest.fixture(scope="session")
def quad_ccm():
    return CCM.from_json(_data("quadrotor_ccm.json"))


@pytest.fixture(scope="session")
def quad_consts():
    return TubeConstants.from_json(_data("quadrotor_constants.json"))


@pytest.fixture(scope="session")
def quad_spec():
    return SampleSpec(
        x_lo=[0, 0, -np.pi / 3, -2, -1, -np.pi],
        x_hi=[0, 0, np.pi / 3, 2, 1, np.pi],
        u_lo=[-1, -1], u_hi=[3.5, 3.5], n_samples=512, seed=11)


@pytest.fixture(scope="session")
def scalar_sys():
    return load_system(_data("scalar_system.json"))


@pytest.fixture(scope="session")
def scalar_ccm():
    return CCM.from_json(_data("scalar_ccm.json"))


@pytest.fixture(scope="session")
def scalar_spec():
    return SampleSpec(x_lo=[-3], x_hi=[3], u_lo=[-4], u_hi=[4],
                      n_samples=128, seed=0)


@pytest.fixture(scope="session")
def planar_sys():
    return load_system(_data("planar_nav_system.json"))


@pytest.fixture(scope="session")
def planar_ccm():
    return CCM.from_json(_data("planar_ccm.json"))


@pytest.fixture(scope="session")
def planar_spec():
    return SampleSpec(x_lo=[-2.6, -1.8], x_hi=[2.6, 1.8],
                      u_lo=[-2, -2], u_hi=[2, 2], n_samples=256, seed=0)
