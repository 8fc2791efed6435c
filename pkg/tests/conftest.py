import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ldlab.lattice import apply_defect, build_homogeneous
from ldlab.potential import MorsePotential

settings.register_profile(
    "suite", deadline=None, max_examples=25, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")

TRI_ROWS = np.array([[1.0, 0.0], [0.5, math.sqrt(3.0) / 2.0]])
A_TRI = TRI_ROWS.T                      # columns generate the lattice
FCC_ROWS = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
A_FCC = FCC_ROWS.T

# frozen calibration constants for the acceptance geometries
A0_TRI_MORSE = 0.9642457148656522
A0_TRI_EAM = 0.9203336307987574
A0_FCC_MORSE = 1.2833840571086448


@pytest.fixture(scope="session")
def morse():
    return MorsePotential(alpha=4.0)


@pytest.fixture(scope="session")
def tri_hom(morse):
    return build_homogeneous(A0_TRI_MORSE * A_TRI, morse.support_radius)


@pytest.fixture(scope="session")
def tri_vacancy(tri_hom):
    return apply_defect(tri_hom, removed=[(0, 0)])
