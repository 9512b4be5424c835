from __future__ import annotations

import math

import numpy as np
import pytest

from brwx.model import atoms_law, model_zoo

C2 = math.acosh(2.0)  # = ln(2 + sqrt 3)
P2 = (2.0 - math.sqrt(3.0)) / 4.0  # per-child P(-c) for COSH(2)


@pytest.fixture(scope="session")
def zoo():
    return model_zoo()


@pytest.fixture(scope="session")
def cosh2(zoo):
    return zoo["cosh2"]


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


def one_child(x: float = 0.0):
    return atoms_law([(1.0, (x,))], name="one-child")


def two_at_zero():
    return atoms_law([(1.0, (0.0, 0.0))], name="two-at-zero")


def binom_ci(p: float, n: int, k: float = 4.0) -> float:
    return k * math.sqrt(p * (1.0 - p) / n)
