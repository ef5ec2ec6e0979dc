import numpy as np
import pytest
from hypothesis import strategies as st

from sensbounds.bounds_core import DiscreteDistribution


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@st.composite
def discrete_distributions(draw, max_support=8):
    """Finite laws on a small integer grid (ties with quantile levels) or on floats."""
    k = draw(st.integers(1, max_support))
    if draw(st.booleans()):
        values = draw(st.lists(st.integers(-5, 5), min_size=k, max_size=k, unique=True))
    else:
        values = draw(
            st.lists(
                st.floats(-10, 10, allow_nan=False, allow_infinity=False),
                min_size=k,
                max_size=k,
                unique=True,
            )
        )
    weights = draw(st.lists(st.integers(1, 20), min_size=k, max_size=k))
    probs = np.asarray(weights, float) / sum(weights)
    return DiscreteDistribution(np.asarray(values, float), probs)


lambdas = st.floats(1.0, 5.0, allow_nan=False)
deltas = st.floats(0.0, 1.0, allow_nan=False)
