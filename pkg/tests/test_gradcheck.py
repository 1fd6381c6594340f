"""Analytic gradients vs central finite differences of the float64 references.

The full 100-seed sweep runs in the acceptance suite; here a smaller seed set
covers every primitive plus the composed residual graph.
"""

import pytest

import gradcheck


@pytest.mark.parametrize("name", sorted(gradcheck.PRIMITIVE_CHECKS))
@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients(name, seed):
    gradcheck.PRIMITIVE_CHECKS[name](seed)


@pytest.mark.parametrize("seed", range(3))
def test_composed_conv_relu_eltwise_linear_graph(seed):
    skipped = gradcheck.composed_graph_check(seed, h=1e-3)
    assert skipped < 0.05  # kink crossings must stay rare
