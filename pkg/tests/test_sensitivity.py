"""
Does an update to any one parameter of the probe net show up in its softmax output?
XMAM relies on it: two updates that differ anywhere must give different outputs on the probe input.
"""

import itertools

import numpy as np
import pytest

from fedxray.engine import forward
from fedxray.network import flatten_params, probe_net
from helpers import TEST_SEED

LAMBDA = 0.1


def probe_weights(size: int, seed: int = TEST_SEED):
    rng = np.random.default_rng(seed)
    pooled = (size - 4) ** 2
    return {
        # a positive kernel on a positive input keeps every ReLU open
        "kernel": rng.uniform(0.1, 1.0, size=(3, 3)),
        "bias": np.array([0.2]),
        "fc_w": rng.normal(size=(10, pooled)),
        "fc_b": rng.normal(size=10),
    }


def output(spec, weights, image):
    params = flatten_params(
        spec,
        [[weights["kernel"][None, None], weights["bias"]], [], [], [], [weights["fc_w"], weights["fc_b"]], []],
    )
    return forward(params, spec, image[None])


def perturbed(weights, name, index):
    changed = {k: v.copy() for k, v in weights.items()}
    changed[name][index] += LAMBDA
    return changed


def non_constant_image(size: int) -> np.ndarray:
    return np.random.default_rng(TEST_SEED + size).uniform(0.1, 1.0, size=(size, size))


def perturbations(size: int):
    pooled = (size - 4) ** 2
    yield from (("kernel", ij) for ij in itertools.product(range(3), range(3)))
    yield "bias", (0,)
    yield from (("fc_w", mj) for mj in itertools.product(range(10), range(pooled)))
    yield from (("fc_b", (m,)) for m in range(10))


@pytest.mark.parametrize("size", [5, 7])
def test_every_single_parameter_change_moves_the_output(size):
    spec = probe_net(size, 10)
    weights = probe_weights(size)
    image = non_constant_image(size)
    base = output(spec, weights, image)
    for name, index in perturbations(size):
        moved = output(spec, perturbed(weights, name, index), image)
        assert np.max(np.abs(moved - base)) > 0, (name, index)


def test_kernel_changes_are_indistinguishable_on_a_constant_input():
    spec = probe_net(5, 10)
    weights = probe_weights(5)
    image = np.full((5, 5), 0.5)
    base = output(spec, weights, image)
    outputs = [output(spec, perturbed(weights, "kernel", ij), image) for ij in itertools.product(range(3), range(3))]
    for moved in outputs:
        assert np.allclose(moved, outputs[0], rtol=1e-12, atol=1e-15)
    assert np.max(np.abs(outputs[0] - base)) > 0


def test_kernel_changes_are_distinguishable_on_a_non_constant_input():
    spec = probe_net(5, 10)
    weights = probe_weights(5)
    image = non_constant_image(5)
    first = output(spec, perturbed(weights, "kernel", (0, 0)), image)
    second = output(spec, perturbed(weights, "kernel", (2, 2)), image)
    assert not np.allclose(first, second, rtol=1e-12, atol=1e-15)
