"""Shared fixtures and numeric helpers for the test suite."""

import numpy as np
import pytest

from evtraf.roadgraph import RoadGraph, RoadNode, chain_graph
from evtraf.tensor import Tensor


def central_diff(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar f at ndarray x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    g = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        g[i] = (hi - lo) / (2.0 * eps)
    return grad


def check_grad(make_loss, values, rtol=1e-5, atol=1e-8, eps=1e-6):
    """Compare tape gradients of make_loss(*tensors) against central FD.

    `values` is a list of ndarrays; make_loss receives one Tensor per
    entry and must return a scalar Tensor.
    """
    tensors = [Tensor(v, requires_grad=True) for v in values]
    loss = make_loss(*tensors)
    loss.backward()
    for k, v in enumerate(values):
        def f(x, k=k):
            args = [Tensor(u) for u in values]
            args[k] = Tensor(x)
            return float(make_loss(*args).data)

        fd = central_diff(f, v.copy(), eps=eps)
        got = tensors[k].grad
        assert got is not None, f"missing gradient for argument {k}"
        denom = np.maximum(np.abs(fd), np.abs(got))
        err = np.abs(got - fd)
        ok = err <= atol + rtol * denom
        assert ok.all(), (
            f"argument {k}: max rel err "
            f"{(err / np.maximum(denom, 1e-300)).max():.3e}"
        )


@pytest.fixture
def chain5():
    return chain_graph(5)


@pytest.fixture
def chain8():
    return chain_graph(8)


@pytest.fixture
def two_lane_chain():
    nodes = [RoadNode(f"n{i}", 0.4, 2) for i in range(6)]
    edges = [(f"n{i}", f"n{i+1}") for i in range(5)]
    return RoadGraph(nodes, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
