"""Numpy fallback implementations of the hot kernels.

Semantics reference for the compiled extension in _fast.pyx; the two
must stay interchangeable.  Edge arrays are grouped by destination:
``seg_ptr`` has length N + 1 and edges for destination d occupy the
half-open range [seg_ptr[d], seg_ptr[d+1]).  Every segment must be
non-empty (the model guarantees this with self edges).
"""

import numpy as np


def _counts(seg_ptr):
    counts = np.diff(seg_ptr)
    if np.any(counts <= 0):
        raise ValueError("segment pointer must be strictly increasing")
    return counts


def seg_softmax(logits, seg_ptr):
    """Softmax over each destination segment of a flat edge vector."""
    counts = _counts(seg_ptr)
    starts = seg_ptr[:-1]
    m = np.maximum.reduceat(logits, starts)
    z = np.exp(logits - np.repeat(m, counts))
    s = np.add.reduceat(z, starts)
    return z / np.repeat(s, counts)


def seg_softmax_grad(weights, grad_out, seg_ptr):
    """Backward of seg_softmax: w * (g - <w, g>_segment)."""
    counts = _counts(seg_ptr)
    dot = np.add.reduceat(weights * grad_out, seg_ptr[:-1])
    return weights * (grad_out - np.repeat(dot, counts))


def gather_weighted_sum(weights, feats, src, seg_ptr):
    """out[d] = sum over edges e into d of weights[e] * feats[src[e]]."""
    _counts(seg_ptr)
    weighted = weights[:, None] * feats[src]
    return np.add.reduceat(weighted, seg_ptr[:-1], axis=0)


def gather_weighted_sum_grad(weights, feats, src, seg_ptr, grad_out):
    """Gradients of gather_weighted_sum w.r.t. weights and feats."""
    counts = _counts(seg_ptr)
    n, f = feats.shape
    g_edge = np.repeat(grad_out, counts, axis=0)
    grad_w = np.einsum("ef,ef->e", feats[src], g_edge)
    contrib = weights[:, None] * g_edge
    flat_idx = (src[:, None] * f + np.arange(f)[None, :]).ravel()
    grad_feats = np.bincount(
        flat_idx, weights=contrib.ravel(), minlength=n * f
    ).reshape(n, f)
    return grad_w, grad_feats


def godunov_window(
    rho,
    lanes,
    edge_src,
    edge_dst,
    edge_frac,
    inflow,
    cap_factor,
    is_sink,
    substeps,
    dt_min,
    dx_km,
    free_speed,
    wave_speed,
    capacity,
    jam_density,
):
    """Advance cell densities by `substeps` Godunov steps.

    Densities are per lane (veh/km/lane); fluxes are total (veh/h).
    `inflow` and `cap_factor` are held constant across the window.
    Mutates `rho` in place and returns the per-cell sums of density and
    local per-lane flow over the window, for later averaging.
    """
    n = rho.shape[0]
    dt_h = dt_min / 60.0
    dens_sum = np.zeros(n)
    flow_sum = np.zeros(n)
    for _ in range(substeps):
        cap_eff = capacity * cap_factor
        demand = np.minimum(free_speed * rho, cap_eff) * lanes
        supply = np.minimum(cap_eff, wave_speed * (jam_density - rho)) * lanes
        edge_demand = demand[edge_src] * edge_frac
        want = np.bincount(edge_dst, weights=edge_demand, minlength=n) + inflow
        ratio = np.divide(
            supply, want, out=np.full(n, np.inf), where=want > 0.0
        )
        scale = np.minimum(ratio, 1.0)
        edge_flux = edge_demand * scale[edge_dst]
        influx = np.bincount(edge_dst, weights=edge_flux, minlength=n)
        influx += inflow * scale
        outflux = np.bincount(edge_src, weights=edge_flux, minlength=n)
        outflux += np.where(is_sink, demand, 0.0)
        rho += dt_h * (influx - outflux) / (dx_km * lanes)
        q_local = np.minimum(
            np.minimum(free_speed * rho, wave_speed * (jam_density - rho)),
            cap_eff,
        )
        np.maximum(q_local, 0.0, out=q_local)
        dens_sum += rho
        flow_sum += q_local
    return dens_sum, flow_sum
