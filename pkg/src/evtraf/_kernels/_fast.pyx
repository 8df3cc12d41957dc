# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels.  Must match numpy_backend semantics exactly."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def seg_softmax(double[::1] logits, long long[::1] seg_ptr):
    cdef Py_ssize_t n = seg_ptr.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out_arr = np.empty(logits.shape[0])
    cdef double[::1] out = out_arr
    cdef Py_ssize_t d, e, lo, hi
    cdef double m, s
    for d in range(n):
        lo = seg_ptr[d]
        hi = seg_ptr[d + 1]
        if hi <= lo:
            raise ValueError("segment pointer must be strictly increasing")
        m = logits[lo]
        for e in range(lo + 1, hi):
            if logits[e] > m:
                m = logits[e]
        s = 0.0
        for e in range(lo, hi):
            out[e] = exp(logits[e] - m)
            s += out[e]
        for e in range(lo, hi):
            out[e] /= s
    return out_arr


def seg_softmax_grad(double[::1] weights, double[::1] grad_out,
                     long long[::1] seg_ptr):
    cdef Py_ssize_t n = seg_ptr.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] out_arr = np.empty(weights.shape[0])
    cdef double[::1] out = out_arr
    cdef Py_ssize_t d, e, lo, hi
    cdef double dot
    for d in range(n):
        lo = seg_ptr[d]
        hi = seg_ptr[d + 1]
        if hi <= lo:
            raise ValueError("segment pointer must be strictly increasing")
        dot = 0.0
        for e in range(lo, hi):
            dot += weights[e] * grad_out[e]
        for e in range(lo, hi):
            out[e] = weights[e] * (grad_out[e] - dot)
    return out_arr


def gather_weighted_sum(double[::1] weights, double[:, ::1] feats,
                        long long[::1] src, long long[::1] seg_ptr):
    cdef Py_ssize_t n = seg_ptr.shape[0] - 1
    cdef Py_ssize_t f = feats.shape[1]
    cdef cnp.ndarray[double, ndim=2] out_arr = np.zeros((n, f))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t d, e, j, lo, hi, s
    cdef double w
    for d in range(n):
        lo = seg_ptr[d]
        hi = seg_ptr[d + 1]
        if hi <= lo:
            raise ValueError("segment pointer must be strictly increasing")
        for e in range(lo, hi):
            w = weights[e]
            s = src[e]
            for j in range(f):
                out[d, j] += w * feats[s, j]
    return out_arr


def gather_weighted_sum_grad(double[::1] weights, double[:, ::1] feats,
                             long long[::1] src, long long[::1] seg_ptr,
                             double[:, ::1] grad_out):
    cdef Py_ssize_t n = feats.shape[0]
    cdef Py_ssize_t f = feats.shape[1]
    cdef Py_ssize_t nseg = seg_ptr.shape[0] - 1
    cdef cnp.ndarray[double, ndim=1] gw_arr = np.zeros(weights.shape[0])
    cdef cnp.ndarray[double, ndim=2] gf_arr = np.zeros((n, f))
    cdef double[::1] gw = gw_arr
    cdef double[:, ::1] gf = gf_arr
    cdef Py_ssize_t d, e, j, lo, hi, s
    cdef double w, acc
    for d in range(nseg):
        lo = seg_ptr[d]
        hi = seg_ptr[d + 1]
        for e in range(lo, hi):
            s = src[e]
            w = weights[e]
            acc = 0.0
            for j in range(f):
                acc += feats[s, j] * grad_out[d, j]
                gf[s, j] += w * grad_out[d, j]
            gw[e] = acc
    return gw_arr, gf_arr


def godunov_window(double[::1] rho, double[::1] lanes,
                   long long[::1] edge_src, long long[::1] edge_dst,
                   double[::1] edge_frac, double[::1] inflow,
                   double[::1] cap_factor, cnp.uint8_t[::1] is_sink,
                   Py_ssize_t substeps, double dt_min, double dx_km,
                   double free_speed, double wave_speed, double capacity,
                   double jam_density):
    cdef Py_ssize_t n = rho.shape[0]
    cdef Py_ssize_t ne = edge_src.shape[0]
    cdef cnp.ndarray[double, ndim=1] dens_arr = np.zeros(n)
    cdef cnp.ndarray[double, ndim=1] flow_arr = np.zeros(n)
    cdef double[::1] dens_sum = dens_arr
    cdef double[::1] flow_sum = flow_arr
    cdef cnp.ndarray[double, ndim=1] dem_a = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] sup_a = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] want_a = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] scale_a = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] net_a = np.empty(n)
    cdef double[::1] demand = dem_a
    cdef double[::1] supply = sup_a
    cdef double[::1] want = want_a
    cdef double[::1] scale = scale_a
    cdef double[::1] net = net_a
    cdef Py_ssize_t step, i, e
    cdef double dt_h = dt_min / 60.0
    cdef double cap_eff, d_i, s_i, flux, q
    for step in range(substeps):
        for i in range(n):
            cap_eff = capacity * cap_factor[i]
            d_i = free_speed * rho[i]
            if d_i > cap_eff:
                d_i = cap_eff
            demand[i] = d_i * lanes[i]
            s_i = wave_speed * (jam_density - rho[i])
            if s_i > cap_eff:
                s_i = cap_eff
            supply[i] = s_i * lanes[i]
            want[i] = inflow[i]
            net[i] = 0.0
        for e in range(ne):
            want[edge_dst[e]] += demand[edge_src[e]] * edge_frac[e]
        for i in range(n):
            if want[i] > supply[i] and want[i] > 0.0:
                scale[i] = supply[i] / want[i]
            else:
                scale[i] = 1.0
        for e in range(ne):
            flux = demand[edge_src[e]] * edge_frac[e] * scale[edge_dst[e]]
            net[edge_dst[e]] += flux
            net[edge_src[e]] -= flux
        for i in range(n):
            net[i] += inflow[i] * scale[i]
            if is_sink[i]:
                net[i] -= demand[i]
            rho[i] += dt_h * net[i] / (dx_km * lanes[i])
            cap_eff = capacity * cap_factor[i]
            q = free_speed * rho[i]
            if wave_speed * (jam_density - rho[i]) < q:
                q = wave_speed * (jam_density - rho[i])
            if cap_eff < q:
                q = cap_eff
            if q < 0.0:
                q = 0.0
            dens_sum[i] += rho[i]
            flow_sum[i] += q
    return dens_arr, flow_arr
