# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled grid mirror-descent kernels; see ``_kernels_py`` for the contract."""

import numpy as np

from libc.math cimport exp, log, fabs


cdef double _normalize(double[::1] h, double[::1] vol, double[::1] p, double[::1] logp) noexcept nogil:
    cdef Py_ssize_t i, n = h.shape[0]
    cdef double m = h[0], z = 0.0, lz
    for i in range(1, n):
        if h[i] > m:
            m = h[i]
    for i in range(n):
        p[i] = exp(h[i] - m)
        z += p[i] * vol[i]
    lz = log(z)
    for i in range(n):
        p[i] = p[i] / z
        logp[i] = h[i] - m - lz
    return z


def normalize_dual(double[::1] h, double[::1] vol, double[::1] p_out):
    logp = np.empty(h.shape[0])
    cdef double[::1] lp = logp
    with nogil:
        _normalize(h, vol, p_out, lp)
    return logp


def md_dual_run(double[::1] h, double[::1] vol, double[::1] gammas, double[::1] bias_scales,
                double[::1] bias_shape, double[:, ::1] noise, double[::1] uniform_log,
                double[::1] entropy, double[::1] kl_to_uniform, double[::1] bias_sup,
                double[::1] noise_sup):
    cdef Py_ssize_t n = h.shape[0], K = gammas.shape[0], k, i
    cdef bint has_noise = noise.shape[0] > 0
    cdef double[::1] p = np.empty(n)
    cdef double[::1] logp = np.empty(n)
    cdef double bshape_sup = 0.0, g, b, u, usup, w, ent, kl
    for i in range(n):
        if fabs(bias_shape[i]) > bshape_sup:
            bshape_sup = fabs(bias_shape[i])
    with nogil:
        for k in range(K):
            _normalize(h, vol, p, logp)
            g = gammas[k]
            b = bias_scales[k]
            usup = 0.0
            for i in range(n):
                u = 0.0
                if has_noise:
                    u = noise[k, i]
                    if fabs(u) > usup:
                        usup = fabs(u)
                h[i] += g * ((-logp[i] + b * bias_shape[i]) + u)
            noise_sup[k] = usup
            bias_sup[k] = fabs(b) * bshape_sup
            _normalize(h, vol, p, logp)
            ent = 0.0
            kl = 0.0
            for i in range(n):
                w = p[i] * vol[i]
                ent -= w * logp[i]
                kl += w * (logp[i] - uniform_log[i])
            entropy[k] = ent
            kl_to_uniform[k] = kl
    return np.asarray(h)


def mirror_flow_euler(double[::1] h, double[::1] vol, double dt, Py_ssize_t steps,
                      double[::1] entropy, double[::1] var_logp):
    cdef Py_ssize_t n = h.shape[0], k, i
    cdef double[::1] p = np.empty(n)
    cdef double[::1] logp = np.empty(n)
    cdef double w, mean, var
    with nogil:
        for k in range(steps + 1):
            _normalize(h, vol, p, logp)
            mean = 0.0
            for i in range(n):
                mean += p[i] * vol[i] * logp[i]
            var = 0.0
            for i in range(n):
                w = logp[i] - mean
                var += p[i] * vol[i] * w * w
            entropy[k] = -mean
            var_logp[k] = var
            if k < steps:
                for i in range(n):
                    h[i] -= dt * logp[i]
    return np.asarray(h)
