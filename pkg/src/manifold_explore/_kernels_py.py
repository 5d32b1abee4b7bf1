"""Pure-NumPy versions of the grid mirror-descent kernels.

Same signatures and results as the compiled ``_kernels`` extension; used
when the extension is not built.
"""

import numpy as np


def normalize_dual(h, vol, p_out):
    """Write ``p = exp(h) / sum(exp(h) * vol)`` into ``p_out``; return ``log p``."""
    m = np.max(h)
    e = np.exp(h - m)
    z = np.dot(e, vol)
    p_out[:] = e / z
    return h - m - np.log(z)


def md_dual_run(h, vol, gammas, bias_scales, bias_shape, noise, uniform_log,
                entropy, kl_to_uniform, bias_sup, noise_sup):
    """Advance ``h <- h + gamma_k (-log p_k + b_k + U_k)`` in place.

    ``b_k = bias_scales[k] * bias_shape``; ``U_k = noise[k]`` (pass an empty
    ``(0, n)`` array for the noiseless recursion). Diagnostics for the
    iterate *after* each update are written into the four output arrays.
    """
    n = h.shape[0]
    p = np.empty(n)
    bshape_sup = np.max(np.abs(bias_shape)) if n else 0.0
    has_noise = noise.shape[0] > 0
    for k in range(gammas.shape[0]):
        logp = normalize_dual(h, vol, p)
        step = -logp + bias_scales[k] * bias_shape
        if has_noise:
            step = step + noise[k]
            noise_sup[k] = np.max(np.abs(noise[k]))
        else:
            noise_sup[k] = 0.0
        h += gammas[k] * step
        bias_sup[k] = abs(bias_scales[k]) * bshape_sup
        logp = normalize_dual(h, vol, p)
        w = p * vol
        entropy[k] = -np.dot(w, logp)
        kl_to_uniform[k] = np.dot(w, logp - uniform_log)
    return h


def mirror_flow_euler(h, vol, dt, steps, entropy, var_logp):
    """Explicit Euler on ``dh/dt = -log p``; records entropy and ``Var_p(log p)``.

    ``entropy`` and ``var_logp`` have length ``steps + 1`` (initial state
    included). ``h`` is updated in place.
    """
    n = h.shape[0]
    p = np.empty(n)
    for k in range(steps + 1):
        logp = normalize_dual(h, vol, p)
        w = p * vol
        mean = np.dot(w, logp)
        entropy[k] = -mean
        var_logp[k] = np.dot(w, (logp - mean) ** 2)
        if k < steps:
            h -= dt * logp
    return h
