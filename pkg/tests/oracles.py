"""Reference computations that share no code with the package."""

import math

import mpmath
import numpy as np


def central_difference_grads(loss_fn, params, h=1e-5):
    """Numerical gradient of ``loss_fn(params)`` for every coordinate."""
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn(params)
            flat[i] = old - h
            down = loss_fn(params)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def gelu_series(x, terms_dps=60):
    """x * Phi(x) with erf from its Maclaurin series at high precision."""
    with mpmath.workdps(terms_dps):
        z = mpmath.mpf(x) / mpmath.sqrt(2)
        total, term, n = mpmath.mpf(0), z, 0
        while True:
            contrib = term / (2 * n + 1)
            total += contrib
            if abs(contrib) < mpmath.mpf(10) ** (-(terms_dps - 5)) and n > 5:
                break
            n += 1
            term = -term * z * z / n
        erf = 2 / mpmath.sqrt(mpmath.pi) * total
        return float(mpmath.mpf(x) * (1 + erf) / 2)


def sequence_violations(elements, edge_set, node_set, min_nodes, max_nodes):
    out = []
    if len(elements) % 2 == 0:
        return ["alternation"]
    for i, lab in enumerate(elements):
        if (i % 2 == 0) != (lab in node_set):
            out.append("alternation")
            break
    seen = set()
    for i in range(0, len(elements) - 2, 2):
        a, e, b = elements[i], elements[i + 1], elements[i + 2]
        if (a, e, b) not in edge_set:
            out.append("membership")
        if (a, e) in seen:
            out.append("uniqueness")
        seen.add((a, e))
    n = (len(elements) + 1) // 2
    if not min_nodes <= n <= max_nodes:
        out.append("bounds")
    return out


def two_pass_mean_2sd(values):
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, 2 * math.sqrt(var)


def tensor_count(cfg):
    """Parameter count summed tensor by tensor from the architecture description."""
    d, f, V, L = cfg.d_model, cfg.ffn_dim, cfg.vocab_size, cfg.max_len
    tensors = [V * d, L * d]
    for _ in range(cfg.n_layers):
        tensors += [d, d]  # ln1
        tensors += [d * d, d] * 4  # q, k, v, o
        tensors += [d, d]  # ln2
        tensors += [d * f, f, f * d, d]
    tensors += [d * V, V]
    return sum(tensors)
