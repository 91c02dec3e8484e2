"""Independent reference implementations used as test oracles.

Written with plain Python loops and the math module so they share no code
with the vectorised paths they check.
"""
import math


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_gru_step(x, h_prev, p):
    """One GRU step, element by element.

    ``p`` holds nested-sequence weights keyed like the library
    (W_* : in x H, U_* : H x H, biases : H).
    """
    I, H = len(x), len(h_prev)

    def affine(W, b_in, U, b_h, hvec):
        out = []
        for j in range(H):
            s = b_in[j] + b_h[j]
            for i in range(I):
                s += x[i] * W[i][j]
            for i in range(H):
                s += hvec[i] * U[i][j]
            out.append(s)
        return out

    z = [_sig(v) for v in affine(p["W_z"], p["b_iz"], p["U_z"], p["b_hz"], h_prev)]
    r = [_sig(v) for v in affine(p["W_r"], p["b_ir"], p["U_r"], p["b_hr"], h_prev)]
    rh = [r[j] * h_prev[j] for j in range(H)]
    n = [math.tanh(v) for v in affine(p["W_h"], p["b_ih"], p["U_h"], p["b_hh"], rh)]
    return [z[j] * n[j] + (1.0 - z[j]) * h_prev[j] for j in range(H)]


def mse_ref(pred, target):
    total = 0.0
    for a, b in zip(pred, target):
        total += (a - b) ** 2
    return total / len(pred)


def mape_ref(pred, target):
    terms = [abs((t - p) / t) for p, t in zip(pred, target) if t != 0]
    return sum(terms) / len(terms) * 100.0
