"""Dense numpy evaluation of every attention variant on a small seeded case.

Parameters are regenerated with the reference RNG, so the printed outputs
are independent of the C++ kernels. Frozen into tests/test_attention.cpp.
"""
import numpy as np

from rng_reference import Xoshiro, gaussians_from

N, D_MODEL, D_HEAD, HEADS, D_K = 6, 4, 2, 2, 3
PARAM_SEED, INPUT_SEED, FEATURE_SEED, M = 11, 99, 5, 3


def gaussian(rng, rows, cols, std):
    return std * np.array(gaussians_from(rng, rows * cols)).reshape(rows, cols)


def sample_params():
    rng = Xoshiro(PARAM_SEED)
    wstd = 1.0 / np.sqrt(D_MODEL)
    heads = [tuple(gaussian(rng, D_MODEL, D_HEAD, wstd) for _ in range(3)) for _ in range(HEADS)]
    estd = 1.0 / np.sqrt(D_K)
    return heads, gaussian(rng, D_K, N, estd), gaussian(rng, D_K, N, estd)


def softmax(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def prf(x, omega):
    return np.exp(x @ omega - 0.5 * (x * x).sum(axis=1, keepdims=True)) / np.sqrt(omega.shape[1])


def elu1(x):
    return np.where(x >= 0, x + 1.0, np.exp(x))


def run(kind, feature):
    heads, e1, e2 = sample_params()
    rng = Xoshiro(INPUT_SEED)
    q, k, v = (gaussian(rng, N, D_MODEL, 1.0) for _ in range(3))
    omega = gaussian(Xoshiro(FEATURE_SEED), D_HEAD, M, 1.0)
    phi = (lambda x: prf(x, omega)) if feature == "prf" else elu1
    outs = []
    for wq, wk, wv in heads:
        qp = q @ wq / np.sqrt(D_HEAD)
        if kind == "full":
            outs.append(softmax(qp @ (k @ wk).T) @ (v @ wv))
        elif kind == "lowrank":
            outs.append(softmax(qp @ (e1 @ k @ wk).T) @ (e2 @ v @ wv))
        elif kind == "kernel":
            a = phi(qp) @ phi(k @ wk).T
            outs.append((a / a.sum(axis=1, keepdims=True)) @ (v @ wv))
        elif kind == "flurka":
            a = phi(qp) @ phi(e1 @ k @ wk).T
            outs.append((a / a.sum(axis=1, keepdims=True)) @ (e2 @ v @ wv))
    return np.hstack(outs)


if __name__ == "__main__":
    for kind, feature in [("full", None), ("lowrank", None), ("kernel", "prf"), ("kernel", "elu"),
                          ("flurka", "prf"), ("flurka", "elu")]:
        name = kind + ("_" + feature if feature else "")
        vals = ", ".join(repr(float(x)) for x in run(kind, feature).ravel())
        print(f"const std::vector<double> k_{name} = {{{vals}}};")
