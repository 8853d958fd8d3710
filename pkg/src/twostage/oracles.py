"""Brute-force reference oracles.

Nothing here imports the rest of the package: the oracles are deliberately
slow, scalar and independent so that they can check the vectorised code.
Running ``python3 -m twostage.oracles DIR`` regenerates the JSON fixtures.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Callable, Iterable, Sequence

import mpmath
import numpy as np

PRECISION = 60  # decimal digits for the high-precision references


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = float(f(x))
        flat[i] = keep - h
        down = float(f(x))
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def exhaustive_argmax(x, categories: Iterable[int], scorer: Callable[[object, int], float]) -> int:
    """Linear scan over ``categories`` in ascending id order; ties keep the lowest id."""
    best, best_score = None, None
    for c in sorted(int(c) for c in categories):
        s = float(scorer(x, c))
        if best_score is None or s > best_score:
            best, best_score = c, s
    if best is None:
        raise ValueError("no categories to choose from")
    return best


def cosine_scorer(image_embedding: Callable[[object], Sequence[float]],
                  class_vector: Callable[[int], Sequence[float]], tau: float = 1.0):
    """Scorer computing tau * cosine one scalar at a time (no shared array code)."""
    def score(x, c):
        u, v = list(image_embedding(x)), list(class_vector(c))
        dot = sum(a * b for a, b in zip(u, v))
        nu = sum(a * a for a in u) ** 0.5
        nv = sum(b * b for b in v) ** 0.5
        return tau * dot / (nu * nv)
    return score


def scalar_adamw_reference(theta0: float, grads: Sequence[float], lr: float, weight_decay: float = 0.0,
                           beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[float]:
    """Textbook AdamW on one scalar, evaluated with mpmath; returns theta after every step.

    theta <- theta * (1 - lr * wd); m, v moment updates; bias-corrected step.
    """
    if lr <= 0 or weight_decay < 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1) or eps <= 0:
        raise ValueError("invalid AdamW hyperparameters")
    with mpmath.workdps(PRECISION):
        mp = mpmath.mpf
        theta, m, v = mp(theta0), mp(0), mp(0)
        lr_, wd, b1, b2, ep = mp(lr), mp(weight_decay), mp(beta1), mp(beta2), mp(eps)
        out = []
        for t, g in enumerate(grads, start=1):
            g = mp(g)
            theta = theta * (1 - lr_ * wd)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            theta = theta - lr_ * mhat / (mpmath.sqrt(vhat) + ep)
            out.append(float(theta))
        return out


def cross_entropy_reference(logits: Sequence[float], target: int) -> float:
    """-log softmax(logits)[target] at high precision."""
    with mpmath.workdps(PRECISION):
        z = [mpmath.mpf(v) for v in logits]
        return float(mpmath.log(sum(mpmath.exp(v) for v in z)) - z[target])


def layer_norm_reference(x: Sequence[float], gamma: Sequence[float], beta: Sequence[float],
                         eps: float = 1e-5) -> list[float]:
    """Population-variance layer norm with eps inside the square root."""
    with mpmath.workdps(PRECISION):
        xs = [mpmath.mpf(v) for v in x]
        n = len(xs)
        mu = sum(xs) / n
        var = sum((v - mu) ** 2 for v in xs) / n
        inv = 1 / mpmath.sqrt(var + mpmath.mpf(eps))
        return [float(g * (v - mu) * inv + b) for v, g, b in zip(xs, gamma, beta)]


def harmonic_mean_reference(base: float, novel: float) -> float:
    with mpmath.workdps(PRECISION):
        b, n = mpmath.mpf(base), mpmath.mpf(novel)
        return float(2 * b * n / (b + n))


# -- fixture generation -------------------------------------------------------------
def build_fixtures() -> dict[str, dict]:
    """Every oracle fixture, keyed by file stem.  Deterministic given the code."""
    fixtures: dict[str, dict] = {}
    rng = np.random.default_rng(20240611)

    adamw = []
    adamw.append({"case": "constant_gradient", "theta0": 1.0, "grads": [0.5] * 10, "lr": 0.1,
                  "weight_decay": 0.01})
    adamw.append({"case": "alternating_gradient", "theta0": 0.3,
                  "grads": [1.0 if t % 2 == 0 else -1.0 for t in range(10)], "lr": 0.01,
                  "weight_decay": 0.0})
    adamw.append({"case": "zero_gradient_decay", "theta0": 2.0, "grads": [0.0] * 6, "lr": 0.1,
                  "weight_decay": 0.5})
    adamw.append({"case": "random_gradient", "theta0": -0.7,
                  "grads": [float(g) for g in rng.normal(size=25)], "lr": 2e-4,
                  "weight_decay": 0.01})
    for case in adamw:
        case.update(beta1=0.9, beta2=0.999, eps=1e-8)
        case["expected"] = scalar_adamw_reference(case["theta0"], case["grads"], case["lr"],
                                                  case["weight_decay"], case["beta1"],
                                                  case["beta2"], case["eps"])
        case["tolerance"] = 1e-12
    fixtures["adamw"] = {"oracle": "scalar_adamw_reference", "cases": adamw}

    ce = []
    for logits, target in (([10.0, 0.0, 0.0], 0), ([1.0, 2.0, 3.0], 2), ([0.0, 0.0], 1),
                           ([800.0, 0.0, -800.0], 1)):
        ce.append({"logits": logits, "target": target,
                   "expected": cross_entropy_reference(logits, target), "tolerance": 1e-12})
    for _ in range(6):
        logits = [float(v) for v in rng.normal(scale=4.0, size=7)]
        target = int(rng.integers(7))
        ce.append({"logits": logits, "target": target,
                   "expected": cross_entropy_reference(logits, target), "tolerance": 1e-12})
    fixtures["cross_entropy"] = {"oracle": "cross_entropy_reference", "cases": ce}

    ln = []
    for x in ([1.0, 2.0, 3.0, 4.0], [5.0, 5.0, 5.0], [1e-3, -2e-3, 4e-3, 0.0, 7e-3]):
        n = len(x)
        ln.append({"x": x, "gamma": [1.0] * n, "beta": [0.0] * n, "eps": 1e-5,
                   "expected": layer_norm_reference(x, [1.0] * n, [0.0] * n), "tolerance": 1e-12})
    for _ in range(4):
        x = [float(v) for v in rng.normal(scale=3.0, size=8)]
        g = [float(v) for v in rng.normal(1.0, 0.3, size=8)]
        b = [float(v) for v in rng.normal(0.0, 0.3, size=8)]
        ln.append({"x": x, "gamma": g, "beta": b, "eps": 1e-5,
                   "expected": layer_norm_reference(x, g, b), "tolerance": 1e-12})
    fixtures["layer_norm"] = {"oracle": "layer_norm_reference", "cases": ln}

    hm = []
    for b, n in ((85.55, 75.48), (77.71, 70.99), (96.91, 67.09), (100.0, 0.0), (50.0, 50.0)):
        hm.append({"base": b, "novel": n, "expected": harmonic_mean_reference(b, n),
                   "tolerance": 1e-12})
    fixtures["harmonic_mean"] = {"oracle": "harmonic_mean_reference", "cases": hm}
    return fixtures


def write_fixtures(directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, payload in build_fixtures().items():
        path = directory / f"{stem}.json"
        path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        written.append(path)
    return written


if __name__ == "__main__":  # pragma: no cover
    target = sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures"
    for p in write_fixtures(target):
        print(p)
