"""Regenerate frozen.json: reference values computed without the library.

Run from the repository root: ``python tests/oracles/make_frozen.py``.
"""

import json
import os
import sys
from fractions import Fraction

import numpy as np

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.dirname(HERE))

from _support import acceptance_distribution, brute_force_hull  # noqa: E402


def orthonormal_design():
    # zero-mean, unit-norm, mutually orthogonal columns, so standardizing is a no-op
    return np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64) / 2.0


def main():
    out = {}

    hull_cases = {
        "single": [(1, 0.9)],
        "four_point": [(1, 0.9), (2, 0.5), (3, 0.45), (4, 0.2)],
        "equal_cost": [(1, 0.5), (1, 0.4), (2, 0.3)],
        "collinear": [(1, 0.75), (2, 0.5), (3, 0.25)],
    }
    out["hull"] = {k: {"points": v, "indices": brute_force_hull(v)} for k, v in hull_cases.items()}
    # height of segment (2,0.5)-(4,0.2) at cost 3
    out["hull"]["four_point"]["segment_height_at_3"] = float(Fraction(1, 2) + Fraction(1, 2) * (Fraction(1, 5) - Fraction(1, 2)))

    count_cases = [[0, 0], [1, 0], [1, 1, 0], [3, 0, 2], [5, 4, 3, 2, 1]]
    out["sampling"] = [{"counts": c, "probs": acceptance_distribution(c)} for c in count_cases]

    A = orthonormal_design()
    y = A @ np.array([2.0, 1.0])
    corr = A.T @ y
    out["fslr_orthonormal"] = {
        "design": A.tolist(),
        "target": y.tolist(),
        "first_feature": int(np.argmax(np.abs(corr))),
        "least_squares": np.linalg.solve(A.T @ A, A.T @ y).tolist(),
    }
    y10 = A @ np.array([10.0, 1.0])
    out["equivalence_10_to_1"] = {"target": y10.tolist(), "top": int(np.argmax(np.abs(A.T @ y10)))}

    rng = np.random.default_rng(20)
    X = rng.normal(size=(20, 5))
    yr = X @ rng.normal(size=5) + 0.3 * rng.normal(size=20)
    Xc = X - X.mean(axis=0)
    Xs = Xc / np.linalg.norm(Xc, axis=0)
    coef = np.linalg.solve(Xs.T @ Xs, Xs.T @ yr)  # normal equations
    out["fslr_random"] = {"design": X.tolist(), "target": yr.tolist(),
                          "ls_residual": float(np.linalg.norm(yr - Xs @ coef))}

    rng = np.random.default_rng(50)
    H = rng.normal(size=(50, 12))
    g = rng.normal(size=12)
    best, best_val = 0, None
    for i in range(50):  # exhaustive scan
        v = sum(float(H[i, t]) * float(g[t]) for t in range(12))
        if best_val is None or v < best_val:
            best, best_val = i, v
    out["boost_select"] = {"learners": H.tolist(), "gradient": g.tolist(), "argmin": best}

    rng = np.random.default_rng(30)
    pred = rng.integers(0, 3, 30)
    truth = rng.integers(0, 3, 30)
    out["error_count"] = {"pred": pred.tolist(), "truth": truth.tolist(),
                          "error": sum(int(a != b) for a, b in zip(pred, truth)) / 30}

    out["cost"] = {"dense_4_3": 4 * 3, "conv3x3_2_4_8x8": 3 * 3 * 2 * 4 * 8 * 8}

    with open(os.path.join(HERE, "frozen.json"), "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=1, sort_keys=True)
        fh.write("\n")


if __name__ == "__main__":
    main()
