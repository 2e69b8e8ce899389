"""Forward-stagewise linear regression, boosting selection, and a check that
shortcut selection on a linear graph picks the same feature.

With features as the only eligible layers and identity as the only op,
the shortcut weight that grows fastest is the one whose feature best
aligns with the negative loss gradient, i.e. the residual.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .builder import GraphBuilder
from .graphcore import ComputationGraph, OpKind, ParameterStore
from .weaklearn import DEFAULT_LAMBDA, initialize_candidates, select_top, weak_learn


@dataclass
class DesignMatrix:
    values: np.ndarray
    norms: np.ndarray
    means: np.ndarray

    @classmethod
    def from_array(cls, X, standardize=True) -> "DesignMatrix":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"design must be a non-empty 2-D array, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("design has non-finite entries")
        means = X.mean(axis=0) if standardize else np.zeros(X.shape[1])
        Xc = X - means
        norms = np.linalg.norm(Xc, axis=0)
        if np.any(norms == 0):
            raise ValueError(f"all-zero columns after centering: {np.flatnonzero(norms == 0).tolist()}")
        if standardize:
            Xc = Xc / norms
        return cls(Xc, norms, means)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class CoefficientPath:
    # (iteration, feature index, coefficient snapshot, residual norm)
    steps: list[tuple[int, int, np.ndarray, float]] = field(default_factory=list)

    @property
    def coefficients(self) -> np.ndarray:
        return self.steps[-1][2]

    @property
    def residual_norm(self) -> float:
        return self.steps[-1][3]

    def to_csv(self, path):
        p = len(self.coefficients) if self.steps else 0
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "feature"] + [f"coef_{j}" for j in range(p)] + ["residual_norm"])
            for it, j, beta, rn in self.steps:
                w.writerow([it, j] + [repr(float(b)) for b in beta] + [repr(rn)])


def boost_select(learner_outputs, loss_gradient) -> int:
    """Index of the learner minimizing ``<gradient, h>``; lowest index on ties."""
    H = np.asarray(learner_outputs, dtype=np.float64)
    g = np.asarray(loss_gradient, dtype=np.float64)
    if H.size == 0 or H.ndim != 2:
        raise ValueError("need at least one learner output vector")
    if H.shape[1] != g.shape[0]:
        raise ValueError(f"learner length {H.shape[1]} does not match gradient length {g.shape[0]}")
    return int(np.argmin(H @ g))


def fslr_run(X, y, step, iterations, standardize=True) -> CoefficientPath:
    """Move the coefficient of the feature most correlated with the residual
    by ``step`` in the direction of the correlation, ``iterations`` times."""
    if not step > 0:
        raise ValueError("step must be positive")
    D = X if isinstance(X, DesignMatrix) else DesignMatrix.from_array(X, standardize)
    A = D.values
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != A.shape[0]:
        raise ValueError("target length does not match the design")
    beta = np.zeros(A.shape[1])
    r = y.copy()
    path = CoefficientPath()
    for it in range(iterations):
        corr = A.T @ r
        j = int(np.argmax(np.abs(corr)))
        delta = step * np.sign(corr[j])
        beta[j] += delta
        r = r - delta * A[:, j]
        rn = float(np.linalg.norm(r))
        if not np.isfinite(rn):
            raise FloatingPointError(f"non-finite residual at iteration {it} (feature {j}, |corr| {abs(corr[j])})")
        path.steps.append((it, j, beta.copy(), rn))
    return path


def least_squares_residual(X, y, standardize=True) -> float:
    D = X if isinstance(X, DesignMatrix) else DesignMatrix.from_array(X, standardize)
    y = np.asarray(y, dtype=np.float64).ravel()
    coef, *_ = np.linalg.lstsq(D.values, y, rcond=None)
    return float(np.linalg.norm(y - D.values @ coef))


# -- linear models as graphs ----------------------------------------------------


def linear_graph(p, coef=None):
    """``y_hat = X @ coef`` with one frozen one-hot projection per feature.

    Feature layers are tagged ``f0 .. f{p-1}``; the prediction is a boosted
    add node tagged ``pred``. Every parameter is frozen.
    """
    coef = np.zeros(p) if coef is None else np.asarray(coef, dtype=np.float64)
    b = GraphBuilder()
    x = b.add(OpKind.PLACEHOLDER, attrs={"source": "inputs", "shape": [p]})
    t = b.add(OpKind.PLACEHOLDER, attrs={"source": "targets", "shape": [1]})
    for j in range(p):
        key = b.param(f"lin/f{j}/fixed", np.eye(p)[:, j: j + 1])
        b.add(OpKind.DENSE, [x], [key], cell=0, tag=f"f{j}")
    base_key = b.param("lin/base/fixed", coef.reshape(p, 1))
    base = b.add(OpKind.DENSE, [x], [base_key], cell=0)
    pred = b.add(OpKind.ADD, [base], cell=0, tag="pred", is_out=True)
    loss = b.add(OpKind.MSE, [pred, t])
    g: ComputationGraph = b.graph
    g.output_id, g.loss_id = pred, loss
    return g.validate(), b.params


@dataclass(frozen=True)
class EquivalenceConfig:
    rounds: int = 1
    step: float = 0.1  # FSLR move between rounds
    epochs: int = 5
    lr0: float = 0.05
    lambda_: float = DEFAULT_LAMBDA
    zero_tol: float = 1e-9  # relative size below which correlations count as zero
    seed: int = 0


def linear_equivalence_run(X, y, config: EquivalenceConfig | None = None) -> dict:
    """Compare shortcut selection with boosting/FSLR selection, round by round.

    Each round attaches identity shortcuts from every feature to the
    prediction, trains them with full-batch steps, and ranks features by
    ``|alpha|``. The boosting choice comes from the same residual. Between
    rounds the FSLR state advances by one step on the boosting choice.
    """
    config = config or EquivalenceConfig()
    D = DesignMatrix.from_array(X)
    A = D.values
    y = np.asarray(y, dtype=np.float64).ravel()
    n, p = A.shape
    beta = np.zeros(p)
    rounds = []
    for r in range(config.rounds):
        resid = y - A @ beta
        grad = -2.0 * resid / n  # d(mean squared error)/d(prediction)
        corr = A.T @ resid
        learners = np.concatenate([A.T, -A.T])  # each feature with both signs
        boost = boost_select(learners, grad) % p
        informative = bool(np.max(np.abs(corr)) > config.zero_tol * max(np.linalg.norm(y), 1e-300))
        graph, params = linear_graph(p, beta)
        g2, p2, cands, penalty = initialize_candidates(graph, params, lambda_=config.lambda_, opset="linear",
                                                       rng=np.random.default_rng(config.seed))
        res = weak_learn(g2, p2, cands, A, y[:, None], epochs=config.epochs, lr0=config.lr0, batch_size=n,
                         rng=np.random.default_rng(config.seed), penalty=penalty)
        alphas = cands[0].alphas(res.params)
        ranked = select_top(alphas, p)
        ranking = [int(t.input_tag[1:]) for t in ranked]
        rounds.append({
            "round": r,
            "alpha": {t.input_tag: alphas[t] for t in cands[0].terms},
            "alpha_ranking": ranking,
            "boost_choice": boost,
            "fslr_choice": int(np.argmax(np.abs(corr))),
            "agree": ranking[0] == boost,
            "informative": informative,
        })
        beta[boost] += config.step * np.sign(corr[boost])
    return {
        "rounds": rounds,
        "agreement": sum(r["agree"] for r in rounds) / len(rounds) if rounds else 1.0,
        "no_informative_shortcut": not any(r["informative"] for r in rounds),
    }


def read_matrix_csv(path) -> np.ndarray:
    """Numeric CSV; a non-numeric first row is treated as a header."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row]
    if not rows:
        raise ValueError(f"{path}: empty file")
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        rows = rows[1:]
    return np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
