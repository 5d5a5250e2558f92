"""Fit a log-linear model to noisy marginal measurements by mirror descent."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import InvalidArgumentError, StructuralError
from .graphical import Clique, JunctionTree, LogLinearModel, cell_count

log = logging.getLogger(__name__)

DEFAULT_MAX_CELLS = 10**7


@dataclass
class Measurement:
    """Noisy counts of one marginal; ``sigma == 0`` marks an exact (noiseless) measurement."""

    clique: Clique
    noisy_counts: np.ndarray
    sigma: float

    def __post_init__(self):
        self.clique = tuple(int(a) for a in self.clique)
        self.noisy_counts = np.asarray(self.noisy_counts, dtype=float).ravel()
        if self.sigma < 0:
            raise InvalidArgumentError("sigma must be >= 0")

    @property
    def weight(self) -> float:
        return 1.0 if self.sigma == 0 else 1.0 / self.sigma**2


def estimate_total(measurements: Sequence[Measurement]) -> float:
    """Inverse-variance weighted estimate of the record count implied by the measurements."""
    exact = [m.noisy_counts.sum() for m in measurements if m.sigma == 0]
    if exact:
        return max(1.0, float(np.mean(exact)))
    sums = np.array([m.noisy_counts.sum() for m in measurements])
    variances = np.array([m.sigma**2 * m.noisy_counts.size for m in measurements])
    weights = 1.0 / variances
    return max(1.0, float(np.sum(weights * sums) / np.sum(weights)))


def estimate(
    measurements: Sequence[Measurement],
    sizes: Sequence[int],
    max_iters: int = 1000,
    tol: float = 1e-6,
    initial: LogLinearModel | None = None,
    total: float | None = None,
    max_cells: int = DEFAULT_MAX_CELLS,
) -> LogLinearModel:
    """Minimize sum_m w_m * ||N * p_theta(c_m) - y_m||^2 over the log-linear parameters theta.

    Mirror descent on theta with an Armijo test: one trial step per iteration, the step
    size halves on rejection and grows by 1% on acceptance. Weights are rescaled so the
    largest is 1 (the minimizer is unchanged), which makes 2 / N a sensible first step. Iteration stops when the L1 change of the
    fitted marginals, summed over measured cliques, falls below ``tol``.
    """
    if not measurements:
        raise InvalidArgumentError("estimate needs at least one measurement")
    sizes = tuple(sizes)
    cliques: list[Clique] = []
    for m in measurements:
        if m.noisy_counts.size != cell_count(sizes, m.clique):
            raise InvalidArgumentError(f"measurement on {m.clique} has {m.noisy_counts.size} cells")
        if m.clique not in cliques:
            cliques.append(m.clique)

    tree = JunctionTree(sizes, cliques)
    if tree.total_cells > max_cells:
        raise StructuralError(f"junction tree needs {tree.total_cells} cells > cap {max_cells}")
    n = float(total) if total is not None else estimate_total(measurements)

    theta = {c: np.zeros([sizes[a] for a in c]) for c in cliques}
    if initial is not None:
        for c, v in initial.potentials.items():
            if c in theta:
                theta[c] = v.copy()

    top = max(m.weight for m in measurements)
    weights = [m.weight / top for m in measurements]

    def evaluate(params):
        model = LogLinearModel(sizes, params, n, tree)
        mus = {c: n * model.project(c).ravel() for c in cliques}
        loss = 0.0
        grad = {c: np.zeros(mus[c].size) for c in cliques}
        for m, w in zip(measurements, weights):
            diff = mus[m.clique] - m.noisy_counts
            loss += 0.5 * w * float(diff @ diff)
            grad[m.clique] += w * diff
        return model, mus, loss, grad

    model, mus, loss, grad = evaluate(theta)
    alpha = 2.0 / n
    for it in range(max_iters):
        trial = {c: theta[c] - alpha * grad[c].reshape(theta[c].shape) for c in cliques}
        t_model, t_mus, t_loss, t_grad = evaluate(trial)
        predicted = sum(float(grad[c] @ (mus[c] - t_mus[c])) for c in cliques)
        if not loss - t_loss >= 0.5 * predicted:
            alpha *= 0.5
            continue
        alpha *= 1.01
        step = sum(float(np.abs(t_mus[c] - mus[c]).sum()) for c in cliques) / n
        theta, model, mus, loss, grad = trial, t_model, t_mus, t_loss, t_grad
        if step < tol:
            break
    return model
