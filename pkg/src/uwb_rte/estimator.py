"""Two-step relative transform estimator: closed-form linear solve + one Gauss-Newton step.

Stacking order for every n-vector / n-row matrix is ``(l2, l1, i)``: tag-major,
then anchor, then repetition. This is the order in which per-tag blocks of
``N * N1`` squared ranges are centered.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .geometry import (
    GAMMA2,
    PSI_MATRIX,
    SELECTOR_T,
    FrameTransform,
    block_from_x,
    matrix_rank,
    normalize_angle,
    project_to_so2,
    vec_column_major,
    yaw_matrix,
)

RESIDUAL_NORM_TOL = 1e-9
NORMAL_COND_TOL = 1e-12


class DegenerateGeometryError(ValueError):
    """The measurement geometry does not determine the transform."""


class DegenerateResidualWarning(UserWarning):
    pass


class GridBoundaryWarning(UserWarning):
    pass


def stacked_ranges(m) -> np.ndarray:
    """Raw ranges as an n-vector in ``(l2, l1, i)`` order."""
    return np.ascontiguousarray(np.transpose(m.ranges, (1, 0, 2))).reshape(-1)


def stacked_weights(m) -> np.ndarray:
    """``1 / sigma^2`` per row, aligned with :func:`stacked_ranges`."""
    w = 1.0 / np.asarray(m.sigma_pair, dtype=float) ** 2
    return np.repeat(w.T.reshape(-1), m.n_rep)


def centered_anchors(p1: np.ndarray, n_rep: int) -> np.ndarray:
    """``p1_bar`` as (N * N1, 3): each anchor repeated N times, minus the anchor mean."""
    p1 = np.asarray(p1, dtype=float)
    return np.repeat(p1 - p1.mean(axis=0), n_rep, axis=0)


def design_matrix(p1, p2, n_rep: int) -> np.ndarray:
    """The n x 5 matrix ``[H1 | H2]`` with ``H1 = -2 (p2^T kron p1_bar^T) T`` and ``H2 = -2 (1 kron p1_bar^T)``."""
    p1_bar_t = centered_anchors(p1, n_rep)
    p2_t = np.asarray(p2, dtype=float)
    h1 = -2.0 * np.kron(p2_t, p1_bar_t) @ SELECTOR_T
    h2 = -2.0 * np.kron(np.ones((len(p2_t), 1)), p1_bar_t)
    return np.hstack([h1, h2])


def block_projector(size: int) -> np.ndarray:
    """``P = I - 1 1^T / size``; used only for checks, the solver centers blocks directly."""
    return np.eye(size) - np.full((size, size), 1.0 / size)


def build_rhs(m, *, gamma2_shift: bool = True) -> np.ndarray:
    """Right-hand side ``d`` of the linear first step.

    Per tag ``l2``, the ``N * N1`` bias-corrected values ``d^2 - sigma^2 - ||p1||^2`` are
    centered (the projector removes the unknown ``||R p2 + t||^2`` term). The vertical
    part of the tag positions, known independently of the yaw, is then moved to the
    right-hand side via ``2 (p2^T kron p1_bar^T) vec(gamma2 gamma2^T)``.
    """
    p1 = np.asarray(m.anchor_positions, dtype=float)
    sq = m.ranges ** 2 - (m.sigma_pair ** 2)[:, :, None] - np.sum(p1 ** 2, axis=1)[:, None, None]
    blocks = np.transpose(sq, (1, 0, 2)).reshape(m.n2, -1)
    blocks = blocks - blocks.mean(axis=1, keepdims=True)
    d = blocks.reshape(-1)
    if gamma2_shift:
        gg = vec_column_major(np.outer(GAMMA2, GAMMA2))
        d = d + 2.0 * np.kron(np.asarray(m.tag_positions, dtype=float), centered_anchors(p1, m.n_rep)) @ gg
    return d


@dataclass(frozen=True)
class LinearSystem:
    h: np.ndarray
    rhs: np.ndarray
    n: int
    rank_h: int
    anchor_centered_rank: int
    tag_rank: int

    def rank_failures(self) -> list[str]:
        out = []
        if self.anchor_centered_rank < 3:
            out.append(f"anchor positions are coplanar (centered rank {self.anchor_centered_rank} < 3)")
        if self.tag_rank < 3:
            out.append(f"tag positions are coplanar with the origin (rank {self.tag_rank} < 3)")
        if self.rank_h < 5:
            out.append(f"design matrix rank {self.rank_h} < 5")
        return out


def build_design_matrix(m) -> LinearSystem:
    p1 = np.asarray(m.anchor_positions, dtype=float)
    p2 = np.asarray(m.tag_positions, dtype=float)
    h = design_matrix(p1, p2, m.n_rep)
    return LinearSystem(
        h=h,
        rhs=build_rhs(m),
        n=h.shape[0],
        rank_h=matrix_rank(h),
        anchor_centered_rank=matrix_rank(p1 - p1.mean(axis=0)),
        tag_rank=matrix_rank(p2),
    )


@dataclass(frozen=True)
class FirstStepEstimate:
    x_hat: np.ndarray
    r_tilde_hat: np.ndarray
    theta_hat: float
    t_hat: np.ndarray
    rank_h: int = 5

    @property
    def transform(self) -> FrameTransform:
        return FrameTransform(self.theta_hat, self.t_hat)


def solve_linear_step(sys: LinearSystem) -> FirstStepEstimate:
    """Unconstrained least squares for ``[sin, cos, t]`` via QR, then projection onto SO(2)."""
    if sys.rank_h < 5:
        raise DegenerateGeometryError("rank-deficient design matrix: " + "; ".join(sys.rank_failures()))
    q, r = np.linalg.qr(sys.h)
    y = solve_triangular(r, q.T @ sys.rhs)
    x_hat, t_hat = y[:2], y[2:]
    r_tilde = block_from_x(x_hat)
    projected = project_to_so2(r_tilde)
    theta = normalize_angle(math.atan2(projected[1, 0], projected[0, 0]))
    return FirstStepEstimate(x_hat, r_tilde, theta, t_hat, sys.rank_h)


def first_step(m) -> FirstStepEstimate:
    return solve_linear_step(build_design_matrix(m))


def predicted_ranges(m, theta: float, t) -> np.ndarray:
    """``||p1 - R(theta) p2 - t||`` per (l1, l2) pair, shape (N1, N2)."""
    p2_in_1 = np.asarray(m.tag_positions, dtype=float) @ yaw_matrix(theta).T + np.asarray(t, dtype=float)
    diff = np.asarray(m.anchor_positions, dtype=float)[:, None, :] - p2_in_1[None, :, :]
    return np.linalg.norm(diff, axis=2)


def cost(m, tf: FrameTransform) -> float:
    """Weighted sum of squared range residuals (the negative log-likelihood up to constants)."""
    pred = predicted_ranges(m, tf.theta, tf.translation)
    resid = m.ranges - pred[:, :, None]
    return float(np.sum(resid ** 2 / (m.sigma_pair ** 2)[:, :, None]))


def _pair_jacobian(m, theta: float, t) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair Jacobian (N2, N1, 4) and residual-vector norms (N2, N1)."""
    p1 = np.asarray(m.anchor_positions, dtype=float)
    p2 = np.asarray(m.tag_positions, dtype=float)
    rot = yaw_matrix(theta)
    f = p1[None, :, :] - (p2 @ rot.T)[:, None, :] - np.asarray(t, dtype=float)
    norms = np.linalg.norm(f, axis=2)
    # d/d(delta) R(theta + delta) p2 at delta = 0 is R(theta) mat(Psi) p2.
    dp2 = p2 @ (rot @ PSI_MATRIX).T
    with np.errstate(divide="ignore", invalid="ignore"):
        d_theta = -np.einsum("bak,bk->ba", f, dp2) / norms
        d_t = -f / norms[:, :, None]
    return np.concatenate([d_theta[:, :, None], d_t], axis=2), norms


def gn_jacobian(m, theta_hat: float, t_hat, *, drop_degenerate: bool = False):
    """n x 4 Jacobian of predicted ranges w.r.t. ``(delta_theta, t)`` at ``(theta_hat, t_hat)``.

    Raises :class:`DegenerateGeometryError` if an anchor coincides with a predicted tag
    position. With ``drop_degenerate=True`` such rows are zeroed instead and the
    function returns ``(J, keep_mask)``.
    """
    jac, norms = _pair_jacobian(m, theta_hat, t_hat)
    bad = norms < RESIDUAL_NORM_TOL
    if bad.any() and not drop_degenerate:
        raise DegenerateGeometryError(
            f"{int(bad.sum())} anchor/tag pair(s) have predicted range below {RESIDUAL_NORM_TOL}")
    jac[bad] = 0.0
    full = np.repeat(jac.reshape(-1, 4), m.n_rep, axis=0)
    if drop_degenerate:
        return full, np.repeat(~bad.reshape(-1), m.n_rep)
    return full


def _gn_increment(m, theta: float, t) -> np.ndarray:
    jac, keep = gn_jacobian(m, theta, t, drop_degenerate=True)
    if not keep.all():
        warnings.warn(
            f"dropping {int((~keep).sum())} rows with near-zero predicted range from the Gauss-Newton step",
            DegenerateResidualWarning, stacklevel=3)
    w = stacked_weights(m) * keep
    pred = np.repeat(predicted_ranges(m, theta, t).T.reshape(-1), m.n_rep)
    resid = stacked_ranges(m) - pred
    normal = jac.T @ (w[:, None] * jac)
    if not np.all(np.isfinite(normal)) or 1.0 / np.linalg.cond(normal) < NORMAL_COND_TOL:
        raise DegenerateGeometryError("Gauss-Newton normal matrix is singular")
    return np.linalg.solve(normal, jac.T @ (w * resid))


@dataclass(frozen=True)
class RefinedEstimate:
    transform: FrameTransform
    delta_theta: float
    cost_before: float
    cost_after: float
    wall_time: float = float("nan")
    first: FirstStepEstimate | None = None
    iterations: int = 1
    converged: bool = True
    rank_h: int = 5
    n: int = 0


def gn_one_step(m, first: FirstStepEstimate) -> RefinedEstimate:
    """One undamped Gauss-Newton step on the weighted range cost, linearized at the first step."""
    delta = _gn_increment(m, first.theta_hat, first.t_hat)
    refined = FrameTransform(first.theta_hat + delta[0], np.asarray(first.t_hat) + delta[1:])
    return RefinedEstimate(
        transform=refined,
        delta_theta=float(delta[0]),
        cost_before=cost(m, first.transform),
        cost_after=cost(m, refined),
        first=first,
        rank_h=first.rank_h,
        n=m.n,
    )


def two_step_estimate(m) -> RefinedEstimate:
    """Closed-form first step, SO(2) projection, then a single Gauss-Newton step."""
    start = time.perf_counter()
    first = first_step(m)
    delta = _gn_increment(m, first.theta_hat, first.t_hat)
    elapsed = time.perf_counter() - start
    refined = FrameTransform(first.theta_hat + delta[0], np.asarray(first.t_hat) + delta[1:])
    return RefinedEstimate(
        transform=refined,
        delta_theta=float(delta[0]),
        cost_before=cost(m, first.transform),
        cost_after=cost(m, refined),
        wall_time=elapsed,
        first=first,
        rank_h=first.rank_h,
        n=m.n,
    )


def ml_oracle_full_gn(m, init: FrameTransform, tol: float = 1e-12, max_iter: int = 100,
                      max_halvings: int = 30) -> RefinedEstimate:
    """Iterate Gauss-Newton to convergence with step halving, as a maximum-likelihood reference.

    Stops when the increment norm drops below ``tol``. If no halved step lowers the
    cost the iterate is numerically stationary and the loop ends there.
    """
    start = time.perf_counter()
    theta, t = init.theta, np.asarray(init.translation, dtype=float).copy()
    c0 = c = cost(m, init)
    converged = False
    it = 0
    total_dtheta = 0.0
    while it < max_iter:
        it += 1
        step = _gn_increment(m, theta, t)
        if np.linalg.norm(step) < tol:
            converged = True
            break
        scale = 1.0
        for _ in range(max_halvings + 1):
            cand = FrameTransform(theta + scale * step[0], t + scale * step[1:])
            c_new = cost(m, cand)
            if c_new <= c:
                break
            scale *= 0.5
        else:
            # no descent along the Gauss-Newton direction: stationary to working precision
            converged = np.linalg.norm(step) < 1e-6
            break
        total_dtheta += scale * step[0]
        theta, t, c = cand.theta, np.asarray(cand.translation).copy(), c_new
        if scale * np.linalg.norm(step) < tol:
            converged = True
            break
    return RefinedEstimate(
        transform=FrameTransform(theta, t),
        delta_theta=float(total_dtheta),
        cost_before=c0,
        cost_after=c,
        wall_time=time.perf_counter() - start,
        iterations=it,
        converged=converged,
        n=m.n,
    )


@dataclass(frozen=True)
class _PairSums:
    """Sufficient statistics of the range cost per (l1, l2) pair."""

    w: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    n_rep: int
    p1: np.ndarray
    p2: np.ndarray

    @classmethod
    def of(cls, m) -> "_PairSums":
        return cls(1.0 / m.sigma_pair ** 2, m.ranges.sum(axis=2), (m.ranges ** 2).sum(axis=2), m.n_rep,
                   np.asarray(m.anchor_positions, dtype=float), np.asarray(m.tag_positions, dtype=float))

    def costs(self, theta: float, ts: np.ndarray) -> np.ndarray:
        """Cost for one yaw and a stack of translations ``ts`` (T, 3)."""
        q = self.p2 @ yaw_matrix(theta).T
        diff = self.p1[None, :, None, :] - q[None, None, :, :] - ts[:, None, None, :]
        pred = np.sqrt(np.einsum("...k,...k->...", diff, diff))
        per_pair = self.n_rep * pred ** 2 - 2.0 * pred * self.s1 + self.s2
        return np.einsum("tab,ab->t", per_pair, self.w)


def grid_search_oracle(m, theta_steps: int, t_box, t_steps: int, refine_tol: float = 1e-6,
                       max_evals: int = 2_000_000) -> FrameTransform:
    """Brute-force minimizer of the range cost over a yaw grid and a translation lattice.

    ``t_box`` is ``(lower, upper)`` corner 3-vectors. The best lattice point is refined
    by coordinate descent whose step halves until below ``refine_tol``. A
    :class:`GridBoundaryWarning` is emitted when the lattice argmin sits on the box
    boundary, i.e. the box probably does not contain the optimum.
    """
    lo, hi = (np.asarray(v, dtype=float).reshape(3) for v in t_box)
    sums = _PairSums.of(m)
    thetas = np.arange(theta_steps) * (2.0 * math.pi / theta_steps)
    axes = [np.linspace(lo[k], hi[k], t_steps) for k in range(3)]
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    best = (math.inf, 0.0, 0)
    for th in thetas:
        c = sums.costs(th, lattice)
        idx = int(np.argmin(c))
        if c[idx] < best[0]:
            best = (float(c[idx]), th, idx)
    best_cost, theta, idx = best
    ijk = np.unravel_index(idx, (t_steps,) * 3)
    if any(i in (0, t_steps - 1) for i in ijk):
        warnings.warn("grid argmin lies on the translation box boundary", GridBoundaryWarning, stacklevel=2)

    x = np.concatenate([[theta], lattice[idx]])
    steps = np.concatenate([[2.0 * math.pi / theta_steps], (hi - lo) / max(t_steps - 1, 1)])

    def f(v):
        return float(sums.costs(v[0], v[None, 1:])[0])

    fx = best_cost
    evals = 0
    while steps.max() >= refine_tol and evals < max_evals:
        improved = False
        for k in range(4):
            for sign in (1.0, -1.0):
                cand = x.copy()
                cand[k] += sign * steps[k]
                fc = f(cand)
                evals += 1
                if fc < fx:
                    x, fx, improved = cand, fc, True
                    break
        if not improved:
            steps *= 0.5
    return FrameTransform(x[0], x[1:])


@dataclass
class EstimateReport:
    """Serializable summary of one estimation run."""

    theta_hat_rad: float
    delta_theta_rad: float
    t_hat_m: list
    cost_first: float
    cost_refined: float
    rank_h: int
    n: int
    wall_time_s: float | None
    seed: int | None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_estimate(cls, est: RefinedEstimate, seed: int | None, include_time: bool = True) -> "EstimateReport":
        return cls(
            theta_hat_rad=est.transform.theta,
            delta_theta_rad=est.delta_theta,
            t_hat_m=[float(v) for v in est.transform.translation],
            cost_first=est.cost_before,
            cost_refined=est.cost_after,
            rank_h=est.rank_h,
            n=est.n,
            wall_time_s=est.wall_time if include_time else None,
            seed=seed,
        )

    def to_dict(self) -> dict:
        out = {
            "theta_hat_rad": self.theta_hat_rad,
            "delta_theta_rad": self.delta_theta_rad,
            "t_hat_m": self.t_hat_m,
            "cost_first": self.cost_first,
            "cost_refined": self.cost_refined,
            "rank_h": self.rank_h,
            "n": self.n,
            "wall_time_s": self.wall_time_s,
            "seed": self.seed,
        }
        out.update(self.extra)
        return out
