"""Latent-state dynamics and differentiable trajectory solvers.

Solvers integrate through the behavior timestamps and record every
arithmetic step on the autodiff graph, so gradients flow through the
unrolled integration (discretize-then-optimize).  A batched lock-step
variant advances many independent trajectories in parallel for training
throughput; it applies exactly the same per-interval substep plan as the
single-trajectory solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LATENT_DIM = 36


class SolverError(ValueError):
    """Invalid time grid or a step budget exceeded."""


@dataclass
class SolverConfig:
    method: str = "rk4"  # euler | rk4 | rk4_adaptive
    substeps_per_unit: int = 4  # fixed-step methods
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 10_000

    def __post_init__(self):
        if self.method not in ("euler", "rk4", "rk4_adaptive"):
            raise SolverError(f"unknown solver method {self.method!r}")
        if self.substeps_per_unit < 1:
            raise SolverError("substeps_per_unit must be >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise SolverError("rtol and atol must be positive")


class SimpleDynamics:
    """Constant vector field: the latent state drifts at a fixed per-day rate."""

    def __init__(self, alpha: Tensor):
        self.alpha = alpha

    def __call__(self, z: Tensor, t: float) -> Tensor:
        # independent of both z and t; broadcast keeps the graph connected to z's shape
        return ad.add(ad.scale(z, 0.0), self.alpha)

    def batch_solver(self):
        alpha = self.alpha

        def f(z: Tensor, t: np.ndarray) -> Tensor:
            return ad.add(ad.scale(z, 0.0), alpha)

        return f

    def parameters(self):
        return {"alpha": self.alpha}


class ComplexDynamics:
    """Two-layer sigmoid network: bounded rates, globally Lipschitz."""

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    def __call__(self, z: Tensor, t: float) -> Tensor:
        hidden = ad.sigmoid(ad.add(ad.matmul(self.w1, z), self.b1))
        return ad.sigmoid(ad.add(ad.matmul(self.w2, hidden), self.b2))

    def batch_solver(self):
        # transpose once per solve; every lock-step round reuses the nodes
        w1t, w2t = ad.transpose(self.w1), ad.transpose(self.w2)
        b1, b2 = self.b1, self.b2

        def f(z: Tensor, t: np.ndarray) -> Tensor:
            return ad.linear_sigmoid(ad.linear_sigmoid(z, w1t, b1), w2t, b2)

        return f

    def parameters(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def eval_dynamics(dyn, z: Tensor, t: float) -> Tensor:
    return dyn(z, t)


@dataclass
class Trajectory:
    """Latent states at requested times, plus the integration origin."""

    times: list
    states: list  # Tensors, one per time
    origin: tuple  # (t0, z0)

    def last(self):
        if self.states:
            return self.times[-1], self.states[-1]
        return self.origin


# ---------------------------------------------------------------------------
# single-trajectory steps


def euler_step(dyn, z: Tensor, t: float, h: float) -> Tensor:
    return ad.add(z, ad.scale(dyn(z, t), h))


def rk4_step(dyn, z: Tensor, t: float, h: float) -> Tensor:
    """One classical Runge-Kutta step of size h."""
    k1 = dyn(z, t)
    k2 = dyn(ad.add(z, ad.scale(k1, h / 2.0)), t + h / 2.0)
    k3 = dyn(ad.add(z, ad.scale(k2, h / 2.0)), t + h / 2.0)
    k4 = dyn(ad.add(z, ad.scale(k3, h)), t + h)
    combo = ad.add(ad.add(k1, ad.scale(ad.add(k2, k3), 2.0)), k4)
    return ad.add(z, ad.scale(combo, h / 6.0))


def substep_count(dt: float, substeps_per_unit: int) -> int:
    """Equal substeps per inter-time interval: ceil(dt * rate), minimum 1."""
    return max(1, math.ceil(dt * substeps_per_unit))


def _advance_fixed(dyn, z: Tensor, ta: float, tb: float, cfg: SolverConfig) -> Tensor:
    dt = tb - ta
    n = substep_count(dt, cfg.substeps_per_unit)
    h = dt / n
    step = rk4_step if cfg.method == "rk4" else euler_step
    t = ta
    for _ in range(n):
        z = step(dyn, z, t, h)
        t += h
    return z


def _advance_adaptive(dyn, z: Tensor, ta: float, tb: float, cfg: SolverConfig) -> Tensor:
    """RK4 with step-doubling error control.

    One step of size h is compared against two of h/2; accept when the
    max-norm discrepancy is within atol + rtol*||z||_inf, otherwise halve.
    Accepted steps grow the proposal by 1.5.  The finer solution is kept.
    """
    t = ta
    h = tb - ta
    steps = 0
    while t < tb - 1e-15 * max(1.0, abs(tb)):
        h = min(h, tb - t)
        full = rk4_step(dyn, z, t, h)
        half = rk4_step(dyn, z, t, h / 2.0)
        fine = rk4_step(dyn, half, t + h / 2.0, h / 2.0)
        err = float(np.max(np.abs(full.data - fine.data)))
        tol = cfg.atol + cfg.rtol * float(np.max(np.abs(z.data)))
        steps += 1
        if steps > cfg.max_steps:
            raise SolverError(f"adaptive solver exceeded max_steps={cfg.max_steps} in [{ta}, {tb}]")
        if err <= tol:
            z = fine
            t += h
            h *= 1.5
        else:
            h /= 2.0
    return z


def solve_trajectory(dyn, z0: Tensor, t0: float, times, cfg: SolverConfig) -> Trajectory:
    """Integrate from t0, emitting the state at every requested time.

    Requested times must be sorted ascending and start at or after t0;
    equal adjacent times reuse the same state object.
    """
    times = [float(t) for t in times]
    if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
        raise SolverError(f"requested times must be sorted ascending: {times}")
    if times and times[0] < t0:
        raise SolverError(f"first requested time {times[0]} precedes origin {t0}")

    advance = _advance_adaptive if cfg.method == "rk4_adaptive" else _advance_fixed
    states = []
    z, t_prev = z0, t0
    for t in times:
        if t > t_prev:
            z = advance(dyn, z, t_prev, t, cfg)
            t_prev = t
        states.append(z)
    return Trajectory(times=times, states=states, origin=(t0, z0))


def extend_trajectory(traj: Trajectory, dyn, cfg: SolverConfig, new_times) -> Trajectory:
    """Continue integration from the trajectory's last stored state."""
    new_times = [float(t) for t in new_times]
    if not new_times:
        return traj
    t_last, z = traj.last()
    if any(t2 < t1 for t1, t2 in zip(new_times, new_times[1:])):
        raise SolverError(f"extension times must be sorted ascending: {new_times}")
    if new_times[0] < t_last:
        raise SolverError(f"extension time {new_times[0]} precedes trajectory end {t_last}")

    advance = _advance_adaptive if cfg.method == "rk4_adaptive" else _advance_fixed
    times = list(traj.times)
    states = list(traj.states)
    t_prev = t_last
    for t in new_times:
        if t > t_prev:
            z = advance(dyn, z, t_prev, t, cfg)
            t_prev = t
        times.append(t)
        states.append(z)
    return Trajectory(times=times, states=states, origin=traj.origin)


def solve_analytic(alpha: Tensor, z0: Tensor, t0: float, times) -> Trajectory:
    """Closed-form solution for the constant field: z(t) = z0 + alpha*(t - t0)."""
    times = [float(t) for t in times]
    if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
        raise SolverError(f"requested times must be sorted ascending: {times}")
    if times and times[0] < t0:
        raise SolverError(f"first requested time {times[0]} precedes origin {t0}")
    states = [ad.add(z0, ad.scale(alpha, t - t0)) for t in times]
    return Trajectory(times=times, states=states, origin=(t0, z0))


# ---------------------------------------------------------------------------
# batched lock-step solver


def _rk4_round(f, z: Tensor, t: np.ndarray, h: np.ndarray) -> Tensor:
    h_col = h[:, None]
    h_half = h_col / 2.0
    k1 = f(z, t)
    k2 = f(ad.add_scaled(z, h_half, k1), t + h / 2.0)
    k3 = f(ad.add_scaled(z, h_half, k2), t + h / 2.0)
    k4 = f(ad.add_scaled(z, h_col, k3), t + h)
    return ad.rk4_combine(z, h_col / 6.0, k1, k2, k3, k4)


def _euler_round(f, z: Tensor, t: np.ndarray, h: np.ndarray) -> Tensor:
    return ad.add_scaled(z, h[:, None], f(z, t))


def _fused_rk4_sigmoid_round(z: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, h: np.ndarray) -> Tensor:
    """One lock-step RK4 substep of the two-layer sigmoid dynamics, fused.

    Computes the same floating-point expression as _rk4_round over the
    generic ops but as a single graph node with a hand-derived backward,
    which removes most of the per-node overhead from the training hot path.
    """
    zd = z.data
    mw1, mb1, mw2, mb2 = w1.data, b1.data, w2.data, b2.data
    hc = h[:, None]
    hh = hc / 2.0

    def stage(y):
        hidden = ad._sigmoid_values(y @ mw1.T + mb1)
        return hidden, ad._sigmoid_values(hidden @ mw2.T + mb2)

    y1 = zd
    h1, k1 = stage(y1)
    y2 = zd + hh * k1
    h2, k2 = stage(y2)
    y3 = zd + hh * k2
    h3, k3 = stage(y3)
    y4 = zd + hc * k3
    h4, k4 = stage(y4)
    out = zd + (hc / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)

    def vjp(g):
        gw1 = np.zeros_like(mw1)
        gb1 = np.zeros_like(mb1)
        gw2 = np.zeros_like(mw2)
        gb2 = np.zeros_like(mb2)

        def back_stage(y, hidden, k, kbar):
            p = kbar * (k * (1.0 - k))
            gw2[...] += p.T @ hidden
            gb2[...] += p.sum(axis=0)
            q = (p @ mw2) * (hidden * (1.0 - hidden))
            gw1[...] += q.T @ y
            gb1[...] += q.sum(axis=0)
            return q @ mw1

        h6 = hc / 6.0
        ybar4 = back_stage(y4, h4, k4, h6 * g)
        ybar3 = back_stage(y3, h3, k3, 2.0 * h6 * g + hc * ybar4)
        ybar2 = back_stage(y2, h2, k2, 2.0 * h6 * g + hh * ybar3)
        ybar1 = back_stage(y1, h1, k1, h6 * g + hh * ybar2)
        zbar = g + ybar1 + ybar2 + ybar3 + ybar4
        return zbar, gw1, gb1, gw2, gb2

    return ad.custom_node(out, (z, w1, b1, w2, b2), vjp)


def make_solve_plan(t0: float, grid, cfg: SolverConfig) -> tuple:
    """Precompute (substep sizes, cumulative substep index per observation).

    The plan depends only on the time grid and the solver config, so it can
    be cached per sample across epochs.
    """
    grid = [float(t) for t in grid]
    if any(t2 < t1 for t1, t2 in zip(grid, grid[1:])):
        raise SolverError(f"requested times must be sorted ascending: {grid}")
    if grid and grid[0] < t0:
        raise SolverError(f"first requested time {grid[0]} precedes origin {t0}")
    sched: list[float] = []
    counts: list[int] = []
    t_prev = float(t0)
    for t in grid:
        if t > t_prev:
            n = substep_count(t - t_prev, cfg.substeps_per_unit)
            sched.extend([(t - t_prev) / n] * n)
            t_prev = t
        counts.append(len(sched))
    return sched, counts


def solve_batch(dyn, z0: Tensor, t0: np.ndarray, obs_times: list, cfg: SolverConfig, plans: list | None = None) -> tuple:
    """Advance a batch of independent trajectories in lock-step rounds.

    ``z0`` is (B, D); ``obs_times[i]`` is sample i's sorted observation
    grid starting at or after ``t0[i]``.  Rows are processed in descending
    order of total substep count so the state matrix can be contracted to
    the still-active prefix as trajectories finish.
    Returns (flat_states, offsets): flat_states stacks every observation
    of sample 0, then sample 1, ...; offsets[i] is sample i's first row.

    Per-sample substep sizes match ``solve_trajectory`` exactly, so for
    fixed-step methods a row of the batched solve and a standalone solve
    differ only by BLAS summation order (last-ulp effects).
    """
    if cfg.method == "rk4_adaptive":
        raise SolverError("solve_batch supports fixed-step methods only")
    batch = z0.data.shape[0]
    if len(obs_times) != batch or t0.shape[0] != batch:
        raise SolverError("solve_batch: batch size mismatch")

    if plans is None:
        plans = [make_solve_plan(float(t0[i]), obs_times[i], cfg) for i in range(batch)]
    schedules = [p[0] for p in plans]
    emit_counts = [p[1] for p in plans]

    # longest trajectories first; finished rows then always form a suffix
    order = sorted(range(batch), key=lambda i: -len(schedules[i]))
    rounds = len(schedules[order[0]]) if batch else 0
    h_mat = np.zeros((rounds, batch))
    for pos, i in enumerate(order):
        h_mat[: len(schedules[i]), pos] = schedules[i]
    active = np.zeros(rounds, dtype=np.intp)
    for pos, i in enumerate(order):
        active[: len(schedules[i])] = pos + 1

    # emissions[c] = sorted-row positions whose observation falls after substep c
    emissions: dict[int, list[tuple[int, int]]] = {}
    flat = 0
    offsets = []
    pos_of = np.empty(batch, dtype=np.intp)
    pos_of[order] = np.arange(batch)
    for i, counts in enumerate(emit_counts):
        offsets.append(flat)
        for c in counts:
            emissions.setdefault(c, []).append((int(pos_of[i]), flat))
            flat += 1

    if cfg.method == "rk4" and isinstance(dyn, ComplexDynamics):
        def step_round(z, t, h, d=dyn):
            return _fused_rk4_sigmoid_round(z, d.w1, d.b1, d.w2, d.b2, h)
    else:
        fbatch = dyn.batch_solver() if hasattr(dyn, "batch_solver") else dyn.batch
        round_fn = _rk4_round if cfg.method == "rk4" else _euler_round

        def step_round(z, t, h):
            return round_fn(fbatch, z, t, h)

    z = z0 if np.array_equal(order, np.arange(batch)) else ad.gather_rows(z0, np.array(order, dtype=np.intp))
    snapshots = {0: z}
    t_cur = t0[order].astype(np.float64).copy()
    for r in range(rounds):
        a = int(active[r])
        if a < z.data.shape[0]:
            z = ad.take_prefix(z, a)
            t_cur = t_cur[:a]
        z = step_round(z, t_cur, h_mat[r, :a])
        t_cur = t_cur + h_mat[r, :a]
        if (r + 1) in emissions:
            snapshots[r + 1] = z

    pieces = []
    piece_slots = []
    for c in sorted(emissions):
        rows = np.array([rc[0] for rc in emissions[c]], dtype=np.intp)
        piece_slots.extend(rc[1] for rc in emissions[c])
        pieces.append(ad.gather_rows(snapshots[c], rows))
    if not pieces:
        return ad.gather_rows(z0, np.array([], dtype=np.intp)), offsets
    stacked = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
    if piece_slots == list(range(flat)):
        return stacked, offsets
    out_order = np.empty(flat, dtype=np.intp)
    for pos, slot in enumerate(piece_slots):
        out_order[slot] = pos
    return ad.gather_rows(stacked, out_order), offsets
