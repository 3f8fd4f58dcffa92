"""Coarse-to-fine IRLS driver: matrix-free Gauss-Newton with PCG inner solves.

Tracking runs on the two coarser levels of a three-level image pyramid
(seven IRLS iterations on the coarsest, one on the medium level by default);
each IRLS iteration refreshes visibility by a forward render, reweights the
robust terms, and takes one damped Gauss-Newton step whose normal equations
are solved by four Jacobi-preconditioned CG iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import (EnergyWeights, FrameObservation, MarkerSet, ResidualSystem,
                     TrackingLossError, assemble_source, assemble_target)
from .facemodel import Camera, FaceBasis, ParamLayout, ParamVector, eval_mesh
from .imgio import depth_to_normals
from .raster import rasterize


class IllConditionedError(RuntimeError):
    """Raised when PCG produces non-finite intermediates."""


@dataclass
class SolverSchedule:
    levels: int = 3
    irls_iters: tuple = (7, 1, 0)  # per level, coarsest first; finest unused
    gn_per_irls: int = 1
    pcg_iters: int = 4
    pcg_tol: float = 0.0
    eps_irls: float = 1e-6
    damping: float = 1e-4
    step_halvings: int = 4

    def __post_init__(self):
        if self.levels < 1 or len(self.irls_iters) != self.levels:
            raise ValueError("need one IRLS count per pyramid level")
        if any(n < 0 for n in self.irls_iters) or self.pcg_iters < 0:
            raise ValueError("iteration counts must be non-negative")


@dataclass
class TrackingState:
    params: ParamVector
    fixed_identity: bool = False
    prev_params: ParamVector | None = None

    def frozen_names(self):
        return ("alpha", "beta") if self.fixed_identity else ()


# ---------------------------------------------------------------------------
# PCG


def pcg_solve(apply_A, b, precond_diag, iters, tol=0.0):
    """Jacobi-preconditioned conjugate gradients for SPD operators.

    Returns (x, info) where info carries the residual-norm history.
    Non-finite intermediates raise IllConditionedError.
    """
    b = np.asarray(b, dtype=np.float64)
    M = np.asarray(precond_diag, dtype=np.float64)
    M = np.where(M > 0, M, 1.0)
    x = np.zeros_like(b)
    r = b.copy()
    norms = [float(np.linalg.norm(r))]
    if norms[0] == 0.0 or iters == 0:
        return x, {"residual_norms": norms, "iterations": 0}
    z = r / M
    p = z.copy()
    rz = float(r @ z)
    target = tol * norms[0]
    k = 0
    for k in range(1, iters + 1):
        Ap = apply_A(p)
        if not np.all(np.isfinite(Ap)):
            raise IllConditionedError("non-finite operator output in PCG")
        pAp = float(p @ Ap)
        if pAp <= 0:
            if not np.isfinite(pAp):
                raise IllConditionedError("non-finite curvature in PCG")
            break  # null direction: operator only PSD, stop here
        a = rz / pAp
        x += a * p
        r -= a * Ap
        norms.append(float(np.linalg.norm(r)))
        if norms[-1] <= target:
            break
        z = r / M
        rz_new = float(r @ z)
        if rz_new == 0.0 or rz == 0.0:
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    if not np.all(np.isfinite(x)):
        raise IllConditionedError("non-finite PCG iterate")
    return x, {"residual_norms": norms, "iterations": k}


# ---------------------------------------------------------------------------
# Gauss-Newton problems (single frame / bundle) behind one small interface


class SingleFrameProblem:
    """Adapter exposing a ResidualSystem to the generic GN step."""

    def __init__(self, system: ResidualSystem, frozen=()):
        self.system = system
        self.layout = system.layout
        self.free_idx = self.layout.free_indices(frozen)
        self.dim = self.layout.dim

    def update_irls(self, pv):
        self.system.update_irls(pv)

    def weighted_energy(self, pv):
        return self.system.weighted_energy(pv)

    def true_energy(self, pv):
        return self.system.true_energy(pv)

    def boxplus(self, pv, dx):
        return self.layout.boxplus(pv, dx)

    def linearize(self, pv):
        return self.system.linearize(pv)


class BundleState:
    """Shared identity (alpha, beta) plus per-keyframe pose/expression/lighting."""

    def __init__(self, frames):
        self.frames = [f.copy() for f in frames]
        for f in self.frames[1:]:
            f.alpha = self.frames[0].alpha.copy()
            f.beta = self.frames[0].beta.copy()

    @property
    def alpha(self):
        return self.frames[0].alpha

    @property
    def beta(self):
        return self.frames[0].beta


class BundleProblem:
    """Joint keyframe problem with a [shared | per-frame] parameter layout."""

    def __init__(self, systems):
        self.systems = systems
        self.layout = systems[0].layout
        d_id, d_alb = self.layout.d_id, self.layout.d_alb
        self.n_frames = len(systems)
        self.per_frame = 6 + self.layout.d_exp + 27
        self.dim = d_id + d_alb + self.n_frames * self.per_frame
        self.free_idx = np.arange(self.dim)

    def _frame_vec(self, g, j):
        """Gather the frame-local increment [rot trans alpha beta delta gamma]."""
        d_id, d_alb, d_exp = self.layout.d_id, self.layout.d_alb, self.layout.d_exp
        base = d_id + d_alb + j * self.per_frame
        v = np.zeros(self.layout.dim)
        s = self.layout.slices
        v[s["alpha"]] = g[:d_id]
        v[s["beta"]] = g[d_id:d_id + d_alb]
        v[s["rot"]] = g[base:base + 3]
        v[s["trans"]] = g[base + 3:base + 6]
        v[s["delta"]] = g[base + 6:base + 6 + d_exp]
        v[s["gamma"]] = g[base + 6 + d_exp:base + self.per_frame]
        return v

    def _scatter_frame(self, acc, gframe, j):
        d_id, d_alb, d_exp = self.layout.d_id, self.layout.d_alb, self.layout.d_exp
        base = d_id + d_alb + j * self.per_frame
        s = self.layout.slices
        acc[:d_id] += gframe[s["alpha"]]
        acc[d_id:d_id + d_alb] += gframe[s["beta"]]
        acc[base:base + 3] += gframe[s["rot"]]
        acc[base + 3:base + 6] += gframe[s["trans"]]
        acc[base + 6:base + 6 + d_exp] += gframe[s["delta"]]
        acc[base + 6 + d_exp:base + self.per_frame] += gframe[s["gamma"]]

    def update_irls(self, state: BundleState):
        for sys_, pv in zip(self.systems, state.frames):
            sys_.update_irls(pv)

    def weighted_energy(self, state: BundleState):
        return sum(sys_.weighted_energy(pv)
                   for sys_, pv in zip(self.systems, state.frames))

    def true_energy(self, state: BundleState):
        return sum(sys_.true_energy(pv)
                   for sys_, pv in zip(self.systems, state.frames))

    def boxplus(self, state: BundleState, dx):
        frames = [self.layout.boxplus(pv, self._frame_vec(dx, j))
                  for j, pv in enumerate(state.frames)]
        return BundleState(frames)

    def linearize(self, state: BundleState):
        lins = [sys_.linearize(pv) for sys_, pv in zip(self.systems, state.frames)]
        problem = self

        class _Lin:
            def __init__(self):
                self.residual = np.concatenate([ln.residual for ln in lins])
                self.W = np.concatenate([ln.W for ln in lins])
                self.sizes = [len(ln.residual) for ln in lins]

            def apply_J(self, v):
                return np.concatenate(
                    [ln.apply_J(problem._frame_vec(v, j)) for j, ln in enumerate(lins)])

            def apply_Jt(self, u):
                acc = np.zeros(problem.dim)
                off = 0
                for j, ln in enumerate(lins):
                    n = self.sizes[j]
                    problem._scatter_frame(acc, ln.apply_Jt(u[off:off + n]), j)
                    off += n
                return acc

        return _Lin()


# ---------------------------------------------------------------------------
# Gauss-Newton step with Levenberg damping and step-halving backoff


def gauss_newton_step(problem, state, schedule: SolverSchedule):
    """One damped GN step; returns (new_state, info).

    Solves (J^T W J + lambda I) dx = -J^T W r matrix-free with a Jacobi
    preconditioner, then backtracks (halving up to schedule.step_halvings
    times) on the frozen weighted energy; the zero step is always a
    candidate, so the surrogate never increases.
    """
    lin = problem.linearize(state)
    free = problem.free_idx
    grad = lin.apply_Jt(lin.W * lin.residual)
    b = -grad[free]

    diag = np.zeros(len(free))
    e = np.zeros(problem.dim)
    for i, idx in enumerate(free):
        e[idx] = 1.0
        col = lin.apply_J(e)
        diag[i] = float(np.dot(lin.W * col, col))
        e[idx] = 0.0
    lam = schedule.damping * (float(diag.mean()) if diag.size else 1.0)
    if lam <= 0:
        lam = schedule.damping

    def apply_A(v):
        full = np.zeros(problem.dim)
        full[free] = v
        return lin.apply_Jt(lin.W * lin.apply_J(full))[free] + lam * v

    dx_free, pcg_info = pcg_solve(apply_A, b, diag + lam, schedule.pcg_iters,
                                  schedule.pcg_tol)
    e0 = float(np.dot(lin.W * lin.residual, lin.residual))
    best_state, best_e, best_scale = state, e0, 0.0
    scale = 1.0
    for _ in range(schedule.step_halvings + 1):
        dx = np.zeros(problem.dim)
        dx[free] = scale * dx_free
        cand = problem.boxplus(state, dx)
        ec = problem.weighted_energy(cand)
        if np.isfinite(ec) and ec < best_e:
            best_state, best_e, best_scale = cand, ec, scale
        scale *= 0.5
    info = {"energy_before": e0, "energy_after": best_e, "step_scale": best_scale,
            "pcg": pcg_info}
    return best_state, info


# ---------------------------------------------------------------------------
# observation pyramids


def downsample_observation(obs: FrameObservation) -> FrameObservation:
    """Center-aligned 2x decimation of one observation.

    Decimation (rather than box filtering) keeps every pyramid level
    render-consistent: the decimated image of a rendered frame equals a
    direct render at the level's resolution, so the coarse levels see the
    same sampling the model render produces.  Coarse pixel (i, j) is full
    pixel (2i, 2j), i.e. full coordinate u maps to u/2 + 1/4.
    """
    full = obs.camera
    cam = Camera(full.fx * 0.5, full.fy * 0.5, full.cx * 0.5 + 0.25,
                 full.cy * 0.5 + 0.25, (full.width + 1) // 2,
                 (full.height + 1) // 2, full.R, full.t)
    rgb = obs.rgb[0::2, 0::2]
    depth = normals = None
    if obs.depth is not None:
        depth = obs.depth[0::2, 0::2]
        normals = depth_to_normals(depth, cam)
    markers = None
    if obs.markers is not None:
        markers = MarkerSet(obs.markers.pixels * 0.5 + 0.25, obs.markers.ids,
                            obs.markers.ref)
    return FrameObservation(camera=cam, rgb=rgb, depth=depth, normals=normals,
                            landmark_pix=obs.landmark_pix * 0.5 + 0.25,
                            landmark_ids=obs.landmark_ids,
                            landmark_conf=obs.landmark_conf,
                            markers=markers, occluded=obs.occluded)


def observation_pyramid(obs: FrameObservation, levels: int):
    pyr = [obs]
    for _ in range(levels - 1):
        pyr.append(downsample_observation(pyr[-1]))
    return pyr


def _assemble(pv, observations, basis, weights, mode, box=1):
    mesh = eval_mesh(basis, pv)
    renders = [rasterize(mesh, o.camera, pv.gamma) for o in observations]
    if mode == "target":
        return assemble_target(pv, observations, renders, basis, weights, box=box)
    if mode == "source":
        if len(observations) != 1:
            raise ValueError("source mode tracks a single RGB-D view")
        return assemble_source(pv, observations[0], renders[0], basis, weights,
                               box=box)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# IRLS driver


@dataclass
class SolveInfo:
    level_energies: list = field(default_factory=list)  # per level: true energies after each step
    surrogate_energies: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def irls_solve(observations, x0: ParamVector, basis: FaceBasis,
               weights: EnergyWeights, schedule: SolverSchedule,
               mode="target", frozen=(), with_info=False):
    """Coarse-to-fine IRLS: refresh visibility, reweight, one GN step per iteration.

    observations: list of FrameObservation (two views for stereo target mode,
    one RGB-D view for source mode).  Pyramid levels are realized as box
    aggregation factors 2^level over the full-resolution footprint, so every
    level sees an identically band-limited model and observation.  Returns
    the final ParamVector, or (ParamVector, SolveInfo) when with_info is set.
    """
    pv = x0.copy()
    info = SolveInfo()
    for li, level in enumerate(range(schedule.levels - 1, -1, -1)):
        iters = schedule.irls_iters[li]
        if iters == 0:
            continue
        energies, surrogates = [], []
        for it in range(iters):
            try:
                system = _assemble(pv, observations, basis, weights, mode,
                                   box=2 ** level)
            except TrackingLossError as err:
                raise TrackingLossError(str(err), level=level, iteration=it) from None
            problem = SingleFrameProblem(system, frozen)
            problem.update_irls(pv)
            for _ in range(schedule.gn_per_irls):
                pv, step = gauss_newton_step(problem, pv, schedule)
                surrogates.append(step["energy_after"])
                info.steps.append(step)
            energies.append(system.true_energy(pv))
        info.level_energies.append(energies)
        info.surrogate_energies.append(surrogates)
    return (pv, info) if with_info else pv


# ---------------------------------------------------------------------------
# keyframe identity bundle


def _landmark_pose_warmup(observations, pv, basis, weights, schedule):
    """Cheap per-frame pose initialization from landmarks only."""
    from .energy import LandmarkBlock, RegBlock

    blocks = []
    for obs in observations:
        if len(obs.landmark_pix):
            blocks.append(LandmarkBlock(basis, obs.camera, obs.landmark_pix,
                                        obs.landmark_ids, obs.landmark_conf,
                                        weights.w_lan))
    blocks.append(RegBlock(basis, weights.w_reg))
    system = ResidualSystem(basis, blocks, ParamLayout.of(pv), weights.eps_irls)
    problem = SingleFrameProblem(system, frozen=("alpha", "beta", "delta", "gamma"))
    warm = SolverSchedule(levels=1, irls_iters=(0,), pcg_iters=8,
                          damping=schedule.damping)
    for _ in range(8):
        problem.update_irls(pv)
        pv, _ = gauss_newton_step(problem, pv, warm)
    return pv


def bundle_identity(keyframes, basis: FaceBasis, weights: EnergyWeights,
                    schedule: SolverSchedule | None = None, x0=None,
                    with_info=False):
    """Non-rigid bundle over stereo keyframes: shared (alpha, beta), per-frame rest.

    keyframes: list of [obs_left, obs_right].  Returns (alpha, beta,
    per-frame ParamVectors).  Warns (without failing) when all keyframes
    share an identical pose, which leaves identity under-constrained.
    """
    import warnings

    if schedule is None:
        schedule = SolverSchedule(levels=3, irls_iters=(10, 3, 0))
    if len(keyframes) < 1:
        raise ValueError("bundle needs at least one keyframe")
    if x0 is None:
        base = basis.zero_params()
        base.trans[:] = (0.0, 0.0, 0.0)
        base.gamma[[0, 9, 18]] = 1.0 / 0.2820947917738781
        x0 = [base.copy() for _ in keyframes]
    frames = [_landmark_pose_warmup(obs, pv.copy(), basis, weights, schedule)
              for obs, pv in zip(keyframes, x0)]
    rots = [f.rot for f in frames]
    if len(frames) > 1 and max(np.linalg.norm(r - rots[0]) for r in rots) < 1e-6:
        warnings.warn("keyframes share an identical pose; identity is "
                      "under-constrained", RuntimeWarning)

    state = BundleState(frames)
    info = SolveInfo()
    for li, level in enumerate(range(schedule.levels - 1, -1, -1)):
        iters = schedule.irls_iters[li]
        if iters == 0:
            continue
        energies = []
        for it in range(iters):
            systems = []
            for j, obs in enumerate(keyframes):
                try:
                    systems.append(_assemble(state.frames[j], obs, basis,
                                             weights, "target", box=2 ** level))
                except TrackingLossError as err:
                    raise TrackingLossError(str(err), level=level, iteration=it) from None
            problem = BundleProblem(systems)
            problem.update_irls(state)
            state, step = gauss_newton_step(problem, state, schedule)
            info.steps.append(step)
            energies.append(problem.true_energy(state))
        info.level_energies.append(energies)
    result = (state.alpha.copy(), state.beta.copy(), state.frames)
    return result + (info,) if with_info else result
