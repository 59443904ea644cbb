"""Loss assembly, continuation schedules and the design-training loop.

One iteration evaluates the neural design field at the element centers,
builds the effective elasticity per element, assembles and solves the finite
element system, and scores compliance plus a log-barrier on the volume
constraint.  The gradient chains the analytic compliance adjoint through the
material mixture and the network's reverse pass, then an Adam step with
global-norm gradient clipping updates the weights.  Both penalty parameters
follow continuation schedules.
"""

import time

import numpy as np
from dataclasses import dataclass, field as dc_field

from . import field as nn_field
from . import material
from .fem import (
    BoundaryConditions,
    Mesh,
    adjoint_element_seeds,
    assemble_and_solve,
    compliance,
    compute_templates,
)


@dataclass
class Schedules:
    """Continuation and optimizer settings (defaults match the shipped configs)."""

    p0: float = 1.0
    dp: float = 0.02
    p_max: float = 8.0
    t0: float = 1.0
    mu: float = 1.01
    lr: float = 0.01
    clip: float = 1.0
    k_max: int = 300
    eps_star: float = 0.01
    window: int = 10

    def penalty_at(self, k):
        return min(self.p0 + self.dp * k, self.p_max)

    def barrier_t_at(self, k):
        return self.t0 * self.mu**k


@dataclass
class ProblemSpec:
    """Everything one optimization run needs."""

    mesh: Mesh
    bc: BoundaryConditions
    vf_star: float
    subset: list
    hidden: list = dc_field(default_factory=lambda: [20, 20, 20, 20])
    seed: int = 0
    schedules: Schedules = dc_field(default_factory=Schedules)
    symmetry_mode: str = "none"
    mask_spec: str = "none"
    name: str = "problem"

    def __post_init__(self):
        if not 0.0 < self.vf_star < 1.0:
            raise ValueError(f"target volume fraction must lie in (0, 1), "
                             f"got {self.vf_star}")
        if not self.subset:
            raise ValueError("microstructure subset is empty")
        if self.symmetry_mode not in nn_field.SYMMETRY_MODES:
            raise ValueError(f"unknown symmetry mode {self.symmetry_mode!r}")
        self.bc.validate(self.mesh)

    @property
    def n_cells(self):
        return len(self.subset)


@dataclass
class OptState:
    """Adam moment estimates and step counter."""

    m: np.ndarray
    v: np.ndarray
    k: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(m=np.zeros(n), v=np.zeros(n), k=0)


@dataclass
class ConvergenceRecord:
    """Per-iteration history of one run (append-only)."""

    iteration: list = dc_field(default_factory=list)
    J: list = dc_field(default_factory=list)
    g_v: list = dc_field(default_factory=list)
    L: list = dc_field(default_factory=list)
    p: list = dc_field(default_factory=list)
    t: list = dc_field(default_factory=list)
    pou_err: list = dc_field(default_factory=list)
    J0: float = 0.0
    converged: bool = False
    wall_time: float = 0.0

    def append(self, k, J, g_v, L, p, t, pou_err):
        self.iteration.append(k)
        self.J.append(J)
        self.g_v.append(g_v)
        self.L.append(L)
        self.p.append(p)
        self.t.append(t)
        self.pou_err.append(pou_err)

    @staticmethod
    def csv_header():
        return "iteration,J,g_v,L,p,t"

    def csv_row(self, i):
        return (f"{self.iteration[i]},{self.J[i]!r},{self.g_v[i]!r},"
                f"{self.L[i]!r},{self.p[i]!r},{self.t[i]!r}")

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.csv_header() + "\n")
            for i in range(len(self.iteration)):
                fh.write(self.csv_row(i) + "\n")


def volume_constraint(v, vf_star, active=None):
    """Normalized volume ratio minus one; non-positive when feasible."""
    if not 0.0 < vf_star < 1.0:
        raise ValueError(f"target volume fraction must lie in (0, 1), "
                         f"got {vf_star}")
    v = np.asarray(v, dtype=float)
    if active is not None:
        v = v[np.asarray(active, dtype=bool)]
    return float(v.mean() / vf_star - 1.0)


def log_barrier(g, t):
    """Two-branch smooth barrier; linear extension keeps infeasible points
    finite.  C1-continuous at the branch point g = -1/t^2."""
    if t <= 0.0:
        raise ValueError(f"barrier parameter must be positive, got {t}")
    if g <= -1.0 / (t * t):
        return -np.log(-g) / t
    return t * g - np.log(1.0 / (t * t)) / t + 1.0 / t


def log_barrier_deriv(g, t):
    if t <= 0.0:
        raise ValueError(f"barrier parameter must be positive, got {t}")
    if g <= -1.0 / (t * t):
        return -1.0 / (t * g)
    return t


def loss(J, g_v, t, J0):
    """Scaled compliance plus volume barrier."""
    if J0 <= 0.0:
        raise ValueError("compliance normalizer must be positive")
    return J / J0 + log_barrier(g_v, t)


def adam_step(state, params_flat, grad, lr, clip,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """Global-norm clipping followed by a bias-corrected Adam update."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params_flat.shape:
        raise ValueError("gradient and parameter shapes disagree")
    gnorm = float(np.linalg.norm(grad))
    if clip is not None and gnorm > clip:
        grad = grad * (clip / gnorm)
    k = state.k + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**k)
    v_hat = v / (1.0 - beta2**k)
    new_params = params_flat - lr * m_hat / (np.sqrt(v_hat) + eps)
    return OptState(m=m, v=v, k=k), new_params


def design_coords(problem):
    """Normalized network inputs for the composition and volume heads."""
    centers = problem.mesh.centers[problem.mesh.active]
    bbox = problem.mesh.bbox
    mode = problem.symmetry_mode
    if mode == "none":
        coords = nn_field.normalize_coords(centers, bbox)
        return coords, coords, True
    base_mode = mode.replace("-rho", "")
    masked = nn_field.normalize_coords(
        nn_field.apply_symmetry_mask(centers, base_mode, bbox), bbox
    )
    if mode.endswith("-rho"):
        return masked, nn_field.normalize_coords(centers, bbox), False
    return masked, masked, True


def evaluate_fields(problem, params):
    """Design fields at the active element centers for the current weights."""
    coords_rho, coords_v, shared = design_coords(problem)
    out = nn_field.forward(params, coords_rho)
    if shared:
        return out
    return nn_field.DesignFields(
        rho=out.rho, v=nn_field.forward(params, coords_v).v
    )


@dataclass
class _EvalState:
    fields: object
    cm_raw: np.ndarray
    cm_dv: np.ndarray
    u: np.ndarray
    J: float
    g_v: float


def _evaluate(problem, db, params, templates, p):
    mesh = problem.mesh
    fields = evaluate_fields(problem, params)
    cm_raw, cm_dv = material.eval_cells_batch(
        db, problem.subset, fields.v, with_derivative=True
    )
    c_active = material.mix_batch(db, fields.rho, cm_raw, p)
    c_all = np.tile(material.floor_vector(db), (mesh.n_elem, 1))
    c_all[mesh.active] = c_active
    u = assemble_and_solve(mesh, problem.bc, c_all, templates)
    J = compliance(problem.bc.force_vector(mesh), u)
    g_v = volume_constraint(fields.v, problem.vf_star)
    return _EvalState(fields=fields, cm_raw=cm_raw, cm_dv=cm_dv,
                      u=u, J=J, g_v=g_v)


def loss_value(problem, db, params, templates, p, t, J0):
    """Loss for the current weights; the finite-difference reference path."""
    ev = _evaluate(problem, db, params, templates, p)
    return loss(ev.J, ev.g_v, t, J0)


def total_gradient(problem, db, params, templates, p, t, J0, ev=None):
    """Loss gradient w.r.t. all network parameters, plus the evaluation.

    The compliance path chains the per-element adjoint seeds through the
    material mixture into the network's reverse pass; the barrier path adds
    its volume sensitivity to the volume-head upstream gradient.
    """
    mesh = problem.mesh
    if ev is None:
        ev = _evaluate(problem, db, params, templates, p)
    seeds = adjoint_element_seeds(ev.u, mesh, templates)[mesh.active]
    d_rho, d_v = material.mix_gradients(
        ev.fields.rho, ev.cm_raw, ev.cm_dv, p, seeds / J0
    )
    n_active = int(mesh.active.sum())
    d_v = d_v + log_barrier_deriv(ev.g_v, t) / (problem.vf_star * n_active)

    coords_rho, coords_v, shared = design_coords(problem)
    if shared:
        grad = nn_field.backward(params, coords_rho, d_rho, d_v)
    else:
        grad = nn_field.backward(params, coords_rho, d_rho, np.zeros_like(d_v))
        grad = grad + nn_field.backward(
            params, coords_v, np.zeros_like(d_rho), d_v
        )
    if not np.isfinite(grad).all():
        raise nn_field.NumericError(
            f"non-finite loss gradient (J={ev.J:.6g}, g_v={ev.g_v:.6g})"
        )
    return grad, ev


def mixing_fraction(fields, v_cut=0.1, rho_cut=0.9):
    """Share of material-bearing elements committed to a single cell type."""
    sel = fields.v > v_cut
    if not sel.any():
        return 1.0
    return float((fields.rho[sel].max(axis=1) >= rho_cut).mean())


def run_optimization(problem, db, history_path=None, checkpoint_path=None,
                     checkpoint_every=50, log=None):
    """Train the design field; returns (params, fields, record).

    Terminates when two adjacent moving-average windows of the loss differ by
    less than eps_star relatively, or at k_max.  Streams the history to
    history_path and refreshes the checkpoint every checkpoint_every steps.
    """
    sched = problem.schedules
    mesh = problem.mesh
    templates = compute_templates(mesh.h)
    params = nn_field.init(problem.seed, problem.hidden, problem.n_cells)
    state = OptState.zeros(params.num_params())
    record = ConvergenceRecord()
    t_start = time.perf_counter()

    meta = {
        "nx": mesh.nx, "ny": mesh.ny, "h": repr(mesh.h),
        "bbox": " ".join(repr(float(b)) for b in mesh.bbox),
        "subset": " ".join(str(int(s)) for s in problem.subset),
        "symmetry": problem.symmetry_mode,
        "mask": problem.mask_spec,
    }

    hist_fh = open(history_path, "w") if history_path else None
    if hist_fh:
        hist_fh.write(record.csv_header() + "\n")

    def save_ckpt(k):
        if checkpoint_path:
            nn_field.save_checkpoint(checkpoint_path, params,
                                     meta={**meta, "iteration": k})

    J0 = None
    try:
        for k in range(sched.k_max):
            t = sched.barrier_t_at(k)
            p = sched.penalty_at(k)
            try:
                ev = _evaluate(problem, db, params, templates, p)
                if J0 is None:
                    J0 = ev.J
                    if J0 <= 0.0:
                        raise ValueError("initial design has non-positive "
                                         "compliance; check the load "
                                         "definition")
                    record.J0 = J0
                grad, ev = total_gradient(problem, db, params, templates,
                                          p, t, J0, ev=ev)
            except Exception:
                save_ckpt(k)
                raise
            L = loss(ev.J, ev.g_v, t, J0)
            record.append(k, ev.J, ev.g_v, L, p, t,
                          ev.fields.partition_error())
            if hist_fh:
                hist_fh.write(record.csv_row(len(record.iteration) - 1) + "\n")
                hist_fh.flush()
            if log and k % 10 == 0:
                log(f"iter {k:4d}  J={ev.J:10.4g}  g_v={ev.g_v:+.4f}  "
                    f"L={L:8.5g}  p={p:.2f}  t={t:.2f}")

            state, flat = adam_step(state, params.flatten(), grad,
                                    sched.lr, sched.clip)
            params = params.with_flat(flat)

            if checkpoint_path and (k + 1) % checkpoint_every == 0:
                save_ckpt(k + 1)

            w = sched.window
            if len(record.L) >= 2 * w:
                ma_new = float(np.mean(record.L[-w:]))
                ma_old = float(np.mean(record.L[-2 * w:-w]))
                if abs(ma_new - ma_old) < sched.eps_star * max(abs(ma_old), 1e-12):
                    record.converged = True
                    break
    finally:
        if hist_fh:
            hist_fh.close()

    save_ckpt(record.iteration[-1] + 1 if record.iteration else 0)
    fields = evaluate_fields(problem, params)
    record.wall_time = time.perf_counter() - t_start
    return params, fields, record
