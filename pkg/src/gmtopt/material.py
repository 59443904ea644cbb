"""Per-microstructure elasticity evaluation and penalized mixing.

The effective element elasticity is the penalized weighted sum
sum_m rho_m^p * C_m(v), plus a small constant floor that keeps void regions
uniformly weak without being amplified by the penalty exponent.
"""

import numpy as np

from .homog import Cmat, eval_poly, eval_poly_deriv, _vector_to_matrix

STIFFNESS_FLOOR_RATIO = 1e-6  # floor = ratio * C_solid, added after mixing
SIMPLEX_TOL = 1e-6


class SimplexViolationError(ValueError):
    """Composition weights do not lie on the unit simplex."""


def floor_vector(db):
    """Constant stiffness floor in template component order."""
    return STIFFNESS_FLOOR_RATIO * Cmat.from_matrix(db.c_solid).as_vector()


def _clip_spd(vec, eig_floor):
    """Eigenvalue-clip a (..., 6) component array and re-symmetrize."""
    M = _vector_to_matrix(vec)
    w, Q = np.linalg.eigh(M)
    w = np.maximum(w, eig_floor)
    M = np.einsum("...ij,...j,...kj->...ik", Q, w, Q)
    out = np.empty(vec.shape)
    out[..., 0] = M[..., 0, 0]
    out[..., 1] = M[..., 1, 1]
    out[..., 2] = M[..., 2, 2]
    out[..., 3] = M[..., 0, 1]
    out[..., 4] = M[..., 0, 2]
    out[..., 5] = M[..., 1, 2]
    return out


def eval_cells_batch(db, cell_ids, v, with_derivative=False):
    """Raw (un-floored) component vectors C_m(v) for a batch of elements.

    Returns (n_elem, n_cells, 6) arrays; optionally also d/dv.  Cells whose
    fit failed the positive-definiteness grid check get an eigenvalue clip at
    evaluation time (the shipped catalog never needs it).
    """
    v = np.atleast_1d(np.asarray(v, dtype=float))
    n = v.shape[0]
    vals = np.empty((n, len(cell_ids), 6))
    derivs = np.empty_like(vals) if with_derivative else None
    eig_floor = STIFFNESS_FLOOR_RATIO * db.c_solid[0, 0]
    for j, cid in enumerate(cell_ids):
        cm = db.cell(cid)
        vals[:, j, :] = eval_poly(cm.coeffs, v).T
        if not cm.spd_ok:
            vals[:, j, :] = _clip_spd(vals[:, j, :], eig_floor)
        if with_derivative:
            derivs[:, j, :] = eval_poly_deriv(cm.coeffs, v).T
    if with_derivative:
        return vals, derivs
    return vals


def eval_Cm(db, cell_id, v):
    """Elasticity of one microstructure at volume fraction v, floor included."""
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"volume fraction must lie in [0, 1], got {v}")
    raw = eval_cells_batch(db, [cell_id], v)[0, 0]
    vec = raw + floor_vector(db)
    return Cmat(c11=vec[0], c22=vec[1], c33=vec[2],
                c12=vec[3], c13=vec[4], c23=vec[5])


def mix_batch(db, rho, cm_raw, p):
    """Penalized mixture for a batch: sum_m rho_m^p * C_m(v) + floor.

    rho: (n_elem, M) simplex rows; cm_raw: (n_elem, M, 6) raw components.
    """
    rho = np.asarray(rho, dtype=float)
    err = np.abs(rho.sum(axis=-1) - 1.0).max()
    if err > SIMPLEX_TOL or rho.min() < -SIMPLEX_TOL:
        raise SimplexViolationError(
            f"composition weights off the simplex by {err:.2e}; "
            "the design field must produce softmax outputs"
        )
    w = np.clip(rho, 0.0, None) ** p
    return np.einsum("em,emi->ei", w, cm_raw) + floor_vector(db)


def effective_C(db, rho, v, p):
    """Effective elasticity of one element for composition rho at fraction v."""
    rho = np.asarray(rho, dtype=float).reshape(1, -1)
    cell_ids = sorted(db.cells)
    if rho.shape[1] != len(cell_ids):
        raise ValueError(
            f"composition length {rho.shape[1]} does not match the "
            f"{len(cell_ids)} database cells"
        )
    if p < 1.0:
        raise ValueError(f"penalty exponent must be >= 1, got {p}")
    cm_raw = eval_cells_batch(db, cell_ids, [v])
    vec = mix_batch(db, rho, cm_raw, p)[0]
    return Cmat(c11=vec[0], c22=vec[1], c33=vec[2],
                c12=vec[3], c13=vec[4], c23=vec[5])


def mix_gradients(rho, cm_raw, cm_dv, p, seeds):
    """Chain adjoint seeds through the mixture to (d/d rho, d/d v).

    seeds: (n_elem, 6) gradients of the objective w.r.t. the effective
    components.  Returns d_rho (n_elem, M) and d_v (n_elem,).
    """
    w = np.clip(rho, 0.0, None) ** p
    d_rho = p * np.clip(rho, 0.0, None) ** (p - 1.0) * np.einsum(
        "ei,emi->em", seeds, cm_raw
    )
    d_v = np.einsum("ei,emi,em->e", seeds, cm_dv, w)
    return d_rho, d_v
