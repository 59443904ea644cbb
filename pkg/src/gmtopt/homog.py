"""Numerical homogenization of pixelated unit cells and polynomial fitting.

The homogenized plane elasticity matrix of a periodic cell is obtained from
three unit macroscopic test strains.  For each test strain the periodic
fluctuation field is solved on the pixel grid and the effective matrix is
assembled from mutual strain energies, which keeps it symmetric positive
semi-definite by construction.  Per microstructure, the six components are
then fit with quintic polynomials in the volume fraction, constrained to
vanish at v=0 and to match the solid matrix at v=1.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from dataclasses import dataclass, field

from . import cells as cells_mod
from .fem import COMPONENT_ORDER, compute_templates, element_stiffness

FIT_DEGREE = 5
VOID_STIFFNESS_RATIO = 1e-6  # pixel stiffness floor inside the cell problem
DEFAULT_RASTER = 64
DEFAULT_SAMPLES = np.round(np.linspace(0.0, 1.0, 11), 10)


class InsufficientSamplesError(ValueError):
    """Too few volume-fraction samples for a stable constrained fit."""


class UnknownCellError(KeyError):
    """Requested cell id is not present in the material database."""


def solid_elasticity(E, nu):
    """Plane-stress elasticity matrix of the isotropic base material."""
    f = E / (1.0 - nu * nu)
    return f * np.array(
        [
            [1.0, nu, 0.0],
            [nu, 1.0, 0.0],
            [0.0, 0.0, (1.0 - nu) / 2.0],
        ]
    )


@dataclass
class Cmat:
    """Six independent components of a plane elasticity matrix."""

    c11: float
    c12: float
    c13: float
    c22: float
    c23: float
    c33: float
    degenerate: bool = False  # True when produced from an all-void cell

    @classmethod
    def from_matrix(cls, M, degenerate=False):
        return cls(
            c11=float(M[0, 0]),
            c12=float(M[0, 1]),
            c13=float(M[0, 2]),
            c22=float(M[1, 1]),
            c23=float(M[1, 2]),
            c33=float(M[2, 2]),
            degenerate=degenerate,
        )

    def as_matrix(self):
        return np.array(
            [
                [self.c11, self.c12, self.c13],
                [self.c12, self.c22, self.c23],
                [self.c13, self.c23, self.c33],
            ]
        )

    def as_vector(self):
        """Length-6 vector in template component order (11, 22, 33, 12, 13, 23)."""
        return np.array(
            [self.c11, self.c22, self.c33, self.c12, self.c13, self.c23]
        )


# Cached periodic-grid assembly data keyed by raster resolution.
_GRID_CACHE = {}


def _periodic_grid(n):
    if n not in _GRID_CACHE:
        ex, ey = np.meshgrid(np.arange(n), np.arange(n))
        ex = ex.ravel()
        ey = ey.ravel()

        def nid(ix, iy):
            return (iy % n) * n + (ix % n)

        nodes = np.stack(
            [nid(ex, ey), nid(ex + 1, ey), nid(ex + 1, ey + 1), nid(ex, ey + 1)],
            axis=1,
        )
        edof = np.empty((n * n, 8), dtype=np.int64)
        edof[:, 0::2] = 2 * nodes
        edof[:, 1::2] = 2 * nodes + 1
        rows = np.repeat(edof, 8, axis=1).ravel()
        cols = np.tile(edof, (1, 8)).ravel()
        _GRID_CACHE[n] = (edof, rows, cols)
    return _GRID_CACHE[n]


def _unit_strain_displacements(hc):
    """Affine nodal displacements of one pixel for the three unit test strains."""
    corners = np.array([[0.0, 0.0], [hc, 0.0], [hc, hc], [0.0, hc]])
    u = np.zeros((3, 8))
    u[0, 0::2] = corners[:, 0]            # eps_xx = 1
    u[1, 1::2] = corners[:, 1]            # eps_yy = 1
    u[2, 0::2] = 0.5 * corners[:, 1]      # gamma_xy = 1
    u[2, 1::2] = 0.5 * corners[:, 0]
    return u


def homogenize(raster, base=(1.0, 0.3)):
    """Effective elasticity matrix of a rasterized cell under periodic BCs.

    Void pixels keep a small stiffness floor so the cell system stays
    regular; an all-void raster short-circuits to the floor material.
    """
    E, nu = base
    pix = np.asarray(raster.pixels, dtype=bool)
    n = raster.resolution
    if pix.shape != (n, n):
        raise ValueError("raster pixels do not match the declared resolution")
    c_solid = solid_elasticity(E, nu)
    if not pix.any():
        return Cmat.from_matrix(VOID_STIFFNESS_RATIO * c_solid, degenerate=True)
    if pix.all():
        return Cmat.from_matrix(c_solid)

    hc = 1.0 / n
    templates = compute_templates(hc)
    ke_unit = element_stiffness(Cmat.from_matrix(solid_elasticity(1.0, nu)).as_vector(), templates)
    e_pix = np.where(pix.ravel(), E, VOID_STIFFNESS_RATIO * E)

    edof, rows, cols = _periodic_grid(n)
    n_dof = 2 * n * n
    vals = (e_pix[:, None, None] * ke_unit[None, :, :]).ravel()
    K = sp.coo_matrix((vals, (rows, cols)), shape=(n_dof, n_dof)).tocsc()

    u0 = _unit_strain_displacements(hc)
    f = np.zeros((3, n_dof))
    for i in range(3):
        fe = e_pix[:, None] * (ke_unit @ u0[i])[None, :]  # (n_elem, 8)
        np.add.at(f[i], edof.ravel(), fe.ravel())

    # Pin one node to remove rigid translations; the loads are self-balanced.
    free = np.arange(2, n_dof)
    lu = spla.splu(K[free][:, free].tocsc())
    chi = np.zeros((3, n_dof))
    for i in range(3):
        chi[i, free] = lu.solve(f[i, free])

    # Mutual energies of the corrected test-strain fields give C directly.
    diff = u0[:, None, :] - chi[:, edof]  # (3, n_elem, 8)
    ke_diff = np.einsum("kl,iel->iek", ke_unit, diff)
    C = np.einsum("iek,jek,e->ij", diff, ke_diff, e_pix)
    C = 0.5 * (C + C.T)
    return Cmat.from_matrix(C)


def fit_polynomials(samples, endpoint=None):
    """Constrained least-squares quintic fit per elasticity component.

    samples: list of (v, Cmat).  The fit passes exactly through (0, 0) and
    through (1, endpoint component); endpoint defaults to the sample at v=1.
    Returns a (6, 6) coefficient array, one row per component in template
    order, constant term first.
    """
    if len(samples) < FIT_DEGREE + 2:
        raise InsufficientSamplesError(
            f"need at least {FIT_DEGREE + 2} samples, got {len(samples)}"
        )
    vs = np.array([float(v) for v, _ in samples])
    if vs.min() > 1e-9 or vs.max() < 1.0 - 1e-9:
        raise InsufficientSamplesError("samples must span v in [0, 1]")
    Y = np.stack([c.as_vector() for _, c in samples])  # (n_samples, 6)
    if endpoint is None:
        endpoint = Y[np.argmax(vs)]
    else:
        endpoint = np.asarray(endpoint, dtype=float)

    # Basis v^1..v^5 (constant term pinned to zero by the v=0 constraint);
    # the v=1 constraint sum(c_j) = endpoint is eliminated via a nullspace
    # parameterization of [1, 1, 1, 1, 1].
    A = np.stack([vs**j for j in range(1, FIT_DEGREE + 1)], axis=1)
    ones = np.ones((1, FIT_DEGREE))
    _, _, Vt = np.linalg.svd(ones)
    N = Vt[1:].T  # (5, 4) basis of the constraint nullspace
    coeffs = np.zeros((6, FIT_DEGREE + 1))
    for comp in range(6):
        c_part = np.zeros(FIT_DEGREE)
        c_part[0] = endpoint[comp]
        z, *_ = np.linalg.lstsq(A @ N, Y[:, comp] - A @ c_part, rcond=None)
        coeffs[comp, 1:] = c_part + N @ z
    return coeffs


def eval_poly(coeffs, v):
    """Evaluate (6, degree+1) coefficient rows at scalar or array v."""
    v = np.asarray(v, dtype=float)
    out = np.zeros((6,) + v.shape)
    for j in range(coeffs.shape[1] - 1, -1, -1):
        out = out * v + coeffs[:, j][(...,) + (None,) * v.ndim]
    return out


def eval_poly_deriv(coeffs, v):
    v = np.asarray(v, dtype=float)
    out = np.zeros((6,) + v.shape)
    for j in range(coeffs.shape[1] - 1, 0, -1):
        out = out * v + (j * coeffs[:, j])[(...,) + (None,) * v.ndim]
    return out


def _vector_to_matrix(vec):
    """Inverse of Cmat.as_vector for a (..., 6) array; returns (..., 3, 3)."""
    vec = np.asarray(vec)
    M = np.zeros(vec.shape[:-1] + (3, 3))
    M[..., 0, 0] = vec[..., 0]
    M[..., 1, 1] = vec[..., 1]
    M[..., 2, 2] = vec[..., 2]
    M[..., 0, 1] = M[..., 1, 0] = vec[..., 3]
    M[..., 0, 2] = M[..., 2, 0] = vec[..., 4]
    M[..., 1, 2] = M[..., 2, 1] = vec[..., 5]
    return M


@dataclass
class CellMaterial:
    """Fitted coefficients and raw fit samples for one catalog cell."""

    cell_id: int
    name: str
    coeffs: np.ndarray           # (6, 6)
    fit_samples: list            # [(v, Cmat)]
    max_residual: float = 0.0
    spd_ok: bool = True


@dataclass
class MaterialDB:
    """Per-cell elasticity fits for one base material."""

    E: float
    nu: float
    degree: int
    sample_vs: np.ndarray
    cells: dict = field(default_factory=dict)  # cell_id -> CellMaterial

    @property
    def c_solid(self):
        return solid_elasticity(self.E, self.nu)

    def cell(self, cell_id):
        try:
            return self.cells[cell_id]
        except KeyError:
            raise UnknownCellError(
                f"cell id {cell_id} not in material database "
                f"(have {sorted(self.cells)})"
            ) from None


def spd_margin(coeffs, grid=None):
    """Smallest eigenvalue of the evaluated matrix over a dense v grid."""
    if grid is None:
        grid = np.linspace(0.01, 1.0, 100)
    vals = eval_poly(coeffs, grid)  # (6, len(grid))
    mats = _vector_to_matrix(vals.T)
    return float(np.linalg.eigvalsh(mats).min())


def build_material_db(
    cat=None,
    base=(1.0, 0.3),
    sample_vs=None,
    raster_resolution=DEFAULT_RASTER,
    path=None,
):
    """Homogenize every cell over the sample grid and fit the polynomials."""
    if cat is None:
        cat = cells_mod.catalog()
    if sample_vs is None:
        sample_vs = DEFAULT_SAMPLES
    E, nu = base
    db = MaterialDB(E=float(E), nu=float(nu), degree=FIT_DEGREE,
                    sample_vs=np.asarray(sample_vs, dtype=float))
    for cell in cat:
        samples = []
        for v in db.sample_vs:
            tau = cells_mod.tau_for_vf(cell, float(v))
            raster = cells_mod.rasterize(cell, tau, raster_resolution)
            samples.append((float(v), homogenize(raster, base)))
        coeffs = fit_polynomials(samples)
        pred = eval_poly(coeffs, db.sample_vs)
        meas = np.stack([c.as_vector() for _, c in samples], axis=1)
        db.cells[cell.id] = CellMaterial(
            cell_id=cell.id,
            name=cell.name,
            coeffs=coeffs,
            fit_samples=samples,
            max_residual=float(np.abs(pred - meas).max()),
            spd_ok=spd_margin(coeffs) >= 0.0,
        )
    if path is not None:
        save_material_db(db, path)
    return db


def save_material_db(db, path):
    """Persist the database as structured text, bitwise round-trippable."""
    with open(path, "w") as fh:
        fh.write("# gmtopt material database\n")
        fh.write(f"E {db.E!r}\n")
        fh.write(f"nu {db.nu!r}\n")
        fh.write(f"degree {db.degree}\n")
        fh.write("samples " + " ".join(repr(float(v)) for v in db.sample_vs) + "\n")
        for cid in sorted(db.cells):
            cm = db.cells[cid]
            fh.write(f"cell {cid} {cm.name} spd_ok={int(cm.spd_ok)} "
                     f"max_residual={cm.max_residual!r}\n")
            for comp, label in enumerate(COMPONENT_ORDER):
                row = " ".join(repr(float(c)) for c in cm.coeffs[comp])
                fh.write(f"{label} {row}\n")
            for v, cm_sample in cm.fit_samples:
                row = " ".join(repr(float(x)) for x in cm_sample.as_vector())
                fh.write(f"sample {v!r} {row}\n")


def load_material_db(path):
    """Read a database file written by save_material_db."""
    header = {}
    db = None
    current = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            key = parts[0]
            if key in ("E", "nu", "degree"):
                header[key] = float(parts[1])
            elif key == "samples":
                header["samples"] = np.array([float(x) for x in parts[1:]])
                db = MaterialDB(
                    E=header["E"],
                    nu=header["nu"],
                    degree=int(header["degree"]),
                    sample_vs=header["samples"],
                )
            elif key == "cell":
                if db is None:
                    raise ValueError(f"{path}:{lineno}: cell before header")
                cid = int(parts[1])
                name = parts[2]
                meta = dict(p.split("=") for p in parts[3:])
                current = CellMaterial(
                    cell_id=cid,
                    name=name,
                    coeffs=np.zeros((6, FIT_DEGREE + 1)),
                    fit_samples=[],
                    max_residual=float(meta.get("max_residual", 0.0)),
                    spd_ok=bool(int(meta.get("spd_ok", 1))),
                )
                db.cells[cid] = current
            elif key in COMPONENT_ORDER:
                comp = COMPONENT_ORDER.index(key)
                current.coeffs[comp] = [float(x) for x in parts[1:]]
            elif key == "sample":
                v = float(parts[1])
                vec = [float(x) for x in parts[2:]]
                cm = Cmat(
                    c11=vec[0], c22=vec[1], c33=vec[2],
                    c12=vec[3], c13=vec[4], c23=vec[5],
                )
                current.fit_samples.append((v, cm))
            else:
                raise ValueError(f"{path}:{lineno}: unknown record {key!r}")
    if db is None or not db.cells:
        raise ValueError(f"{path}: no material data found")
    return db
