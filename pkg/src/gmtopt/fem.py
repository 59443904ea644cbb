"""Structured quad mesh, template stiffness matrices, assembly and solve.

The element stiffness matrix of a bilinear quad depends linearly on the six
independent entries of the plane elasticity matrix.  Integrating once per
component against an indicator elasticity matrix gives six template matrices;
any element stiffness is then a weighted sum of the templates, which removes
all quadrature from the optimization loop.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from dataclasses import dataclass, field


class SingularSystemError(RuntimeError):
    """Reduced global system could not be factorized (unconstrained modes)."""


# Component order used for all length-6 elasticity vectors in this package.
COMPONENT_ORDER = ("c11", "c22", "c33", "c12", "c13", "c23")

# Indicator elasticity matrices, one per component in COMPONENT_ORDER.
COMPONENT_SELECTORS = np.zeros((6, 3, 3))
COMPONENT_SELECTORS[0, 0, 0] = 1.0
COMPONENT_SELECTORS[1, 1, 1] = 1.0
COMPONENT_SELECTORS[2, 2, 2] = 1.0
COMPONENT_SELECTORS[3, 0, 1] = COMPONENT_SELECTORS[3, 1, 0] = 1.0
COMPONENT_SELECTORS[4, 0, 2] = COMPONENT_SELECTORS[4, 2, 0] = 1.0
COMPONENT_SELECTORS[5, 1, 2] = COMPONENT_SELECTORS[5, 2, 1] = 1.0

_GAUSS = (-1.0 / np.sqrt(3.0), 1.0 / np.sqrt(3.0))


def strain_displacement(xi, eta, h):
    """B matrix (3x8) of a square Q4 element of edge h at natural (xi, eta).

    Node order is counterclockwise from the lower-left corner; dofs are
    interleaved (ux0, uy0, ux1, uy1, ...).
    """
    dn_dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
    dn_deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
    dn_dx = dn_dxi * 2.0 / h
    dn_dy = dn_deta * 2.0 / h
    B = np.zeros((3, 8))
    B[0, 0::2] = dn_dx
    B[1, 1::2] = dn_dy
    B[2, 0::2] = dn_dy
    B[2, 1::2] = dn_dx
    return B


@dataclass
class TemplateSet:
    """Six 8x8 template matrices, indexed per COMPONENT_ORDER."""

    h: float
    mats: np.ndarray  # (6, 8, 8)


def compute_templates(h):
    """Integrate the six component templates with 2x2 Gauss quadrature.

    The integrand is polynomial of degree <= 2 per direction, so the rule is
    exact.
    """
    if h <= 0:
        raise ValueError(f"element size must be positive, got {h}")
    mats = np.zeros((6, 8, 8))
    det_j = (h / 2.0) ** 2
    for xi in _GAUSS:
        for eta in _GAUSS:
            B = strain_displacement(xi, eta, h)
            for i in range(6):
                mats[i] += det_j * B.T @ COMPONENT_SELECTORS[i] @ B
    return TemplateSet(h=float(h), mats=mats)


def element_stiffness(c_vec, templates):
    """Element stiffness as the template sum for one length-6 elasticity vector."""
    c_vec = np.asarray(c_vec, dtype=float)
    return np.tensordot(c_vec, templates.mats, axes=([0], [0]))


def element_stiffness_batch(c_elems, templates):
    """Stack of element stiffness matrices for (n_elem, 6) elasticity vectors."""
    return np.tensordot(c_elems, templates.mats, axes=([1], [0]))


class Mesh:
    """Structured quadrilateral mesh on [0, nx*h] x [0, ny*h].

    Attributes:
        nx, ny: element counts along x and y
        h: element edge length
        active: flat bool array (n_elem,), False for masked-out elements
        edof: (n_elem, 8) dof indices per element
        centers: (n_elem, 2) element center coordinates
    """

    def __init__(self, nx, ny, h=1.0, active=None):
        if nx < 1 or ny < 1:
            raise ValueError("mesh needs at least one element per direction")
        self.nx = int(nx)
        self.ny = int(ny)
        self.h = float(h)
        self.n_elem = self.nx * self.ny
        self.n_nodes = (self.nx + 1) * (self.ny + 1)
        self.n_dof = 2 * self.n_nodes
        if active is None:
            active = np.ones(self.n_elem, dtype=bool)
        active = np.asarray(active, dtype=bool).reshape(-1)
        if active.size != self.n_elem:
            raise ValueError("active mask size does not match element count")
        if not active.any():
            raise ValueError("active mask is empty")
        self.active = active

        ex = np.arange(self.nx)
        ey = np.arange(self.ny)
        EX, EY = np.meshgrid(ex, ey)  # element e = ey*nx + ex
        ex_f = EX.ravel()
        ey_f = EY.ravel()
        n00 = ey_f * (self.nx + 1) + ex_f
        n10 = n00 + 1
        n11 = n00 + self.nx + 2
        n01 = n00 + self.nx + 1
        nodes = np.stack([n00, n10, n11, n01], axis=1)
        self.edof = np.empty((self.n_elem, 8), dtype=np.int64)
        self.edof[:, 0::2] = 2 * nodes
        self.edof[:, 1::2] = 2 * nodes + 1
        self.centers = np.stack(
            [(ex_f + 0.5) * self.h, (ey_f + 0.5) * self.h], axis=1
        )
        self._asm_rows = np.repeat(self.edof, 8, axis=1).ravel()
        self._asm_cols = np.tile(self.edof, (1, 8)).ravel()

    @property
    def bbox(self):
        return (0.0, 0.0, self.nx * self.h, self.ny * self.h)

    @property
    def element_area(self):
        return self.h * self.h

    def node_id(self, ix, iy):
        return iy * (self.nx + 1) + ix

    def node_near(self, x, y):
        """Index of the node closest to (x, y)."""
        ix = int(round(np.clip(x / self.h, 0, self.nx)))
        iy = int(round(np.clip(y / self.h, 0, self.ny)))
        return self.node_id(ix, iy)


@dataclass
class BoundaryConditions:
    """Fixed dofs and point loads (dof index, magnitude)."""

    fixed_dofs: np.ndarray
    loads: list = field(default_factory=list)

    def __post_init__(self):
        self.fixed_dofs = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        if self.fixed_dofs.size < 3:
            raise ValueError(
                "at least 3 constrained dofs are required to remove "
                "rigid-body motion"
            )

    def validate(self, mesh):
        if self.fixed_dofs.size and (
            self.fixed_dofs.min() < 0 or self.fixed_dofs.max() >= mesh.n_dof
        ):
            raise ValueError("fixed dof index out of range")
        for dof, _ in self.loads:
            if dof < 0 or dof >= mesh.n_dof:
                raise ValueError(f"load dof {dof} out of range")

    def force_vector(self, mesh):
        f = np.zeros(mesh.n_dof)
        for dof, mag in self.loads:
            f[dof] += mag
        return f


def assemble(mesh, ke_all):
    """Assemble the global stiffness matrix from per-element 8x8 blocks."""
    K = sp.coo_matrix(
        (ke_all.ravel(), (mesh._asm_rows, mesh._asm_cols)),
        shape=(mesh.n_dof, mesh.n_dof),
    )
    return K.tocsc()


def assemble_and_solve(mesh, bc, c_elems, templates, check_residual=False):
    """Solve K u = f with fixed dofs eliminated by row/column reduction.

    c_elems: (n_elem, 6) per-element elasticity vectors (floored, so the
    system stays nonsingular even for void elements).
    """
    bc.validate(mesh)
    ke_all = element_stiffness_batch(c_elems, templates)
    K = assemble(mesh, ke_all)
    f = bc.force_vector(mesh)
    free = np.setdiff1d(np.arange(mesh.n_dof), bc.fixed_dofs)
    K_ff = K[free][:, free].tocsc()
    try:
        lu = spla.splu(K_ff)
    except RuntimeError as err:
        raise SingularSystemError(
            "global stiffness factorization failed; the boundary conditions "
            f"likely leave unconstrained modes ({err})"
        ) from err
    u = np.zeros(mesh.n_dof)
    u[free] = lu.solve(f[free])
    if check_residual:
        fnorm = np.linalg.norm(f[free])
        if fnorm > 0:
            res = np.linalg.norm(K_ff @ u[free] - f[free]) / fnorm
            if res > 1e-9:
                raise SingularSystemError(f"solver residual {res:.3e} exceeds 1e-9")
    return u


def compliance(f, u):
    """Work of the external loads, f.T @ u."""
    f = np.asarray(f, dtype=float)
    u = np.asarray(u, dtype=float)
    if f.shape != u.shape:
        raise ValueError("force and displacement vectors differ in size")
    return float(f @ u)


def adjoint_element_seeds(u, mesh, templates):
    """Per-element gradient of compliance w.r.t. the six elasticity components.

    For a design-independent load the compliance is self-adjoint and the
    sensitivity reduces to -u_e.T @ Khat_i @ u_e per element and component.
    """
    ue = u[mesh.edof]  # (n_elem, 8)
    return -np.einsum("ek,ikl,el->ei", ue, templates.mats, ue)
