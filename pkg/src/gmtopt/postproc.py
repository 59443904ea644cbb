"""High-resolution resampling, microstructure assignment and rendering.

A trained field can be queried on any grid, so the design is extracted by
sampling the network at fine-cell centers, committing each cell to its
dominant microstructure, and tiling the cell rasters at the thickness that
reproduces the local volume fraction.
"""

import numpy as np
from dataclasses import dataclass
from PIL import Image

from . import cells as cells_mod
from . import field as nn_field

DEFAULT_V_CUT = 0.05  # cells below this fill level render as void


@dataclass
class RenderedDesign:
    """Fine-grid assignment plus the composed binary raster."""

    fine_nx: int
    fine_ny: int
    cell_ids: np.ndarray   # (ny, nx) catalog ids, 0 for void/masked
    v: np.ndarray          # (ny, nx)
    image: np.ndarray      # (ny*n, nx*n) bool, True = material

    @property
    def solid_fraction(self):
        return float(self.image.mean())


def resample(params, fine_nx, fine_ny, bbox, symmetry_mode="none"):
    """Design fields at the centers of a fine_nx x fine_ny grid over bbox."""
    x0, y0, x1, y1 = bbox
    hx = (x1 - x0) / fine_nx
    hy = (y1 - y0) / fine_ny
    ex, ey = np.meshgrid(np.arange(fine_nx), np.arange(fine_ny))
    centers = np.stack(
        [x0 + (ex.ravel() + 0.5) * hx, y0 + (ey.ravel() + 0.5) * hy], axis=1
    )
    if symmetry_mode == "none":
        coords = nn_field.normalize_coords(centers, bbox)
        return nn_field.forward(params, coords)
    base_mode = symmetry_mode.replace("-rho", "")
    masked = nn_field.normalize_coords(
        nn_field.apply_symmetry_mask(centers, base_mode, bbox), bbox
    )
    out = nn_field.forward(params, masked)
    if symmetry_mode.endswith("-rho"):
        v = nn_field.forward(params, nn_field.normalize_coords(centers, bbox)).v
        return nn_field.DesignFields(rho=out.rho, v=v)
    return out


def assign_microstructure(rho):
    """Index (1-based) of the dominant weight; ties go to the lowest index."""
    rho = np.asarray(rho, dtype=float)
    return int(np.argmax(rho)) + 1


def assign_batch(rho):
    return np.argmax(rho, axis=-1) + 1


def render(assignments, v, cat, cell_resolution=16, v_cut=DEFAULT_V_CUT,
           active=None):
    """Compose the tiled binary design image.

    assignments: (ny, nx) catalog ids; v: (ny, nx) fills.  Cells under the
    void threshold, or outside the active mask, stay empty.  Row 0 of the
    arrays is the bottom of the domain; the returned image keeps that
    orientation (flip when exporting to screen conventions).
    """
    assignments = np.asarray(assignments)
    v = np.asarray(v, dtype=float)
    ny, nx = assignments.shape
    if v.shape != (ny, nx):
        raise ValueError("assignment and fill grids differ in shape")
    by_id = {c.id: c for c in cat}
    n = cell_resolution
    image = np.zeros((ny * n, nx * n), dtype=bool)
    raster_cache = {}
    for iy in range(ny):
        for ix in range(nx):
            if active is not None and not active[iy, ix]:
                continue
            fill = v[iy, ix]
            if fill < v_cut:
                continue
            cid = int(assignments[iy, ix])
            key = (cid, round(float(fill), 4))
            if key not in raster_cache:
                cell = by_id[cid]
                tau = cells_mod.tau_for_vf(cell, min(key[1], 1.0))
                raster_cache[key] = cells_mod.rasterize(cell, tau, n).pixels
            image[iy * n:(iy + 1) * n, ix * n:(ix + 1) * n] = raster_cache[key]
    return image


def save_image(image, path):
    """Write the binary design raster as an image file, material in black.

    The raster row order is bottom-up, so flip vertically for the file.
    """
    arr = np.where(np.flipud(image), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def render_design(params, cat, subset, fine_nx, fine_ny, bbox,
                  symmetry_mode="none", cell_resolution=16,
                  v_cut=DEFAULT_V_CUT, active=None):
    """Full resample + assign + compose pipeline; returns a RenderedDesign."""
    fields = resample(params, fine_nx, fine_ny, bbox, symmetry_mode)
    local = assign_batch(fields.rho).reshape(fine_ny, fine_nx)
    subset = list(subset)
    cell_ids = np.array(
        [[subset[j - 1] for j in row] for row in local], dtype=int
    )
    v = fields.v.reshape(fine_ny, fine_nx)
    image = render(cell_ids, v, cat, cell_resolution, v_cut, active=active)
    shown = np.ones((fine_ny, fine_nx), dtype=bool) if active is None else active
    cell_ids = np.where(shown & (v >= v_cut), cell_ids, 0)
    return RenderedDesign(fine_nx=fine_nx, fine_ny=fine_ny,
                          cell_ids=cell_ids, v=v, image=image)


def write_fields_csv(path, centers, fields, assigned_ids):
    """Delimited per-element record: x, y, v, composition weights, cell id."""
    n, M = fields.rho.shape
    with open(path, "w") as fh:
        cols = ",".join(f"rho_{m + 1}" for m in range(M))
        fh.write(f"x,y,v,{cols},assigned_id\n")
        for i in range(n):
            rho_txt = ",".join(repr(float(r)) for r in fields.rho[i])
            fh.write(f"{centers[i, 0]!r},{centers[i, 1]!r},"
                     f"{fields.v[i]!r},{rho_txt},{assigned_ids[i]}\n")
