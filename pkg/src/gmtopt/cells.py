"""Parametric unit-cell catalog: bar primitives, rasterization, size inversion.

Each cell is a union of bar primitives sharing one thickness parameter tau in
[0, 1].  A primitive is the sublevel set of a normalized distance field, so a
cell is described by phi(x) = min over its bars of the normalized distances;
the occupied region at thickness tau is {phi <= tau}.  phi is rescaled per
cell so that coverage completes exactly at tau = 1, which makes the volume
fraction strictly increasing in tau (no plateaus, so the tau <-> vf map is
invertible).
"""

import numpy as np
from dataclasses import dataclass


class ResolutionError(ValueError):
    """Raster resolution below the supported minimum."""


# Primitive order used in flag vectors and the catalog file.
PRIMITIVE_NAMES = (
    "hbar",       # horizontal mid bar
    "vbar",       # vertical mid bar
    "diag_main",  # corner-to-corner bar through (0,0)-(1,1)
    "diag_anti",  # corner-to-corner bar through (0,1)-(1,0)
    "edge_bottom",
    "edge_top",
    "edge_left",
    "edge_right",
)

# Reference sampling used for the per-cell tau -> vf table (subpixel grid).
_REF_SAMPLES = 512


def _primitive_distance(name, x, y):
    """Normalized distance to a primitive's skeleton; 1 at its farthest point.

    All skeletons touch the cell boundary at edge midpoints or corners, so any
    two catalog cells in adjacent elements stay in contact once thickened.
    """
    if name == "hbar":
        return np.abs(y - 0.5) / 0.5
    if name == "vbar":
        return np.abs(x - 0.5) / 0.5
    if name == "diag_main":
        return np.abs(y - x)
    if name == "diag_anti":
        return np.abs(x + y - 1.0)
    if name == "edge_bottom":
        return y
    if name == "edge_top":
        return 1.0 - y
    if name == "edge_left":
        return x
    if name == "edge_right":
        return 1.0 - x
    raise ValueError(f"unknown primitive {name!r}")


@dataclass(frozen=True)
class UnitCell:
    """One catalog entry: an id (1-based), a label and bar-presence flags."""

    id: int
    name: str
    primitives: tuple  # names from PRIMITIVE_NAMES

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a unit cell needs at least one bar primitive")
        for p in self.primitives:
            if p not in PRIMITIVE_NAMES:
                raise ValueError(f"unknown primitive {p!r}")

    def flags(self):
        return tuple(int(p in self.primitives) for p in PRIMITIVE_NAMES)

    def distance_field(self, x, y):
        """Raw min-distance field over the cell's bars (before rescaling)."""
        d = np.full(np.broadcast(x, y).shape, np.inf)
        for p in self.primitives:
            d = np.minimum(d, _primitive_distance(p, x, y))
        return d


@dataclass
class CellRaster:
    """Binary occupancy grid of one cell at a fixed thickness."""

    resolution: int
    pixels: np.ndarray  # (n, n) bool, row index along y

    @property
    def fraction(self):
        return float(self.pixels.mean())


_CATALOG_SPEC = (
    ("plus", ("hbar", "vbar")),
    ("x", ("diag_main", "diag_anti")),
    ("box", ("edge_bottom", "edge_top", "edge_left", "edge_right")),
    ("x-box", ("diag_main", "diag_anti", "edge_bottom", "edge_top",
               "edge_left", "edge_right")),
    ("star", ("hbar", "vbar", "diag_main", "diag_anti")),
    ("plus-box", ("hbar", "vbar", "edge_bottom", "edge_top",
                  "edge_left", "edge_right")),
    ("h", ("hbar", "edge_left", "edge_right")),
    ("i", ("vbar", "edge_bottom", "edge_top")),
    ("z", ("diag_anti", "edge_bottom", "edge_top")),
    ("n", ("diag_main", "edge_left", "edge_right")),
    ("star-box", ("hbar", "vbar", "diag_main", "diag_anti",
                  "edge_bottom", "edge_top", "edge_left", "edge_right")),
)


def catalog():
    """The fixed 11-cell catalog, ids 1..11 in documented order."""
    return [
        UnitCell(id=i + 1, name=name, primitives=prims)
        for i, (name, prims) in enumerate(_CATALOG_SPEC)
    ]


# Cached per-cell reference data: (scale, sorted phi samples).
_REF_CACHE = {}


def _reference(cell):
    """Per-cell scale and sorted distance samples (an empirical vf CDF).

    Stratified jittered sampling keeps the samples almost surely distinct,
    so CDF steps stay at 1/len(phi); a plain pixel grid would tie thousands
    of samples on axis-aligned bars and break the vf inversion tolerance.
    The jitter seed is fixed: tables must be identical across runs.
    """
    key = cell.primitives
    if key not in _REF_CACHE:
        rng = np.random.default_rng(161803398)
        base = np.arange(_REF_SAMPLES, dtype=float)
        X = (base[None, :] + rng.random((_REF_SAMPLES, _REF_SAMPLES))) / _REF_SAMPLES
        Y = (base[:, None] + rng.random((_REF_SAMPLES, _REF_SAMPLES))) / _REF_SAMPLES
        d = cell.distance_field(X, Y)
        scale = float(d.max())
        phi = np.sort((d / scale).ravel())
        _REF_CACHE[key] = (scale, phi)
    return _REF_CACHE[key]


def vf(cell, tau):
    """Volume fraction of the cell at thickness tau (strictly increasing)."""
    if tau <= 0.0:
        return 0.0
    if tau >= 1.0:
        return 1.0
    _, phi = _reference(cell)
    return float(np.searchsorted(phi, tau, side="right")) / phi.size


def rasterize(cell, tau, n):
    """Occupancy grid at pixel centers; tau endpoints are exact by definition."""
    if n < 16:
        raise ResolutionError(f"raster resolution must be >= 16, got {n}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"thickness must lie in [0, 1], got {tau}")
    if tau == 0.0:
        return CellRaster(resolution=n, pixels=np.zeros((n, n), dtype=bool))
    if tau == 1.0:
        return CellRaster(resolution=n, pixels=np.ones((n, n), dtype=bool))
    t = (np.arange(n) + 0.5) / n
    X, Y = np.meshgrid(t, t)
    scale, _ = _reference(cell)
    pixels = cell.distance_field(X, Y) / scale <= tau
    return CellRaster(resolution=n, pixels=pixels)


def tau_for_vf(cell, v):
    """Thickness whose volume fraction matches v, via the monotone vf table."""
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"volume fraction must lie in [0, 1], got {v}")
    if v == 0.0:
        return 0.0
    if v == 1.0:
        return 1.0
    _, phi = _reference(cell)
    k = min(int(np.ceil(v * phi.size)), phi.size) - 1
    tau = float(phi[k])
    # Sorted-sample quantile already lands within 1/len(phi) of v; nudge off
    # exact sample values so the <= threshold includes the intended pixels.
    return min(tau + 1e-12, 1.0)


def save_catalog(cells, path):
    """Write a catalog as structured text: id, name, primitive flags."""
    with open(path, "w") as fh:
        fh.write("# gmtopt unit-cell catalog\n")
        fh.write("# columns: id name " + " ".join(PRIMITIVE_NAMES) + "\n")
        for c in cells:
            flags = " ".join(str(v) for v in c.flags())
            fh.write(f"{c.id} {c.name} {flags}\n")


def load_catalog(path):
    """Read a catalog file written by save_catalog."""
    cells = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 + len(PRIMITIVE_NAMES):
                raise ValueError(f"{path}:{lineno}: malformed catalog row")
            cid = int(parts[0])
            name = parts[1]
            prims = tuple(
                pname
                for pname, flag in zip(PRIMITIVE_NAMES, parts[2:])
                if int(flag)
            )
            cells.append(UnitCell(id=cid, name=name, primitives=prims))
    if not cells:
        raise ValueError(f"{path}: catalog file holds no cells")
    return cells
