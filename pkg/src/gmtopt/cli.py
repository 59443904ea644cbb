"""Command-line entry point: homogenize, optimize and render subcommands.

Problems are described by INI-style config files with named boundary
anchors.  The optimize report directory holds the delimited history and
field records next to rendered convergence and design figures.
"""

import argparse
import os
import re
import sys
from dataclasses import dataclass, asdict, fields as dc_fields

import numpy as np

from . import cells as cells_mod
from . import field as nn_field
from . import homog, postproc
from .fem import BoundaryConditions, Mesh
from .optimize import (
    ConvergenceRecord,
    ProblemSpec,
    Schedules,
    evaluate_fields,
    mixing_fraction,
    run_optimization,
)

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_NOT_CONVERGED = 3


class ConfigError(ValueError):
    """Malformed or unknown configuration content."""


@dataclass
class ConfigSpec:
    """Flat view of one problem config; defaults match the documented setup."""

    # mesh
    nx: int = 60
    ny: int = 30
    h: float = 1.0
    mask: str = "none"
    # bc
    fixed: str = ""
    loads: str = ""
    # opt
    vf_star: float = 0.5
    k_max: int = 300
    eps_star: float = 0.01
    lr: float = 0.01
    clip: float = 1.0
    p0: float = 1.0
    dp: float = 0.02
    p_max: float = 8.0
    t0: float = 1.0
    mu: float = 1.01
    seed: int = 0
    # nn
    hidden_layers: int = 4
    neurons_per_layer: int = 20
    # mstruct
    db_path: str = "materials.db"
    subset: str = "all"
    symmetry_mode: str = "none"
    name: str = "problem"


_SECTION_KEYS = {
    "mesh": ("nx", "ny", "h", "mask"),
    "bc": ("fixed", "loads"),
    "opt": ("vf_star", "k_max", "eps_star", "lr", "clip", "p0", "dp",
            "p_max", "t0", "mu", "seed"),
    "nn": ("hidden_layers", "neurons_per_layer"),
    "mstruct": ("db_path", "subset", "symmetry_mode"),
}


def parse_config(text, source="<config>"):
    """Parse config text into a ConfigSpec; unknown sections/keys are errors."""
    import configparser

    cp = configparser.ConfigParser()
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(str(err)) from err
    cfg = ConfigSpec()
    field_types = {f.name: f.type for f in dc_fields(ConfigSpec)}
    lines = text.splitlines()

    def line_of(key):
        pat = re.compile(rf"^\s*{re.escape(key)}\s*[=:]")
        for i, line in enumerate(lines, start=1):
            if pat.match(line):
                return i
        return "?"

    for section in cp.sections():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, value in cp.items(section):
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(
                    f"{source}:{line_of(key)}: unknown key {key!r} in "
                    f"[{section}]"
                )
            typ = field_types[key]
            try:
                if typ in (int, "int"):
                    value = int(value)
                elif typ in (float, "float"):
                    value = float(value)
            except ValueError as err:
                raise ConfigError(
                    f"{source}:{line_of(key)}: bad value for {key}: {err}"
                ) from err
            setattr(cfg, key, value)
    return cfg


def load_config(path):
    with open(path) as fh:
        text = fh.read()
    cfg = parse_config(text, source=str(path))
    cfg.name = os.path.splitext(os.path.basename(path))[0]
    return cfg


def serialize_config(cfg):
    """Config text that parses back to an identical spec."""
    out = []
    values = asdict(cfg)
    for section, keys in _SECTION_KEYS.items():
        out.append(f"[{section}]")
        for key in keys:
            out.append(f"{key} = {values[key]}")
        out.append("")
    return "\n".join(out)


def parse_mask(spec, nx, ny):
    """Element activity mask from its config spelling.

    'none' keeps everything; 'lbracket(w)' removes the upper-right block
    beyond arm width w (in elements).
    """
    spec = spec.strip()
    if spec == "none":
        return np.ones(nx * ny, dtype=bool)
    m = re.fullmatch(r"lbracket\((\d+)\)", spec)
    if m:
        w = int(m.group(1))
        if not 0 < w < min(nx, ny):
            raise ConfigError(f"lbracket arm width {w} does not fit the mesh")
        ex, ey = np.meshgrid(np.arange(nx), np.arange(ny))
        return ~((ex.ravel() >= w) & (ey.ravel() >= w))
    raise ConfigError(f"unknown mask spec {spec!r}")


_POINT_RE = re.compile(r"point\(\s*([-\d.eE+]+)\s*,\s*([-\d.eE+]+)\s*\)")
_SEG_RE = re.compile(
    r"seg\(\s*(left|right|top|bottom)\s*,\s*([-\d.eE+]+)\s*,\s*([-\d.eE+]+)\s*\)"
)
_EDGES = ("left-edge", "right-edge", "top-edge", "bottom-edge")


def _selector_nodes(mesh, selector):
    """Node ids plus the node spacing along an edge selector (None for points)."""
    selector = selector.strip()
    m = _POINT_RE.fullmatch(selector)
    if m:
        return [mesh.node_near(float(m.group(1)), float(m.group(2)))], None
    if selector in _EDGES:
        side = selector.split("-")[0]
        a, b = 0.0, (mesh.ny if side in ("left", "right") else mesh.nx) * mesh.h
    else:
        m = _SEG_RE.fullmatch(selector)
        if not m:
            raise ConfigError(f"unknown boundary selector {selector!r}")
        side = m.group(1)
        a, b = float(m.group(2)), float(m.group(3))
    if side in ("left", "right"):
        ix = 0 if side == "left" else mesh.nx
        along = np.arange(mesh.ny + 1) * mesh.h
        ids = [mesh.node_id(ix, iy) for iy in range(mesh.ny + 1)
               if a - 1e-9 <= along[iy] <= b + 1e-9]
    else:
        iy = 0 if side == "bottom" else mesh.ny
        along = np.arange(mesh.nx + 1) * mesh.h
        ids = [mesh.node_id(ix, iy) for ix in range(mesh.nx + 1)
               if a - 1e-9 <= along[ix] <= b + 1e-9]
    if not ids:
        raise ConfigError(f"selector {selector!r} matches no nodes")
    return ids, mesh.h


_AXES = {"x": (0,), "y": (1,), "xy": (0, 1)}


def build_bc(mesh, fixed_text, loads_text):
    """Boundary conditions from the config's anchor grammar.

    fixed entries: 'selector:axes'.  load entries: 'selector:axis:magnitude';
    point loads take the magnitude directly, edge selectors spread it as a
    traction per unit length (consistent nodal loads, half at segment ends).
    """
    fixed = []
    for entry in _split_entries(fixed_text):
        try:
            selector, axes = entry.rsplit(":", 1)
        except ValueError:
            raise ConfigError(f"bad fixed entry {entry!r}") from None
        if axes not in _AXES:
            raise ConfigError(f"bad dof axes {axes!r} in {entry!r}")
        ids, _ = _selector_nodes(mesh, selector)
        for nid in ids:
            for ax in _AXES[axes]:
                fixed.append(2 * nid + ax)
    loads = []
    for entry in _split_entries(loads_text):
        parts = entry.rsplit(":", 2)
        if len(parts) != 3:
            raise ConfigError(f"bad load entry {entry!r}")
        selector, axis, mag = parts
        if axis not in ("x", "y"):
            raise ConfigError(f"bad load axis {axis!r} in {entry!r}")
        mag = float(mag)
        ax = 0 if axis == "x" else 1
        ids, spacing = _selector_nodes(mesh, selector)
        if spacing is None:
            loads.append((2 * ids[0] + ax, mag))
        else:
            for i, nid in enumerate(ids):
                w = spacing if 0 < i < len(ids) - 1 else spacing / 2.0
                loads.append((2 * nid + ax, mag * w))
    if not fixed:
        raise ConfigError("no fixed dofs specified")
    if not loads:
        raise ConfigError("no loads specified")
    return BoundaryConditions(fixed_dofs=np.array(fixed), loads=loads)


def _split_entries(text):
    return [e.strip() for e in text.split(",") if e.strip()] if text else []


def build_problem(cfg, db):
    """Runtime problem from a parsed config plus a material database."""
    active = parse_mask(cfg.mask, cfg.nx, cfg.ny)
    mesh = Mesh(cfg.nx, cfg.ny, cfg.h, active=active)
    bc = build_bc(mesh, cfg.fixed, cfg.loads)
    if cfg.subset.strip() == "all":
        subset = sorted(db.cells)
    else:
        subset = [int(s) for s in cfg.subset.split(",") if s.strip()]
    for cid in subset:
        db.cell(cid)  # raises UnknownCellError for bad ids
    sched = Schedules(p0=cfg.p0, dp=cfg.dp, p_max=cfg.p_max, t0=cfg.t0,
                      mu=cfg.mu, lr=cfg.lr, clip=cfg.clip, k_max=cfg.k_max,
                      eps_star=cfg.eps_star)
    return ProblemSpec(
        mesh=mesh,
        bc=bc,
        vf_star=cfg.vf_star,
        subset=subset,
        hidden=[cfg.neurons_per_layer] * cfg.hidden_layers,
        seed=cfg.seed,
        schedules=sched,
        symmetry_mode=cfg.symmetry_mode,
        mask_spec=cfg.mask,
        name=cfg.name,
    )


def bundled_config_path(name):
    """Path of one of the shipped example configs."""
    here = os.path.dirname(os.path.abspath(__file__))
    return os.path.join(here, "configs", f"{name}.cfg")


def write_convergence_figure(record, vf_star, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    it = record.iteration
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    axes[0].plot(it, record.J, "k-", lw=1.2)
    axes[0].set_ylabel("compliance")
    axes[0].set_yscale("log")
    axes[0].grid(alpha=0.3)
    vfrac = (np.asarray(record.g_v) + 1.0) * vf_star
    axes[1].plot(it, vfrac, "b-", lw=1.2)
    axes[1].axhline(vf_star, color="r", ls="--", lw=1.0, label="target")
    axes[1].set_ylabel("volume fraction")
    axes[1].set_xlabel("iteration")
    axes[1].grid(alpha=0.3)
    axes[1].legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_design_figure(problem, fields, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mesh = problem.mesh
    vmap = np.zeros(mesh.n_elem)
    idmap = np.full(mesh.n_elem, np.nan)
    vmap[mesh.active] = fields.v
    ids = postproc.assign_batch(fields.rho)
    idmap[mesh.active] = [problem.subset[i - 1] for i in ids]
    idmap[vmap < postproc.DEFAULT_V_CUT] = np.nan

    fig, axes = plt.subplots(2, 1, figsize=(7, 6))
    im0 = axes[0].imshow(vmap.reshape(mesh.ny, mesh.nx), origin="lower",
                         cmap="gray_r", vmin=0, vmax=1)
    axes[0].set_title("volume fraction")
    fig.colorbar(im0, ax=axes[0], fraction=0.03)
    im1 = axes[1].imshow(idmap.reshape(mesh.ny, mesh.nx), origin="lower",
                         cmap="tab20", vmin=1, vmax=20)
    axes[1].set_title("assigned microstructure")
    fig.colorbar(im1, ax=axes[1], fraction=0.03)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def cmd_homogenize(args):
    if args.catalog:
        cat = cells_mod.load_catalog(args.catalog)
    else:
        cat = cells_mod.catalog()
    print(f"homogenizing {len(cat)} cells at resolution "
          f"{args.resolution} (E={args.base_e}, nu={args.base_nu})")
    db = homog.build_material_db(
        cat,
        base=(args.base_e, args.base_nu),
        raster_resolution=args.resolution,
        path=args.out,
    )
    bad = 0
    for cid in sorted(db.cells):
        cm = db.cells[cid]
        status = "ok" if cm.spd_ok else "CLIPPED"
        print(f"  cell {cid:2d} {cm.name:10s} fit residual "
              f"{cm.max_residual:.3e}  spd {status}")
        bad += not cm.spd_ok
    print(f"wrote {args.out}")
    return EXIT_OK if bad == 0 else EXIT_ERROR


def cmd_optimize(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.vf_star is not None:
        cfg.vf_star = args.vf_star
    if args.subset is not None:
        cfg.subset = args.subset
    if args.k_max is not None:
        cfg.k_max = args.k_max
    if args.symmetry is not None:
        cfg.symmetry_mode = args.symmetry
    db_path = args.db or cfg.db_path
    if not os.path.exists(db_path):
        print(f"material database {db_path!r} not found; run "
              f"'gmtopt homogenize --out {db_path}' first", file=sys.stderr)
        return EXIT_ERROR
    db = homog.load_material_db(db_path)
    problem = build_problem(cfg, db)

    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    history_path = os.path.join(out_dir, "history.csv")
    checkpoint_path = os.path.join(out_dir, "checkpoint.txt")
    log = None if args.quiet else print
    params, fields, record = run_optimization(
        problem, db, history_path=history_path,
        checkpoint_path=checkpoint_path, log=log,
    )

    mesh = problem.mesh
    centers = mesh.centers[mesh.active]
    ids_local = postproc.assign_batch(fields.rho)
    ids = np.array([problem.subset[i - 1] for i in ids_local])
    postproc.write_fields_csv(os.path.join(out_dir, "fields.csv"),
                              centers, fields, ids)
    write_convergence_figure(record, problem.vf_star,
                             os.path.join(out_dir, "convergence.png"))
    write_design_figure(problem, fields,
                        os.path.join(out_dir, "design_preview.png"))

    vol = (record.g_v[-1] + 1.0) * problem.vf_star
    print(f"done: {len(record.iteration)} iterations, "
          f"J = {record.J[-1]:.6g}, volume fraction = {vol:.4f}, "
          f"single-cell share = {mixing_fraction(fields):.3f}, "
          f"{'converged' if record.converged else 'iteration limit reached'}")
    print(f"outputs in {out_dir}")
    return EXIT_OK if record.converged else EXIT_NOT_CONVERGED


def cmd_render(args):
    if not os.path.exists(args.checkpoint):
        print(f"checkpoint {args.checkpoint!r} not found", file=sys.stderr)
        return EXIT_ERROR
    params, meta = nn_field.load_checkpoint(args.checkpoint)
    bbox = tuple(float(x) for x in meta["bbox"].split())
    subset = [int(x) for x in meta["subset"].split()]
    nx = int(meta["nx"])
    ny = int(meta["ny"])
    symmetry = meta.get("symmetry", "none")
    mask_spec = meta.get("mask", "none")
    fine_nx = args.fine_nx or nx
    fine_ny = args.fine_ny or ny

    coarse_active = parse_mask(mask_spec, nx, ny).reshape(ny, nx)
    fy, fx = np.meshgrid(np.arange(fine_ny), np.arange(fine_nx), indexing="ij")
    active = coarse_active[(fy * ny) // fine_ny, (fx * nx) // fine_nx]

    cat = (cells_mod.load_catalog(args.catalog) if args.catalog
           else cells_mod.catalog())
    design = postproc.render_design(
        params, cat, subset, fine_nx, fine_ny, bbox,
        symmetry_mode=symmetry, cell_resolution=args.cell_resolution,
        v_cut=args.v_cut, active=active,
    )
    postproc.save_image(design.image, args.out)
    print(f"wrote {args.out} "
          f"({design.image.shape[1]}x{design.image.shape[0]} px, "
          f"solid fraction {design.solid_fraction:.4f})")

    if args.fields_out:
        x0, y0, x1, y1 = bbox
        hx = (x1 - x0) / fine_nx
        hy = (y1 - y0) / fine_ny
        fields = postproc.resample(params, fine_nx, fine_ny, bbox, symmetry)
        ex, ey = np.meshgrid(np.arange(fine_nx), np.arange(fine_ny))
        centers = np.stack([x0 + (ex.ravel() + 0.5) * hx,
                            y0 + (ey.ravel() + 0.5) * hy], axis=1)
        keep = active.ravel()
        sub_fields = nn_field.DesignFields(rho=fields.rho[keep],
                                           v=fields.v[keep])
        ids = np.array([subset[i - 1]
                        for i in postproc.assign_batch(sub_fields.rho)])
        postproc.write_fields_csv(args.fields_out, centers[keep],
                                  sub_fields, ids)
        print(f"wrote {args.fields_out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gmtopt",
        description="Graded multiscale topology optimization with a "
                    "coordinate neural field",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_h = sub.add_parser("homogenize",
                         help="build the microstructure material database")
    p_h.add_argument("--catalog", help="custom catalog file (default: built-in)")
    p_h.add_argument("--base-e", type=float, default=1.0,
                     help="base Young's modulus")
    p_h.add_argument("--base-nu", type=float, default=0.3,
                     help="base Poisson's ratio")
    p_h.add_argument("--resolution", type=int, default=64,
                     help="cell raster resolution")
    p_h.add_argument("--out", default="materials.db",
                     help="output database path")
    p_h.set_defaults(func=cmd_homogenize)

    p_o = sub.add_parser("optimize", help="run one optimization problem")
    p_o.add_argument("config", help="problem config file")
    p_o.add_argument("--db", help="material database (overrides config)")
    p_o.add_argument("--out-dir", default="out",
                     help="directory for reports and checkpoints")
    p_o.add_argument("--seed", type=int, help="override the config seed")
    p_o.add_argument("--vf-star", type=float,
                     help="override the target volume fraction")
    p_o.add_argument("--subset", help="override the cell subset, e.g. 1,2")
    p_o.add_argument("--k-max", type=int, help="override the iteration cap")
    p_o.add_argument("--symmetry", choices=nn_field.SYMMETRY_MODES,
                     help="override the symmetry mode")
    p_o.add_argument("--quiet", action="store_true")
    p_o.set_defaults(func=cmd_optimize)

    p_r = sub.add_parser("render",
                         help="resample a checkpoint into a design image")
    p_r.add_argument("checkpoint", help="checkpoint file from optimize")
    p_r.add_argument("--catalog", help="custom catalog file")
    p_r.add_argument("--fine-nx", type=int,
                     help="fine grid width (default: training width)")
    p_r.add_argument("--fine-ny", type=int,
                     help="fine grid height (default: training height)")
    p_r.add_argument("--cell-resolution", type=int, default=16,
                     help="pixels per cell edge")
    p_r.add_argument("--v-cut", type=float, default=postproc.DEFAULT_V_CUT,
                     help="fill level below which a cell renders empty")
    p_r.add_argument("--out", default="design.png", help="output image")
    p_r.add_argument("--fields-out", help="also write the fine field table")
    p_r.set_defaults(func=cmd_render)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
