"""Graded multiscale topology optimization with a coordinate neural field.

A catalog of parametric unit cells is homogenized once into per-cell
elasticity polynomials; a small coordinate network then selects, at every
finite element, a microstructure and its fill level, trained to minimize
compliance under a volume constraint enforced by a log barrier.
"""

import os as _os

# BLAS thread count must be pinned before numpy loads.
_threads = _os.environ.get("GMTOPT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .cells import (  # noqa: E402
    CellRaster,
    UnitCell,
    catalog,
    load_catalog,
    rasterize,
    save_catalog,
    tau_for_vf,
    vf,
)
from .homog import (  # noqa: E402
    Cmat,
    MaterialDB,
    build_material_db,
    fit_polynomials,
    homogenize,
    load_material_db,
    save_material_db,
    solid_elasticity,
)
from .material import effective_C, eval_Cm  # noqa: E402
from .fem import (  # noqa: E402
    BoundaryConditions,
    Mesh,
    TemplateSet,
    adjoint_element_seeds,
    assemble_and_solve,
    compliance,
    compute_templates,
    element_stiffness,
)
from .field import (  # noqa: E402
    DesignFields,
    NetworkParams,
    apply_symmetry_mask,
    backward,
    forward,
    init,
    load_checkpoint,
    normalize_coords,
    save_checkpoint,
)
from .optimize import (  # noqa: E402
    ConvergenceRecord,
    OptState,
    ProblemSpec,
    Schedules,
    adam_step,
    log_barrier,
    loss,
    mixing_fraction,
    run_optimization,
    total_gradient,
    volume_constraint,
)
from .postproc import (  # noqa: E402
    RenderedDesign,
    assign_microstructure,
    render,
    render_design,
    resample,
)

__version__ = "0.1.0"
