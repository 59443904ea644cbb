"""Coordinate-based design field: a small Swish MLP with exact gradients.

The network maps normalized element-center coordinates to M composition
weights (softmax head, so the weights always sum to one) and one volume
fraction (sigmoid head).  The network weights are the design variables, so
the design resolution is independent of the mesh.  Forward and reverse passes
are written out explicitly; the reverse pass is validated against central
finite differences in the test suite.
"""

import numpy as np
from dataclasses import dataclass

SYMMETRY_MODES = ("none", "uniform-x", "uniform-y", "uniform-x-rho", "uniform-y-rho")


class NumericError(RuntimeError):
    """Non-finite values encountered in a field evaluation."""


@dataclass
class NetworkParams:
    """Layer widths plus per-layer weight matrices and bias vectors."""

    widths: list
    weights: list
    biases: list
    seed: int = 0

    def num_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self):
        chunks = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(w.ravel())
            chunks.append(b.ravel())
        return np.concatenate(chunks)

    def with_flat(self, vec):
        """New parameter set with values taken from a flat vector."""
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.num_params():
            raise ValueError("flat parameter vector has the wrong length")
        weights, biases, at = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[at:at + w.size].reshape(w.shape).copy())
            at += w.size
            biases.append(vec[at:at + b.size].copy())
            at += b.size
        return NetworkParams(widths=list(self.widths), weights=weights,
                             biases=biases, seed=self.seed)


@dataclass
class DesignFields:
    """Per-element composition weights (simplex rows) and volume fractions."""

    rho: np.ndarray  # (n, M)
    v: np.ndarray    # (n,)

    @property
    def n_cells(self):
        return self.rho.shape[1]

    def partition_error(self):
        return float(np.abs(self.rho.sum(axis=1) - 1.0).max())


def init(seed, hidden_widths, n_outputs_rho):
    """Glorot-uniform weights, zero biases; deterministic for a fixed seed."""
    widths = [2] + list(hidden_widths) + [n_outputs_rho + 1]
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(widths=widths, weights=weights, biases=biases,
                         seed=int(seed))


def normalize_coords(coords, bbox):
    """Map raw coordinates into [-1, 1]^2 using the domain bounding box."""
    x0, y0, x1, y1 = bbox
    coords = np.asarray(coords, dtype=float)
    out = np.empty_like(coords)
    out[:, 0] = 2.0 * (coords[:, 0] - x0) / (x1 - x0) - 1.0
    out[:, 1] = 2.0 * (coords[:, 1] - y0) / (y1 - y0) - 1.0
    return out


def apply_symmetry_mask(coords, mode, bbox):
    """Collapse one coordinate to the domain midpoint for row/column-uniform
    designs.  The '-rho' variants are applied by the caller to the composition
    head only."""
    if mode not in SYMMETRY_MODES:
        raise ValueError(f"unknown symmetry mode {mode!r}")
    coords = np.asarray(coords, dtype=float)
    if mode == "none":
        return coords
    x0, y0, x1, y1 = bbox
    out = coords.copy()
    if mode.startswith("uniform-x"):
        out[:, 0] = 0.5 * (x0 + x1)
    else:
        out[:, 1] = 0.5 * (y0 + y1)
    return out


def _swish(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


def _forward_pass(params, coords_n):
    """Hidden-layer activations and raw head outputs with cached state."""
    a = np.asarray(coords_n, dtype=float)
    zs, sigmas, acts = [], [], [a]
    n_layers = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ W + b
        if i < n_layers - 1:
            zs.append(z)
            a, s = _swish(z)
            sigmas.append(s)
            acts.append(a)
        else:
            zs.append(z)
    return zs, sigmas, acts


def forward(params, coords_n):
    """Evaluate the design fields at normalized coordinates."""
    zs, _, _ = _forward_pass(params, coords_n)
    z_out = zs[-1]
    M = params.widths[-1] - 1
    logits = z_out[:, :M]
    logits = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(logits)
    rho = ez / ez.sum(axis=1, keepdims=True)
    v = 1.0 / (1.0 + np.exp(-z_out[:, M]))
    if not (np.isfinite(rho).all() and np.isfinite(v).all()):
        raise NumericError(
            "design field produced non-finite outputs; parameter scale "
            f"max |w| = {max(np.abs(w).max() for w in params.weights):.3e}"
        )
    return DesignFields(rho=rho, v=v)


def backward(params, coords_n, d_rho, d_v):
    """Gradient of sum(d_rho * rho) + sum(d_v * v) w.r.t. the parameters.

    Exact reverse mode through the softmax/sigmoid heads and the Swish
    hidden stack; returns a flat vector matching params.flatten().
    """
    coords_n = np.asarray(coords_n, dtype=float)
    d_rho = np.asarray(d_rho, dtype=float)
    d_v = np.asarray(d_v, dtype=float)
    M = params.widths[-1] - 1
    if d_rho.shape != (coords_n.shape[0], M) or d_v.shape != (coords_n.shape[0],):
        raise ValueError("upstream gradient shapes do not match the batch")

    zs, sigmas, acts = _forward_pass(params, coords_n)
    z_out = zs[-1]
    logits = z_out[:, :M] - z_out[:, :M].max(axis=1, keepdims=True)
    ez = np.exp(logits)
    rho = ez / ez.sum(axis=1, keepdims=True)
    v = 1.0 / (1.0 + np.exp(-z_out[:, M]))

    dz_out = np.empty_like(z_out)
    inner = (d_rho * rho).sum(axis=1, keepdims=True)
    dz_out[:, :M] = rho * (d_rho - inner)
    dz_out[:, M] = d_v * v * (1.0 - v)

    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    dz = dz_out
    for i in range(len(params.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ dz
        grads_b[i] = dz.sum(axis=0)
        if i > 0:
            da = dz @ params.weights[i].T
            z = zs[i - 1]
            s = sigmas[i - 1]
            dz = da * (s * (1.0 + z * (1.0 - s)))

    flat = []
    for gw, gb in zip(grads_w, grads_b):
        flat.append(gw.ravel())
        flat.append(gb.ravel())
    out = np.concatenate(flat)
    if not np.isfinite(out).all():
        raise NumericError("non-finite parameter gradient")
    return out


def save_checkpoint(path, params, meta=None):
    """Write seed, widths, metadata and the flat parameter array as text."""
    meta = meta or {}
    with open(path, "w") as fh:
        fh.write("# gmtopt field checkpoint\n")
        fh.write(f"seed {params.seed}\n")
        fh.write("widths " + " ".join(str(w) for w in params.widths) + "\n")
        for key, val in meta.items():
            if isinstance(val, (list, tuple, np.ndarray)):
                val = " ".join(repr(float(x)) if isinstance(x, float) else str(x)
                               for x in val)
            fh.write(f"{key} {val}\n")
        fh.write("params\n")
        for x in params.flatten():
            fh.write(f"{x!r}\n")


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint; returns (params, meta)."""
    meta = {}
    seed = 0
    widths = None
    values = []
    in_params = False
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if in_params:
                values.append(float(line))
                continue
            key, _, rest = line.partition(" ")
            if key == "params":
                in_params = True
            elif key == "seed":
                seed = int(rest)
            elif key == "widths":
                widths = [int(x) for x in rest.split()]
            else:
                meta[key] = rest
    if widths is None:
        raise ValueError(f"{path}: missing widths record")
    template = init(seed, widths[1:-1], widths[-1] - 1)
    params = template.with_flat(np.array(values))
    params.seed = seed
    return params, meta
