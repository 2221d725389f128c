"""Crossbar mapping of convolution weights and non-ideality injection.

A layer's OIKK weight tensor becomes a (I*K*K) x O matrix (crossbar rows are
inputs, columns are output neurons), tiled onto fixed-size arrays. Each weight
is quantized, offset-encoded, split into slices and programmed as one device
conductance per slice. Drift, read noise and the resistive mesh act on those
conductances; the result is read back into a non-ideal weight tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .device import (
    DeviceSpec,
    QuantSpec,
    conductance_to_level,
    decode_levels,
    encode_levels,
    level_to_conductance,
    quantize_layer,
    read_noise_sigma,
)


class SolverError(RuntimeError):
    """The parasitic network could not be solved (singular or non-finite)."""


@dataclass(frozen=True)
class XbarConfig:
    rows: int = 64
    cols: int = 64
    rdriver: float = 1000.0
    rwire_row: float = 5.0
    rwire_col: float = 10.0
    rsense: float = 1000.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("crossbar rows/cols must be >= 1")
        if min(self.rdriver, self.rwire_row, self.rwire_col, self.rsense) < 0:
            raise ValueError("parasitic resistances must be >= 0")


@dataclass(frozen=True)
class NoiseConfig:
    read_noise: bool = False
    drift_t: Optional[float] = None
    drift_t0: float = 1.0
    parasitics: bool = False
    seed: int = 0
    clamp_nonneg: bool = False

    def __post_init__(self):
        if self.drift_t is not None and not (self.drift_t >= self.drift_t0 > 0):
            raise ValueError("drift needs T >= T0 > 0")

    @property
    def drift(self) -> bool:
        return self.drift_t is not None


@dataclass(frozen=True)
class TileGrid:
    """Conductances of one layer laid out as tiles.

    ``g`` has shape (tile_rows, tile_cols, slices, rows, cols) in uS and
    ``mask`` marks cells that hold a real weight (padding is False).
    """

    layer_id: int
    weight_shape: tuple
    delta: float
    quant: QuantSpec
    device: DeviceSpec
    xbar: XbarConfig
    g: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)

    @property
    def matrix_shape(self) -> tuple:
        o, i, kh, kw = self.weight_shape
        return (i * kh * kw, o)

    @property
    def grid_shape(self) -> tuple:
        return self.g.shape[:2]

    def with_conductances(self, g: np.ndarray) -> "TileGrid":
        if g.shape != self.g.shape:
            raise ValueError(f"conductance array {g.shape} does not match grid {self.g.shape}")
        return replace(self, g=g)


def weight_matrix(w: np.ndarray) -> np.ndarray:
    """OIKK tensor -> (I*K*K, O) crossbar matrix."""
    return w.reshape(w.shape[0], -1).T


def _to_tiles(mat: np.ndarray, rows: int, cols: int, fill) -> np.ndarray:
    """(..., R, C) -> (tr, tc, ..., rows, cols) with padding."""
    r, c = mat.shape[-2:]
    tr, tc = -(-r // rows), -(-c // cols)
    lead = mat.shape[:-2]
    padded = np.full(lead + (tr * rows, tc * cols), fill, dtype=mat.dtype)
    padded[..., :r, :c] = mat
    t = padded.reshape(lead + (tr, rows, tc, cols))
    nl = len(lead)
    order = (nl, nl + 2) + tuple(range(nl)) + (nl + 1, nl + 3)
    return t.transpose(order)


def _from_tiles(tiles: np.ndarray, r: int, c: int) -> np.ndarray:
    """Inverse of :func:`_to_tiles`, cropping padding."""
    tr, tc = tiles.shape[:2]
    rows, cols = tiles.shape[-2:]
    lead = tiles.shape[2:-2]
    nl = len(lead)
    order = tuple(range(2, 2 + nl)) + (0, 2 + nl, 1, 3 + nl)
    full = tiles.transpose(order).reshape(lead + (tr * rows, tc * cols))
    return full[..., :r, :c]


def map_layer(w: np.ndarray, q: QuantSpec, d: DeviceSpec, x: XbarConfig, layer_id: int = 0) -> TileGrid:
    """Quantize, slice and program one convolution weight tensor."""
    w = np.asarray(w)
    if w.ndim != 4:
        raise ValueError(f"map_layer expects a 4-D OIKK tensor, got shape {w.shape}")
    if q.slice_bits != d.bits:
        raise ValueError(f"slice_bits={q.slice_bits} but device {d.name} holds {d.bits} bits")
    ql = quantize_layer(w, q)
    slices = encode_levels(weight_matrix(ql.levels), q)  # (S, R, C)
    r, c = slices.shape[1:]
    tiled = _to_tiles(slices, x.rows, x.cols, 0)
    g = np.asarray(level_to_conductance(tiled, d), dtype=np.float64)
    mask = _to_tiles(np.ones((r, c), dtype=bool), x.rows, x.cols, False)
    return TileGrid(layer_id, tuple(w.shape), ql.delta, q, d, x, g, mask)


def reconstruct_weights(grid: TileGrid, g: Optional[np.ndarray] = None) -> np.ndarray:
    """Read conductances back into a float32 OIKK weight tensor."""
    g = grid.g if g is None else g
    if g.shape != grid.g.shape or g.shape[2] != grid.quant.n_slices:
        raise ValueError(f"conductances {g.shape} do not match grid metadata {grid.g.shape}")
    r, c = grid.matrix_shape
    levels = conductance_to_level(g, grid.device)
    mat = decode_levels(_from_tiles(levels, r, c), grid.quant) * grid.delta
    o, i, kh, kw = grid.weight_shape
    return np.ascontiguousarray(mat.T.reshape(o, i, kh, kw)).astype(np.float32)


def _tile_rng(seed: int, layer_id: int, tr: int, tc: int, s: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(layer_id, tr, tc, s)))


def apply_read_noise(grid: TileGrid, seed: int, clamp_nonneg: bool = False) -> TileGrid:
    """Add zero-mean Gaussian noise with the device's conductance-dependent std.

    Every (tile, slice) draws from its own stream keyed by
    ``(seed, layer_id, tile_row, tile_col, slice)``; cells are filled
    row-major within the tile, so results do not depend on visiting order.
    """
    g = grid.g.copy()
    tr_n, tc_n, s_n = g.shape[:3]
    for tr in range(tr_n):
        for tc in range(tc_n):
            for s in range(s_n):
                tile = g[tr, tc, s]
                z = _tile_rng(seed, grid.layer_id, tr, tc, s).standard_normal(tile.shape)
                g[tr, tc, s] = tile + z * read_noise_sigma(tile, grid.device)
    if clamp_nonneg:
        np.maximum(g, 0.0, out=g)
    return grid.with_conductances(g)


def drift_factor(t: float, t0: float, nu: float) -> float:
    if not (t >= t0 > 0):
        raise ValueError(f"drift needs T >= T0 > 0, got T={t}, T0={t0}")
    # base-10 form keeps whole decades exact, e.g. (1e10) ** -0.1 == 0.1
    return 10.0 ** (-nu * math.log10(t / t0))


def apply_drift(grid: TileGrid, t: float, t0: float = 1.0, nu: Optional[float] = None) -> TileGrid:
    nu = grid.device.nu if nu is None else nu
    f = drift_factor(t, t0, nu)
    if f == 1.0:
        return grid.with_conductances(grid.g.copy())
    return grid.with_conductances(grid.g * f)


# ---------------------------------------------------------------------------
# resistive mesh
# ---------------------------------------------------------------------------

def ideal_mac(g: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Column currents (uA) of an ideal crossbar: ``I_j = sum_i G_ij V_i``."""
    g = np.asarray(g, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if g.shape[0] != v.shape[0]:
        raise ValueError(f"{v.shape[0]} inputs for a crossbar with {g.shape[0]} rows")
    return v @ g


def _mesh_branches(rows: int, cols: int, x: XbarConfig):
    """Fixed (non-device) branches of the mesh as (a, b, resistance) arrays.

    Node ids: row node (i, j) -> i*cols + j; column node (i, j) ->
    rows*cols + i*cols + j; source i -> 2*rows*cols + i; ground ->
    2*rows*cols + rows. The first row segment sits in series with the driver
    and the last column segment in series with the sense resistor.
    """
    n = rows * cols
    rid = np.arange(n).reshape(rows, cols)
    cid = n + rid
    src = 2 * n + np.arange(rows)
    gnd = 2 * n + rows
    a, b, r = [], [], []
    a.append(src); b.append(rid[:, 0]); r.append(np.full(rows, x.rdriver + x.rwire_row))
    if cols > 1:
        a.append(rid[:, :-1].ravel()); b.append(rid[:, 1:].ravel()); r.append(np.full(rows * (cols - 1), x.rwire_row))
    if rows > 1:
        a.append(cid[:-1, :].ravel()); b.append(cid[1:, :].ravel()); r.append(np.full((rows - 1) * cols, x.rwire_col))
    a.append(cid[-1, :]); b.append(np.full(cols, gnd)); r.append(np.full(cols, x.rwire_col + x.rsense))
    return np.concatenate(a), np.concatenate(b), np.concatenate(r), rid, cid, src, gnd


def effective_conductance_parasitic(g: np.ndarray, x: XbarConfig) -> np.ndarray:
    """Effective conductance matrix of one tile under the parasitic mesh.

    ``G'[i, j]`` is the current (uA) leaving column ``j`` through its sense
    path when input ``i`` is driven at 1 V and all other inputs at 0 V. The
    mesh is linear, so ``I = V @ G'`` holds exactly for any input vector.
    Zero resistances are handled by merging the shorted nodes. The nodal
    matrix is factorized once and all ``rows`` excitations are solved
    against that factorization.
    """
    g = np.asarray(g, dtype=np.float64)
    rows, cols = g.shape
    if (rows, cols) != (x.rows, x.cols):
        raise ValueError(f"tile {g.shape} does not match crossbar {x.rows}x{x.cols}")
    n = rows * cols
    n_all = 2 * n + rows + 1
    fa, fb, fr, rid, cid, src, gnd = _mesh_branches(rows, cols, x)

    # merge zero-resistance branches into super-nodes
    short = fr == 0
    if short.any():
        adj = sp.coo_matrix((np.ones(short.sum()), (fa[short], fb[short])), shape=(n_all, n_all))
        _, comp = connected_components(adj, directed=False)
    else:
        comp = np.arange(n_all)
    fixed_val = {}
    for i, node in enumerate(src):
        fixed_val.setdefault(comp[node], []).append(("src", i))
    fixed_val.setdefault(comp[gnd], []).append(("gnd", None))
    for owners in fixed_val.values():
        if len(owners) > 1:
            raise SolverError("zero-resistance path shorts a source to another source or to ground")

    gs = g.ravel() * 1e-6  # uS -> S
    ba = np.concatenate([fa[~short], rid.ravel()])
    bb = np.concatenate([fb[~short], cid.ravel()])
    bg = np.concatenate([1.0 / fr[~short], gs])
    uniq, inv = np.unique(comp, return_inverse=True)
    m = len(uniq)
    la, lb = inv[ba], inv[bb]
    keep = la != lb
    la, lb, bg = la[keep], lb[keep], bg[keep]
    lap = sp.coo_matrix(
        (np.concatenate([bg, bg, -bg, -bg]),
         (np.concatenate([la, lb, la, lb]), np.concatenate([la, lb, lb, la]))),
        shape=(m, m)).tocsc()

    fixed_idx = np.searchsorted(uniq, np.array(list(fixed_val)))
    is_fixed = np.zeros(m, dtype=bool)
    is_fixed[fixed_idx] = True
    free = np.flatnonzero(~is_fixed)
    # excitation matrix: one column per driven input
    vx = np.zeros((m, rows))
    for i, node in enumerate(src):
        vx[inv[node], i] = 1.0

    v = vx.copy()
    if free.size:
        lff = lap[free][:, free].tocsc()
        rhs = -(lap[free][:, np.flatnonzero(is_fixed)] @ vx[is_fixed])
        try:
            lu = splu(lff)
        except RuntimeError as exc:
            raise SolverError(f"parasitic nodal system is singular: {exc}") from exc
        v[free] = lu.solve(np.asarray(rhs))
    if not np.all(np.isfinite(v)):
        raise SolverError("parasitic solve produced non-finite voltages")

    node_v = v[inv]  # (n_all, rows)
    vr = node_v[rid.ravel()].reshape(rows, cols, rows)
    vc = node_v[cid.ravel()].reshape(rows, cols, rows)
    # KCL over column j's nodes: sense current = sum of device currents into it
    dev_i = g[:, :, None] * (vr - vc)  # (k, j, excitation)
    return dev_i.sum(axis=0).T


def apply_parasitics(grid: TileGrid) -> TileGrid:
    """Replace every tile/slice conductance matrix by its effective counterpart."""
    g = np.empty_like(grid.g)
    tr_n, tc_n, s_n = g.shape[:3]
    for tr in range(tr_n):
        for tc in range(tc_n):
            for s in range(s_n):
                g[tr, tc, s] = effective_conductance_parasitic(grid.g[tr, tc, s], grid.xbar)
    return grid.with_conductances(g)


# ---------------------------------------------------------------------------
# whole-network deployment
# ---------------------------------------------------------------------------

@dataclass
class LayerDeployment:
    name: str
    w_ideal: np.ndarray
    w_ni: np.ndarray
    grid: TileGrid


def deploy_layer(w: np.ndarray, device: DeviceSpec, quant: QuantSpec, xbar: XbarConfig,
                 noise: NoiseConfig, layer_id: int = 0) -> TileGrid:
    """quantize -> program -> drift -> read noise -> parasitics."""
    grid = map_layer(w, quant, device, xbar, layer_id)
    if noise.drift:
        grid = apply_drift(grid, noise.drift_t, noise.drift_t0, device.nu)
    if noise.read_noise:
        grid = apply_read_noise(grid, noise.seed, noise.clamp_nonneg)
    elif noise.clamp_nonneg:
        grid = grid.with_conductances(np.maximum(grid.g, 0.0))
    if noise.parasitics:
        grid = apply_parasitics(grid)
    return grid


def deploy_network(model, device: DeviceSpec, quant: QuantSpec, xbar: XbarConfig,
                   noise: NoiseConfig, act_quant: bool = True):
    """Copy ``model`` with every conv weight replaced by its crossbar read-back.

    BN and the fc classifier are left untouched. Returns
    ``(deployed_model, {conv_name: LayerDeployment})``.
    """
    conv = model.conv_names
    missing = [n for n in conv if n not in model.weights]
    if not conv or missing:
        raise KeyError(f"model lacks convolution weights {missing or '(none found)'}")
    out = model.copy()
    layers = {}
    for layer_id, name in enumerate(conv):
        w = model.weights[name]
        grid = deploy_layer(w, device, quant, xbar, noise, layer_id)
        w_ni = reconstruct_weights(grid)
        out.weights[name] = w_ni
        layers[name] = LayerDeployment(name, w, w_ni, grid)
    out.act_quant_bits = quant.act_bits if act_quant else None
    return out, layers
