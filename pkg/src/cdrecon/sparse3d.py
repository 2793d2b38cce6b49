"""Coordinate-sparse 3D voxel tensors and their differentiable ops.

A :class:`SparseTensor3D` pairs a sorted, unique set of integer voxel
coordinates with a (N, C) dense value tensor from :mod:`cdrecon.autodiff`, so
sparse ops reduce to gathers, scatters and row-wise matmuls on the dense
runtime. Convolutions are submanifold: output coordinates equal input
coordinates and each voxel aggregates only the neighbor offsets present in
the coordinate set.
"""

from __future__ import annotations

import numpy as np

from cdrecon import autodiff as ad
from cdrecon.errors import InvalidArgumentError

_PACK_OFF = 1 << 20  # coords must satisfy |c| < 2**20

# fixed offset ordering shared by conv kernels and their oracles
CONV_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)
CENTER_TAP = 13  # index of (0,0,0) in CONV_OFFSETS


def pack_coords(coords) -> np.ndarray:
    """Bijectively pack (N, 3) integer triples into sortable int64 keys."""
    c = np.asarray(coords, dtype=np.int64)
    if c.size and (np.abs(c) >= _PACK_OFF).any():
        raise InvalidArgumentError("voxel coordinate magnitude exceeds packing range")
    c = c + _PACK_OFF
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def unpack_coords(keys) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    x = (k >> 42) & (2**21 - 1)
    y = (k >> 21) & (2**21 - 1)
    z = k & (2**21 - 1)
    return np.stack([x, y, z], axis=1) - _PACK_OFF


class CoordSet:
    """Sorted unique voxel coordinates with O(log n) lookup and cached conv pairs."""

    def __init__(self, coords):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        keys = pack_coords(coords)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        dup = np.concatenate([[False], keys[1:] == keys[:-1]])
        self.keys = keys[~dup]
        self.coords = unpack_coords(self.keys)
        self._conv_pairs = None

    def __len__(self):
        return self.keys.shape[0]

    @property
    def n(self):
        return self.keys.shape[0]

    def lookup(self, coords) -> np.ndarray:
        """Row index of each query coordinate, or -1 when absent."""
        q = pack_coords(np.asarray(coords, dtype=np.int64).reshape(-1, 3))
        pos = np.searchsorted(self.keys, q)
        pos_c = np.minimum(pos, max(len(self.keys) - 1, 0))
        if len(self.keys) == 0:
            return np.full(q.shape[0], -1, dtype=np.int64)
        hit = self.keys[pos_c] == q
        return np.where(hit, pos_c, -1)

    def contains(self, coords) -> np.ndarray:
        return self.lookup(coords) >= 0

    def conv_pairs(self):
        """Per conv offset: (output rows, matching input rows) with both present."""
        if self._conv_pairs is None:
            pairs = []
            for off in CONV_OFFSETS:
                j = self.lookup(self.coords + off)
                present = j >= 0
                pairs.append((np.nonzero(present)[0], j[present]))
            self._conv_pairs = pairs
        return self._conv_pairs


class SparseTensor3D:
    """Per-voxel feature rows over a CoordSet at one coarse-to-fine stage."""

    def __init__(self, coordset: CoordSet, values: ad.Tensor, stage: int):
        if stage not in (2, 3, 4):
            raise InvalidArgumentError(f"stage must be 2, 3 or 4, got {stage}")
        if values.data.ndim != 2 or values.data.shape[0] != coordset.n:
            raise InvalidArgumentError(
                f"values rows {values.data.shape} do not match {coordset.n} coords"
            )
        self.coordset = coordset
        self.values = values
        self.stage = stage

    @property
    def coords(self):
        return self.coordset.coords

    @property
    def n(self):
        return self.coordset.n

    @property
    def channels(self):
        return self.values.data.shape[1]

    def with_values(self, values: ad.Tensor) -> "SparseTensor3D":
        return SparseTensor3D(self.coordset, values, self.stage)


def from_dense(block, stage: int = 2, origin=(0, 0, 0)) -> SparseTensor3D:
    """Wrap a dense (X, Y, Z) or (X, Y, Z, C) array as a fully occupied sparse tensor."""
    arr = np.asarray(block, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., None]
    nx, ny, nz, c = arr.shape
    grid = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1)
    coords = grid.reshape(-1, 3) + np.asarray(origin, dtype=np.int64)
    cs = CoordSet(coords)
    # CoordSet sorts; place values in sorted coordinate order
    order = cs.lookup(coords)
    vals = np.empty((cs.n, c), dtype=np.float64)
    vals[order] = arr.reshape(-1, c)
    return SparseTensor3D(cs, ad.Tensor(vals), stage)


def sparse_conv3d(sp: SparseTensor3D, kernel: ad.Tensor, bias: ad.Tensor | None = None) -> SparseTensor3D:
    """Submanifold 3x3x3 convolution; kernel shape (3, 3, 3, Cin, Cout)."""
    if sp.n == 0:
        raise InvalidArgumentError("sparse_conv3d requires nonempty input coords")
    if kernel.data.ndim != 5 or kernel.data.shape[:3] != (3, 3, 3):
        raise InvalidArgumentError("kernel must have shape (3,3,3,Cin,Cout)")
    cin, cout = kernel.data.shape[3:]
    if cin != sp.channels:
        raise InvalidArgumentError(f"channel mismatch: input {sp.channels} vs kernel {cin}")

    pairs = sp.coordset.conv_pairs()
    x = sp.values
    k2 = kernel.data.reshape(27, cin, cout)
    out = np.zeros((sp.n, cout), dtype=x.data.dtype)
    for o, (i_idx, j_idx) in enumerate(pairs):
        if len(i_idx):
            out[i_idx] += x.data[j_idx] @ k2[o]
    if bias is not None:
        out += bias.data

    def vjp_x(g):
        dx = np.zeros_like(x.data)
        for o, (i_idx, j_idx) in enumerate(pairs):
            if len(i_idx):
                dx[j_idx] += g[i_idx] @ k2[o].T
        return dx

    def vjp_k(g):
        dk = np.zeros((27, cin, cout), dtype=x.data.dtype)
        for o, (i_idx, j_idx) in enumerate(pairs):
            if len(i_idx):
                dk[o] = x.data[j_idx].T @ g[i_idx]
        return dk.reshape(kernel.data.shape)

    inputs = [x, kernel]
    vjps = [vjp_x, vjp_k]
    if bias is not None:
        inputs.append(bias)
        vjps.append(lambda g: g.sum(axis=0))
    vals = ad._make_output(out, tuple(inputs), tuple(vjps))
    return sp.with_values(vals)


def sparse_pointwise(sp: SparseTensor3D, w: ad.Tensor, b: ad.Tensor | None = None) -> SparseTensor3D:
    """Per-voxel linear map (1x1x1 convolution)."""
    return sp.with_values(ad.linear(sp.values, w, b))


def gru_cell(hidden: SparseTensor3D, x: SparseTensor3D, params: dict, prefix: str) -> SparseTensor3D:
    """Gated recurrent update over shared coords: h' = (1-z) h + z tanh(candidate).

    Gates are sigmoids of submanifold convolutions over [h, x]; the candidate
    convolves [r*h, x]. `params` supplies `{prefix}.wz/bz/wr/br/wc/bc`.
    """
    if hidden.coordset is not x.coordset and not np.array_equal(hidden.coords, x.coords):
        raise InvalidArgumentError("gru_cell requires hidden and input on identical coords")
    cat = ad.concat([hidden.values, x.values], axis=1)
    cat_sp = x.with_values(cat)
    z = ad.sigmoid(sparse_conv3d(cat_sp, params[f"{prefix}.wz"], params[f"{prefix}.bz"]).values)
    r = ad.sigmoid(sparse_conv3d(cat_sp, params[f"{prefix}.wr"], params[f"{prefix}.br"]).values)
    cat2 = ad.concat([ad.mul(r, hidden.values), x.values], axis=1)
    cand = ad.tanh(sparse_conv3d(x.with_values(cat2), params[f"{prefix}.wc"], params[f"{prefix}.bc"]).values)
    one_minus_z = ad.sub(ad.constant(np.ones_like(z.data)), z)
    h_new = ad.add(ad.mul(one_minus_z, hidden.values), ad.mul(z, cand))
    return x.with_values(h_new)


def trilinear_weights(points) -> np.ndarray:
    """The 8 corner weights for each sample point; rows sum to exactly 1."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    f = p - np.floor(p)
    w = np.empty((p.shape[0], 8))
    i = 0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                wx = f[:, 0] if dx else 1.0 - f[:, 0]
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                w[:, i] = wx * wy * wz
                i += 1
    return w


def trilinear_sample(volume, points) -> ad.Tensor:
    """Trilinearly interpolate per-voxel features at continuous grid coords.

    `volume` is a SparseTensor3D (or dense block via :func:`from_dense`
    upstream); `points` is a (M, 3) Tensor or array in grid units where
    integer coordinates are voxel centers. Absent corners contribute a zero
    feature while keeping their weight, so weights always sum to 1.
    Differentiable w.r.t. both the volume values and the points.
    """
    if not isinstance(volume, SparseTensor3D):
        volume = from_dense(volume)
    pts = points if isinstance(points, ad.Tensor) else ad.constant(points)
    p = pts.data
    if not np.isfinite(p).all():
        raise InvalidArgumentError("trilinear_sample requires finite points")
    base = np.floor(p).astype(np.int64)
    f = p - base
    vals = volume.values
    m = p.shape[0]
    c = volume.channels
    out = np.zeros((m, c), dtype=vals.data.dtype)
    corner_info = []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx = volume.coordset.lookup(base + np.array([dx, dy, dz]))
                present = idx >= 0
                wx = f[:, 0] if dx else 1.0 - f[:, 0]
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                w = wx * wy * wz
                safe = np.where(present, idx, 0)
                corner_v = vals.data[safe] * present[:, None]
                out += w[:, None] * corner_v
                corner_info.append((dx, dy, dz, safe, present, w, corner_v, wx, wy, wz))

    def vjp_vals(g):
        dv = np.zeros_like(vals.data)
        for dx, dy, dz, safe, present, w, _, _, _, _ in corner_info:
            np.add.at(dv, safe[present], (w[present, None] * g[present]))
        return dv

    def vjp_points(g):
        dp = np.zeros_like(p)
        for dx, dy, dz, safe, present, w, corner_v, wx, wy, wz in corner_info:
            gv = (g * corner_v).sum(axis=1)
            sx = 1.0 if dx else -1.0
            sy = 1.0 if dy else -1.0
            sz = 1.0 if dz else -1.0
            dp[:, 0] += gv * sx * wy * wz
            dp[:, 1] += gv * wx * sy * wz
            dp[:, 2] += gv * wx * wy * sz
        return dp

    return ad._make_output(out, (vals, pts), (vjp_vals, vjp_points))
