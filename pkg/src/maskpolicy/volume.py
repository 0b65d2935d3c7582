"""3D volumes, anisotropic patch partitioning, synthetic phantoms, and file I/O.

Volumes are dense voxel grids indexed (z, y, x) with an optional trailing
channel axis. The depth axis is the anisotropic one: a patch of size P covers
P/4 voxels along z and P voxels along y and x. All in-memory math is float64;
the on-disk format stores float32 (intensities) or uint32 (labels).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Volume3D:
    """Dense scalar volume, shape (D, H, W, C), float64."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be 3D or 4D, got ndim={self.data.ndim}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


@dataclass
class LabelVolume:
    """Instance labels, shape (D, H, W), non-negative integers; 0 = background."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"label data must be 3D, got ndim={self.data.ndim}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"labels must be integers, got dtype={self.data.dtype}")
        if self.data.min(initial=0) < 0:
            raise ValueError("labels must be non-negative")
        self.data = self.data.astype(np.int64)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def ids(self) -> np.ndarray:
        """Distinct nonzero label IDs, sorted."""
        u = np.unique(self.data)
        return u[u > 0]


@dataclass
class PatchGrid:
    """Partition of a (D, H, W, C) volume into patches of shape (P/4, P, P).

    `origins[i]` is the (z, y, x) corner of patch i. The canonical ordering is
    row-major over patch coordinates with z slowest; a grid with permuted
    origins still round-trips through :func:`unpatchify`.
    """

    vol_shape: tuple[int, int, int]
    channels: int
    patch_size: int
    origins: np.ndarray = field(default=None)

    def __post_init__(self):
        _check_divisibility(self.vol_shape, self.patch_size)
        if self.origins is None:
            self.origins = _canonical_origins(self.vol_shape, self.patch_size)
        self.origins = np.asarray(self.origins, dtype=np.int64)

    @property
    def patch_shape(self) -> tuple[int, int, int]:
        p = self.patch_size
        return (p // 4, p, p)

    @property
    def num_patches(self) -> int:
        return len(self.origins)

    @property
    def patch_dim(self) -> int:
        """Flattened patch length, (P^3 / 4) * C."""
        pd, ph, pw = self.patch_shape
        return pd * ph * pw * self.channels

    def permuted(self, order: np.ndarray) -> "PatchGrid":
        return PatchGrid(self.vol_shape, self.channels, self.patch_size,
                         origins=self.origins[order])


def _check_divisibility(shape: tuple[int, int, int], patch_size: int) -> None:
    d, h, w = shape
    p = patch_size
    if p % 4 != 0:
        raise ValueError(f"patch size P={p} violates P % 4 == 0")
    if d % (p // 4) != 0:
        raise ValueError(f"depth D={d} violates D % (P/4) == 0 for P={p}")
    if h % p != 0:
        raise ValueError(f"height H={h} violates H % P == 0 for P={p}")
    if w % p != 0:
        raise ValueError(f"width W={w} violates W % P == 0 for P={p}")


def _canonical_origins(shape: tuple[int, int, int], patch_size: int) -> np.ndarray:
    d, h, w = shape
    pd, ph, pw = patch_size // 4, patch_size, patch_size
    zs, ys, xs = np.meshgrid(np.arange(0, d, pd), np.arange(0, h, ph),
                             np.arange(0, w, pw), indexing="ij")
    return np.stack([zs.ravel(), ys.ravel(), xs.ravel()], axis=1)


def patchify(vol: Volume3D, patch_size: int) -> tuple[np.ndarray, PatchGrid]:
    """Cut a volume into N flattened patches of shape (P/4, P, P, C).

    Returns (patches, grid) where patches has shape (N, (P^3/4)*C) and rows
    follow the grid's canonical z-slowest row-major order. Raises ValueError
    naming the violated divisibility constraint for illegal (shape, P).
    """
    grid = PatchGrid(vol.shape, vol.channels, patch_size)
    pd, ph, pw = grid.patch_shape
    d, h, w = vol.shape
    c = vol.channels
    arr = vol.data.reshape(d // pd, pd, h // ph, ph, w // pw, pw, c)
    arr = arr.transpose(0, 2, 4, 1, 3, 5, 6)
    patches = arr.reshape(grid.num_patches, grid.patch_dim)
    return np.ascontiguousarray(patches), grid


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> Volume3D:
    """Exact inverse of :func:`patchify` for the given grid.

    Honors the grid's origin map, so a permuted patch sequence paired with the
    correspondingly permuted grid reassembles the same volume.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] != grid.num_patches:
        raise ValueError(f"expected {grid.num_patches} patches, got {patches.shape}")
    if patches.shape[1] != grid.patch_dim:
        raise ValueError(
            f"patch length {patches.shape[1]} does not match grid patch_dim {grid.patch_dim}")
    pd, ph, pw = grid.patch_shape
    c = grid.channels
    out = np.empty(grid.vol_shape + (c,), dtype=np.float64)
    for i, (z, y, x) in enumerate(grid.origins):
        out[z:z + pd, y:y + ph, x:x + pw, :] = patches[i].reshape(pd, ph, pw, c)
    return Volume3D(out)


def gen_phantom(
    seed: int,
    shape: tuple[int, int, int],
    num_objects: int,
    noise_sigma: float,
    *,
    radius_range: tuple[float, float] = (3.0, 5.0),
    membrane_width: int = 1,
    background: float = 0.55,
    membrane_intensity: float = 0.08,
    interior_range: tuple[float, float] = (0.72, 0.9),
    max_attempts: int = 25,
) -> tuple[Volume3D, LabelVolume]:
    """Render a synthetic EM-like phantom: tubular objects with dark membranes.

    Each object is a wiggly tube of random radius; voxels take the label of
    the nearest tube that covers them. A dark membrane shell is carved along
    every boundary (object/object and object/background) and, as in the usual
    connectomics convention, membrane voxels belong to no body: their label is
    0, so low intensity implies zero affinity everywhere. Additive Gaussian
    noise of std `noise_sigma` is clipped back into [0, 1].

    Deterministic for a fixed argument tuple. Each returned label forms a
    single 6-connected component (geometry is redrawn, then pruned to the
    largest component if an object gets severed); raises RuntimeError if that
    cannot be achieved within `max_attempts` redraws.
    """
    if num_objects < 1:
        raise ValueError("num_objects must be >= 1")
    rng = np.random.default_rng(seed)
    d, h, w = shape
    zz, yy, xx = np.meshgrid(np.arange(d, dtype=np.float64),
                             np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)

    labels = membrane = None
    for _ in range(max_attempts):
        cand = _render_tubes(rng, shape, coords, num_objects, radius_range)
        shell = _boundary_shell(cand, membrane_width)
        cand = np.where(shell, 0, cand)
        cand = _prune_to_largest_component(cand)
        if len(np.unique(cand)) - (1 if (cand == 0).any() else 0) == num_objects:
            labels, membrane = cand, shell
            break
    if labels is None:
        raise RuntimeError(
            f"could not place {num_objects} connected objects in shape {shape}")

    intensity = np.full(shape, background, dtype=np.float64)
    brightness = rng.uniform(*interior_range, size=num_objects)
    for k in range(num_objects):
        intensity[labels == k + 1] = brightness[k]
    intensity[membrane] = membrane_intensity

    if noise_sigma > 0:
        intensity = intensity + rng.normal(0.0, noise_sigma, size=shape)
    intensity = np.clip(intensity, 0.0, 1.0)
    return Volume3D(intensity), LabelVolume(labels)


def _render_tubes(rng, shape, coords, num_objects, radius_range) -> np.ndarray:
    d, h, w = shape
    n_vox = coords.shape[0]
    best_dist = np.full(n_vox, np.inf)
    best_label = np.zeros(n_vox, dtype=np.int64)
    for k in range(num_objects):
        radius = rng.uniform(*radius_range)
        start = rng.uniform([0, 0, 0], [d, h, w])
        direction = rng.normal(size=3)
        direction[0] *= 0.6  # tubes run mostly in-plane, matching coarse z
        direction /= np.linalg.norm(direction)
        length = 1.5 * max(d, h, w)
        t = np.linspace(-length / 2, length / 2, max(8, int(length)))
        wiggle_axis = np.cross(direction, rng.normal(size=3))
        wiggle_axis /= np.linalg.norm(wiggle_axis) + 1e-12
        amp = rng.uniform(0.5, 1.5) * radius
        freq = rng.uniform(0.05, 0.15)
        phase = rng.uniform(0, 2 * np.pi)
        samples = (start[None, :] + t[:, None] * direction[None, :]
                   + (amp * np.sin(freq * t + phase))[:, None] * wiggle_axis[None, :])
        # min distance from every voxel to the sampled centerline
        dist = np.min(np.linalg.norm(coords[:, None, :] - samples[None, :, :], axis=2),
                      axis=1)
        inside = dist < radius
        closer = inside & (dist < best_dist)
        best_dist[closer] = dist[closer]
        best_label[closer] = k + 1
    return best_label.reshape(shape)


def _prune_to_largest_component(labels: np.ndarray) -> np.ndarray:
    """Keep only the largest 6-connected component of each nonzero label."""
    out = np.zeros_like(labels)
    for lab in np.unique(labels):
        if lab == 0:
            continue
        comp = _connected_components_6(labels == lab)
        if comp.max() == 0:
            continue
        sizes = np.bincount(comp.ravel())
        sizes[0] = 0
        out[comp == sizes.argmax()] = lab
    return out


def _connected_components_6(mask: np.ndarray) -> np.ndarray:
    """Label 6-connected components of a boolean volume (0 outside the mask)."""
    comp = np.zeros(mask.shape, dtype=np.int64)
    next_id = 0
    stack: list[tuple[int, int, int]] = []
    d, h, w = mask.shape
    for start in zip(*np.nonzero(mask)):
        if comp[start]:
            continue
        next_id += 1
        comp[start] = next_id
        stack.append(start)
        while stack:
            z, y, x = stack.pop()
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                               (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                nz, ny, nx = z + dz, y + dy, x + dx
                if 0 <= nz < d and 0 <= ny < h and 0 <= nx < w \
                        and mask[nz, ny, nx] and not comp[nz, ny, nx]:
                    comp[nz, ny, nx] = next_id
                    stack.append((nz, ny, nx))
    return comp


def _boundary_shell(labels: np.ndarray, width: int) -> np.ndarray:
    """Voxels of a nonzero label within `width` steps of a different label."""
    boundary = np.zeros(labels.shape, dtype=bool)
    for axis in range(3):
        a = np.take(labels, np.arange(labels.shape[axis] - 1), axis=axis)
        b = np.take(labels, np.arange(1, labels.shape[axis]), axis=axis)
        diff = a != b
        pad_lo = [(0, 0)] * 3
        pad_lo[axis] = (0, 1)
        pad_hi = [(0, 0)] * 3
        pad_hi[axis] = (1, 0)
        boundary |= np.pad(diff, pad_lo)
        boundary |= np.pad(diff, pad_hi)
    shell = boundary
    for _ in range(width - 1):
        grown = shell.copy()
        for axis in range(3):
            grown |= np.roll(shell, 1, axis=axis)
            grown |= np.roll(shell, -1, axis=axis)
        shell = grown
    return shell & (labels > 0)


# --- file I/O: <name>.vol raw payload + <name>.json sidecar -----------------

_DTYPES = {"f32": np.dtype("<f4"), "u32": np.dtype("<u4")}


def write_volume(vol: Volume3D | LabelVolume, path: str | Path, *,
                 kind: str | None = None) -> None:
    """Write a `.vol` payload plus its JSON sidecar.

    Intensity/affinity volumes are stored as little-endian float32 in z, y, x,
    channel order; label volumes as uint32. `kind` defaults to "labels" for
    LabelVolume and "intensity" otherwise ("affinity" must be set explicitly).
    """
    path = Path(path)
    if isinstance(vol, LabelVolume):
        payload = vol.data.astype("<u4")
        meta = {"dtype": "u32", "shape": list(vol.shape), "channels": 1,
                "kind": kind or "labels"}
    else:
        payload = vol.data.astype("<f4")
        meta = {"dtype": "f32", "shape": list(vol.shape), "channels": vol.channels,
                "kind": kind or "intensity"}
    path.write_bytes(payload.tobytes())
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))


def read_volume(path: str | Path) -> Volume3D | LabelVolume:
    """Read a `.vol` file; the sidecar decides the dtype, shape, and kind."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    dtype = _DTYPES[meta["dtype"]]
    shape = tuple(meta["shape"])
    channels = int(meta.get("channels", 1))
    raw = np.frombuffer(path.read_bytes(), dtype=dtype)
    expected = int(np.prod(shape)) * channels
    if raw.size != expected:
        raise ValueError(
            f"{path}: payload holds {raw.size} values but sidecar declares {expected}")
    if meta["kind"] == "labels":
        return LabelVolume(raw.reshape(shape).astype(np.int64))
    data = raw.reshape(shape + (channels,)).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{path}: payload contains non-finite values")
    return Volume3D(data)
