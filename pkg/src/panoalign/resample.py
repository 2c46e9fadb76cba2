"""Warping between equirectangular and cubemap domains.

Depth and label resampling is always nearest-neighbor (no mixing across
occlusions); intensity/color may be sampled bilinearly.  Horizontal access
wraps around the panorama seam, vertical access clamps at the poles.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry
from .geometry import CameraModel, check_erp_shape, erp_ray_grid


@dataclass
class CubemapFaces:
    """Six square per-face grids sharing one camera model.

    `faces` has shape (6, N, N) for scalar data or (6, N, N, 3) for normals.
    Face images are stored top-down; the projection's v coordinate relates to
    the row index by v = N - row.
    """

    faces: np.ndarray
    cam: CameraModel

    def __post_init__(self):
        n = self.cam.face_size
        if self.faces.shape[0] != 6 or self.faces.shape[1:3] != (n, n):
            raise ValueError(
                f"expected (6, {n}, {n}[, 3]) faces, got {self.faces.shape}"
            )


def face_ray_grid(cam: CameraModel, face: int) -> np.ndarray:
    """(N, N, 3) unit world rays at one face's pixel centers (top-down rows)."""
    n = cam.face_size
    f, c = cam.k[0, 0], cam.k[0, 2]
    u = (np.arange(n) + 0.5 - c) / f                # normalized x, per column
    v = (n - np.arange(n) - 0.5 - c) / f            # normalized y, per row
    xn, yn = np.meshgrid(u, v)
    d = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return d @ cam.rotations[face].T


def _sample_erp_nearest(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = grid.shape[:2]
    col = np.floor(x + 0.5).astype(np.int64) % w
    row = np.clip(np.floor(y + 0.5).astype(np.int64), 0, h - 1)
    return grid[row, col]


def _sample_erp_bilinear(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = grid.shape[:2]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    tx = x - x0
    ty = y - y0
    if grid.ndim == 3:
        tx = tx[..., None]
        ty = ty[..., None]
    c0 = x0 % w
    c1 = (x0 + 1) % w
    r0 = np.clip(y0, 0, h - 1)
    r1 = np.clip(y0 + 1, 0, h - 1)
    top = grid[r0, c0] * (1 - tx) + grid[r0, c1] * tx
    bot = grid[r1, c0] * (1 - tx) + grid[r1, c1] * tx
    return top * (1 - ty) + bot * ty


def erp_to_faces(erp: np.ndarray, cam: CameraModel, interp: str = "bilinear") -> CubemapFaces:
    """Render the six cubemap faces by sampling an ERP grid along face rays."""
    check_erp_shape(erp)
    if interp not in ("nearest", "bilinear"):
        raise ValueError(f"unknown interpolation {interp!r}")
    h, w = erp.shape[:2]
    sample = _sample_erp_nearest if interp == "nearest" else _sample_erp_bilinear
    out = []
    for face in range(6):
        rays = face_ray_grid(cam, face)
        theta, phi = geometry.ray_to_spherical(rays)
        x, y = geometry.spherical_to_erp_pixel(theta, phi, w, h)
        out.append(sample(erp, x, y))
    return CubemapFaces(faces=np.stack(out), cam=cam)


def _project_to_face(rays: np.ndarray, cam: CameraModel, face: int):
    """Rays -> (row, col, rho-at-sampled-center) on one face, nearest pixel."""
    n = cam.face_size
    f, c = cam.k[0, 0], cam.k[0, 2]
    d = rays @ cam.rotations[face]                   # R_c^T applied to rows
    u = f * d[..., 0] / d[..., 2] + c
    v = f * d[..., 1] / d[..., 2] + c
    col = np.clip(np.floor(u).astype(np.int64), 0, n - 1)
    row = np.clip(np.floor(n - v).astype(np.int64), 0, n - 1)
    uc = (col + 0.5 - c) / f
    vc = (n - row - 0.5 - c) / f
    rho = np.sqrt(uc * uc + vc * vc + 1.0)
    return row, col, rho


def merge_depth_to_erp(faces: CubemapFaces, cam: CameraModel,
                       erp_shape: tuple[int, int] | None = None):
    """Merge six perspective z-depth faces into one radial ERP depth map.

    Every ERP pixel is claimed by the face whose optical axis best aligns
    with its ray; the face depth is sampled nearest-neighbor and multiplied
    by the rho factor of the sampled pixel.  Non-finite or non-positive
    samples are flagged invalid (value replaced by 1.0).

    Returns:
        (depth, face_id, valid): float (H, W), int (H, W), bool (H, W).
    """
    if erp_shape is None:
        erp_shape = (2 * cam.face_size, 4 * cam.face_size)
    h, w = erp_shape
    if w != 2 * h:
        raise ValueError(f"ERP shape must be 2:1, got {w}x{h}")
    rays = erp_ray_grid(h, w)
    face_id = np.argmax(rays @ cam.forwards.T, axis=-1)
    depth = np.empty((h, w), dtype=float)
    for face in range(6):
        m = face_id == face
        row, col, rho = _project_to_face(rays[m], cam, face)
        depth[m] = rho * faces.faces[face][row, col]
    valid = np.isfinite(depth) & (depth > 0.0)
    depth[~valid] = 1.0
    return depth, face_id.astype(np.int32), valid


def face_rho_grid(cam: CameraModel) -> np.ndarray:
    """(N, N) rho factors at face pixel centers (shared by all six faces)."""
    n = cam.face_size
    f, c = cam.k[0, 0], cam.k[0, 2]
    u = (np.arange(n) + 0.5 - c) / f
    v = (n - np.arange(n) - 0.5 - c) / f
    xn, yn = np.meshgrid(u, v)
    return np.sqrt(xn * xn + yn * yn + 1.0)


def merge_normals_to_erp(faces: CubemapFaces, cam: CameraModel,
                         face_id: np.ndarray, flip: bool = False,
                         frame: str = "camera") -> np.ndarray:
    """Merge per-face normal maps into one world-frame ERP map.

    Normals are sampled nearest-neighbor from the face owning each pixel,
    rotated into the world frame (n = R_c @ n_face, skipped for
    frame="world") and renormalized.  `flip` negates the result for
    predictors using the opposite orientation convention.
    """
    if frame not in ("camera", "world"):
        raise ValueError(f"unknown normal frame {frame!r}")
    h, w = face_id.shape
    if w != 2 * h:
        raise ValueError("face_id map must be 2:1 equirectangular")
    rays = erp_ray_grid(h, w)
    out = np.empty((h, w, 3), dtype=float)
    for face in range(6):
        m = face_id == face
        row, col, _ = _project_to_face(rays[m], cam, face)
        sampled = faces.faces[face][row, col]
        out[m] = sampled @ cam.rotations[face].T if frame == "camera" else sampled
    norm = np.linalg.norm(out, axis=-1, keepdims=True)
    np.divide(out, norm, out=out, where=norm > 1e-300)
    if flip:
        out = -out
    return out


def expand_scale_map(lambda_c: np.ndarray, face_id: np.ndarray) -> np.ndarray:
    """Expand six per-face scalars into a per-pixel ERP scale map."""
    lam = np.asarray(lambda_c, dtype=float)
    if lam.shape != (6,):
        raise ValueError(f"expected 6 scale factors, got shape {lam.shape}")
    if not (np.isfinite(lam).all() and (lam > 0).all()):
        raise ValueError("scale factors must be finite and positive")
    return lam[face_id]


def _halve(grid: np.ndarray, kind: str) -> np.ndarray:
    h2, w2 = grid.shape[0] // 2, grid.shape[1] // 2
    g = grid[: 2 * h2, : 2 * w2]
    if kind == "label":
        return g[::2, ::2]
    if kind == "mask":
        return g.reshape(h2, 2, w2, 2).all(axis=(1, 3))
    if grid.ndim == 3:
        out = g.reshape(h2, 2, w2, 2, grid.shape[2]).mean(axis=(1, 3))
    else:
        out = g.reshape(h2, 2, w2, 2).mean(axis=(1, 3))
    if kind == "normals":
        norm = np.linalg.norm(out, axis=-1, keepdims=True)
        np.divide(out, norm, out=out, where=norm > 1e-300)
    return out


def downsample(erp: np.ndarray, factor: int, kind: str = "average") -> np.ndarray:
    """Downsample by a power-of-two factor with a 2x2 box filter per octave.

    kind: "average" (depth/intensity), "normals" (average + renormalize),
    "mask" (AND-reduce), or "label" (stride subsampling).
    Output dimensions are floor(h / factor) x floor(w / factor).
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two, got {factor}")
    if kind not in ("average", "normals", "mask", "label"):
        raise ValueError(f"unknown downsample kind {kind!r}")
    out = np.asarray(erp)
    while factor > 1:
        out = _halve(out, kind)
        factor //= 2
    return out.copy() if out is erp else out


def upsample(erp: np.ndarray, shape: tuple[int, int], kind: str = "average") -> np.ndarray:
    """Bilinear upsampling to `shape`, wrapping horizontally, clamping at poles."""
    hs, ws = erp.shape[:2]
    ht, wt = shape
    if ht < hs or wt < ws:
        raise ValueError(f"target {shape} smaller than source {(hs, ws)}")
    x = (np.arange(wt) + 0.5) * (ws / wt) - 0.5
    y = (np.arange(ht) + 0.5) * (hs / ht) - 0.5
    xg, yg = np.meshgrid(x, np.clip(y, 0.0, hs - 1.0))
    out = _sample_erp_bilinear(np.asarray(erp, dtype=float), xg, yg)
    if kind == "normals":
        norm = np.linalg.norm(out, axis=-1, keepdims=True)
        np.divide(out, norm, out=out, where=norm > 1e-300)
    return out
