"""Spherical / perspective coordinate math for equirectangular panoramas.

Conventions used throughout the package:

* World frame: x right, y up, z forward (right-handed).
* Spherical coordinates: azimuth theta in [-pi, pi] (0 = +z, pi/2 = +x),
  elevation phi in [-pi/2, pi/2] (pi/2 = +y zenith).
* ERP layout: row 0 is the zenith edge, pixel centers at +0.5, so
  theta = ((u + 0.5)/W - 0.5) * 2*pi and phi = (0.5 - (v + 0.5)/H) * pi.
* Cubemap faces are 90-degree pinhole cameras sharing one intrinsic matrix
  K (focal length and principal point both equal to half the face size).
  Face order is fixed: front, right, back, left, up, down.
* Face pixel coordinates (u, v) are the perspective projection K @ R_c^T @ S;
  v increases toward the scene's "up" of that face.  Face images are stored
  top-down (row 0 = top of the view), i.e. row = face_size - v.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateRay, InvalidDepth

FACE_NAMES = ("front", "right", "back", "left", "up", "down")

# Per-face (right, up, forward) axes in the world frame; columns of R_c.
_FACE_AXES = (
    ((1, 0, 0), (0, 1, 0), (0, 0, 1)),     # front: +z
    ((0, 0, -1), (0, 1, 0), (1, 0, 0)),    # right: +x
    ((-1, 0, 0), (0, 1, 0), (0, 0, -1)),   # back: -z
    ((0, 0, 1), (0, 1, 0), (-1, 0, 0)),    # left: -x
    ((1, 0, 0), (0, 0, -1), (0, 1, 0)),    # up: +y
    ((1, 0, 0), (0, 0, 1), (0, -1, 0)),    # down: -y
)


@dataclass(frozen=True)
class CameraModel:
    """Shared cubemap intrinsics plus the six per-face rotations."""

    k: np.ndarray           # (3, 3) intrinsic matrix
    rotations: np.ndarray   # (6, 3, 3), world_dir = R_c @ cam_dir
    face_size: int

    @classmethod
    def cube(cls, face_size: int) -> "CameraModel":
        """Canonical axis-aligned six-face model for a given face resolution."""
        if face_size < 2:
            raise ValueError(f"face_size must be >= 2, got {face_size}")
        f = face_size / 2.0
        k = np.array([[f, 0.0, f], [0.0, f, f], [0.0, 0.0, 1.0]])
        rot = np.stack([np.stack(axes, axis=1).astype(float) for axes in _FACE_AXES])
        return cls(k=k, rotations=rot, face_size=int(face_size))

    def validate(self, tol: float = 1e-9) -> None:
        """Check orthonormality / det(+1) of rotations and the K layout."""
        k = self.k
        f = self.face_size / 2.0
        if k.shape != (3, 3) or k[1, 0] or k[2, 0] or k[2, 1]:
            raise ValueError("K must be upper triangular")
        if not (k[0, 0] == k[1, 1] == k[0, 2] == k[1, 2] == f and k[2, 2] == 1.0):
            raise ValueError("K must have focal and principal point at face_size/2")
        for c, r in enumerate(self.rotations):
            if not np.allclose(r @ r.T, np.eye(3), atol=tol):
                raise ValueError(f"rotation {c} is not orthonormal")
            if abs(np.linalg.det(r) - 1.0) > tol:
                raise ValueError(f"rotation {c} must have determinant +1")

    @property
    def forwards(self) -> np.ndarray:
        """(6, 3) optical-axis directions, one per face."""
        return self.rotations[:, :, 2]


@dataclass
class PointCloud:
    points: np.ndarray               # (N, 3) float, meters
    colors: np.ndarray | None = None  # (N, 3) uint8

    def __len__(self) -> int:
        return len(self.points)


def erp_pixel_to_spherical(u, v, width: int, height: int):
    """Fractional ERP pixel coordinates -> (theta, phi). Pixel centers at +0.5."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    theta = ((u + 0.5) / width - 0.5) * (2.0 * np.pi)
    phi = (0.5 - (v + 0.5) / height) * np.pi
    return theta, phi


def spherical_to_erp_pixel(theta, phi, width: int, height: int):
    """Inverse of erp_pixel_to_spherical (no wrapping applied)."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    u = (theta / (2.0 * np.pi) + 0.5) * width - 0.5
    v = (0.5 - phi / np.pi) * height - 0.5
    return u, v


def spherical_to_ray(theta, phi) -> np.ndarray:
    """(theta, phi) -> unit direction (..., 3)."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    cos_phi = np.cos(phi)
    return np.stack(
        [np.sin(theta) * cos_phi, np.sin(phi), np.cos(theta) * cos_phi], axis=-1
    )


def ray_to_spherical(s) -> tuple[np.ndarray, np.ndarray]:
    """Unit direction (..., 3) -> (theta, phi)."""
    s = np.asarray(s, dtype=float)
    theta = np.arctan2(s[..., 0], s[..., 2])
    phi = np.arcsin(np.clip(s[..., 1], -1.0, 1.0))
    return theta, phi


def ray_to_face_pixel(s, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Assign rays to cubemap faces and project to face pixel coordinates.

    The face is the one whose optical axis has the largest dot product with
    the ray (ties broken by the lowest face index).  Pixels returned are the
    raw perspective projection; for rays strictly inside a face cone they lie
    in (0, face_size)^2, boundary rays land on the closed boundary.

    Args:
        s: (..., 3) unit rays.
        cam: camera model.

    Returns:
        (face, pix): int array (...,) and float array (..., 2).
    """
    s = np.asarray(s, dtype=float)
    dots = s @ cam.forwards.T                      # (..., 6)
    face = np.argmax(dots, axis=-1)
    rsel = cam.rotations[face]                     # (..., 3, 3)
    d = np.einsum("...i,...ij->...j", s, rsel)     # R_c^T @ S
    z = d[..., 2]
    if np.any(z <= 0.0):
        raise DegenerateRay("selected face sees the ray at non-positive depth")
    f, c = cam.k[0, 0], cam.k[0, 2]
    pix = np.stack([f * d[..., 0] / z + c, f * d[..., 1] / z + c], axis=-1)
    return face, pix


def rho_factor(pix, cam: CameraModel) -> np.ndarray:
    """Per-pixel factor converting perspective z-depth to radial distance.

    rho = || K^-1 @ (u, v, 1) ||, always >= 1 with equality only at the
    principal point.
    """
    pix = np.asarray(pix, dtype=float)
    f, c = cam.k[0, 0], cam.k[0, 2]
    xn = (pix[..., 0] - c) / f
    yn = (pix[..., 1] - c) / f
    return np.sqrt(xn * xn + yn * yn + 1.0)


@lru_cache(maxsize=16)
def _ray_grid_cached(height: int, width: int) -> np.ndarray:
    v, u = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    theta, phi = erp_pixel_to_spherical(u, v, width, height)
    rays = spherical_to_ray(theta, phi)
    rays.setflags(write=False)
    return rays


def erp_ray_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 3) unit rays at ERP pixel centers. Cached and read-only."""
    return _ray_grid_cached(int(height), int(width))


def check_erp_shape(grid: np.ndarray, channels: int | None = None) -> None:
    """Enforce the 2:1 equirectangular aspect and optional channel count."""
    if grid.ndim not in (2, 3):
        raise ValueError(f"expected 2D or 3D grid, got shape {grid.shape}")
    h, w = grid.shape[:2]
    if w != 2 * h:
        raise ValueError(f"ERP grid must have width == 2*height, got {w}x{h}")
    if channels is not None:
        got = 1 if grid.ndim == 2 else grid.shape[2]
        if got != channels:
            raise ValueError(f"expected {channels} channel(s), got {got}")


def lift_points(depth: np.ndarray, mask: np.ndarray | None = None,
                colors: np.ndarray | None = None) -> PointCloud:
    """Lift an ERP radial-depth grid to a 3D point cloud (P = D * S).

    Pixels where `mask` is False are excluded.  Non-finite or non-positive
    depths that are not masked out raise InvalidDepth.
    """
    depth = np.asarray(depth, dtype=float)
    check_erp_shape(depth, channels=1)
    h, w = depth.shape
    ok = np.isfinite(depth) & (depth > 0.0)
    if mask is None:
        if not ok.all():
            raise InvalidDepth("depth grid contains non-finite or non-positive pixels")
        keep = np.ones((h, w), dtype=bool)
    else:
        keep = np.asarray(mask, dtype=bool)
        if not ok[keep].all():
            raise InvalidDepth("unmasked depth pixels are non-finite or non-positive")
    pts = (depth[..., None] * erp_ray_grid(h, w))[keep]
    col = None
    if colors is not None:
        col = np.asarray(colors).reshape(h, w, -1)[keep]
    return PointCloud(points=pts, colors=col)


# Cyclic 8-neighborhood (drow, dcol): E, NE, N, NW, W, SW, S, SE.
_NEIGHBORS_8 = ((0, 1), (-1, 1), (-1, 0), (-1, -1),
                (0, -1), (1, -1), (1, 0), (1, 1))


def normals_from_depth(depth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel surface normals from a radial ERP depth map.

    Each pixel's normal is the (area-weighted) average of the eight triangle
    normals formed with consecutive pairs of its 8-neighbors' lifted 3D
    points, unit-normalized and oriented toward the camera (n . S < 0).
    Horizontal neighbors wrap around the seam; vertical access clamps at the
    poles (degenerate triangles there contribute nothing).

    Returns:
        (normals, valid): (H, W, 3) unit normals and a bool map which is
        False where every triangle degenerated; those pixels get the
        ray-opposite direction instead.
    """
    depth = np.asarray(depth, dtype=float)
    check_erp_shape(depth, channels=1)
    h, w = depth.shape
    rays = erp_ray_grid(h, w)
    pts = depth[..., None] * rays

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    edges = []
    for dr, dc in _NEIGHBORS_8:
        r = np.clip(rows + dr, 0, h - 1)
        c = (cols + dc) % w
        edges.append(pts[r, c] - pts)
    acc = np.zeros_like(pts)
    for k in range(8):
        acc += np.cross(edges[k], edges[(k + 1) % 8])

    norm = np.linalg.norm(acc, axis=-1)
    valid = norm > 1e-300
    out = np.where(valid[..., None], acc / np.where(valid, norm, 1.0)[..., None], -rays)
    flip = np.sum(out * rays, axis=-1) > 0.0
    out[flip] = -out[flip]
    return out, valid
