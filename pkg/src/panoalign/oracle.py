"""Synthetic ground truth and independent brute-force checkers.

Analytic scenes (axis-aligned box room, sphere shell) provide exact
radial depth and camera-facing normals per ERP pixel, per-face corruption
reproduces the inconsistent-scale regime the optimizer is built to fix,
and a central-difference oracle validates the analytic gradients.

Noise uses the Philox counter-based generator so every artifact is
reproducible from (seed, attempt) alone.
"""

from dataclasses import dataclass

import numpy as np

from . import graphopt, resample
from .geometry import CameraModel, erp_ray_grid
from .graphopt import OptConfig, OptState
from .resample import CubemapFaces, face_ray_grid

PRNG_NAME = "philox"

# Six distinguishable gray levels, one per box wall, so the bilateral
# weights see texture boundaries exactly at the plane creases.
_WALL_ALBEDO = np.linspace(0.15, 0.9, 6)
_SPHERE_ALBEDO = 0.55


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SceneSpec:
    kind: str                      # "box" | "sphere"
    size: tuple                    # box half-extents (ax, ay, az) or (radius,)
    camera: tuple = (0.0, 0.0, 0.0)
    height: int = 128
    width: int = 256

    def __post_init__(self):
        if self.kind not in ("box", "sphere"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.width != 2 * self.height:
            raise ValueError("ERP size must be 2:1")
        cam = np.asarray(self.camera, dtype=float)
        if self.kind == "box":
            ext = np.asarray(self.size, dtype=float)
            if ext.shape != (3,) or (ext <= 0).any():
                raise ValueError("box size must be three positive half-extents")
            if (np.abs(cam) >= ext).any():
                raise ValueError("camera must be strictly inside the box")
        else:
            if len(self.size) != 1 or self.size[0] <= 0:
                raise ValueError("sphere size must be (radius,)")
            if np.linalg.norm(cam) >= self.size[0]:
                raise ValueError("camera must be strictly inside the sphere")


@dataclass
class RenderedScene:
    depth: np.ndarray       # (H, W) radial meters
    normals: np.ndarray     # (H, W, 3), camera-facing
    intensity: np.ndarray   # (H, W) in [0, 1]
    spec: SceneSpec


@dataclass(frozen=True)
class Corruption:
    """Per-face multiplicative depth scales plus optional noise."""

    scales: tuple = (1.0,) * 6
    normal_noise_deg: float = 0.0   # std of Gaussian angular jitter
    depth_noise: float = 0.0        # relative sigma of Gaussian depth jitter

    def __post_init__(self):
        s = np.asarray(self.scales, dtype=float)
        if s.shape != (6,):
            raise ValueError("need exactly six per-face scales")
        if (s < 0.5).any() or (s > 2.0).any():
            raise ValueError("per-face scales must lie in [0.5, 2.0]")
        if self.normal_noise_deg < 0 or self.depth_noise < 0:
            raise ValueError("noise parameters must be non-negative")


def _intersect(spec: SceneSpec, rays: np.ndarray):
    """Radial hit distance, camera-facing unit normal and wall id per ray."""
    cam = np.asarray(spec.camera, dtype=float)
    if spec.kind == "sphere":
        r = float(spec.size[0])
        b = rays @ cam
        t = -b + np.sqrt(b * b + r * r - cam @ cam)
        hit = cam + t[..., None] * rays
        normals = -hit / r
        wall = np.zeros(t.shape, dtype=np.int64)
        return t, normals, wall

    ext = np.asarray(spec.size, dtype=float)
    sign = np.where(rays >= 0.0, 1.0, -1.0)
    with np.errstate(divide="ignore"):
        t_axis = (sign * ext - cam) / rays
    t_axis = np.where(rays == 0.0, np.inf, t_axis)
    axis = np.argmin(t_axis, axis=-1)
    t = np.take_along_axis(t_axis, axis[..., None], axis=-1)[..., 0]
    hit_sign = np.take_along_axis(sign, axis[..., None], axis=-1)[..., 0]
    normals = np.zeros(rays.shape)
    idx = np.meshgrid(*[np.arange(n) for n in rays.shape[:-1]], indexing="ij")
    normals[(*idx, axis)] = -hit_sign
    wall = axis * 2 + (hit_sign < 0).astype(np.int64)
    return t, normals, wall


def render_scene(spec: SceneSpec) -> RenderedScene:
    """Exact radial depth / normals / per-wall albedo at every ERP pixel."""
    rays = erp_ray_grid(spec.height, spec.width)
    t, normals, wall = _intersect(spec, rays)
    if spec.kind == "sphere":
        intensity = np.full(t.shape, _SPHERE_ALBEDO)
    else:
        intensity = _WALL_ALBEDO[wall]
    return RenderedScene(depth=t, normals=normals, intensity=intensity, spec=spec)


def render_faces(spec: SceneSpec, cam: CameraModel):
    """Analytic per-face perspective z-depth and face-frame normals.

    z-depth is the radial distance divided by the per-pixel rho factor,
    i.e. what a pinhole depth model would output for that face.
    """
    n = cam.face_size
    depth = np.empty((6, n, n))
    normals = np.empty((6, n, n, 3))
    for face in range(6):
        rays = face_ray_grid(cam, face)
        t, nrm, _ = _intersect(spec, rays)
        depth[face] = t * (rays @ cam.rotations[face][:, 2])
        normals[face] = nrm @ cam.rotations[face]
    return depth, normals


def corrupt(scene: RenderedScene, cam: CameraModel, corruption: Corruption,
            seed: int = 0) -> tuple[CubemapFaces, CubemapFaces]:
    """Per-face predictions with controlled scale inconsistency and noise.

    Renders each face analytically from the scene, multiplies face c's
    z-depth by scales[c], then applies seeded Gaussian depth jitter and
    angular normal jitter.
    """
    depth, normals = render_faces(scene.spec, cam)
    depth = depth * np.asarray(corruption.scales, dtype=float)[:, None, None]
    rng = make_rng(seed)
    if corruption.depth_noise > 0.0:
        jitter = 1.0 + corruption.depth_noise * rng.standard_normal(depth.shape)
        depth = np.maximum(depth * jitter, 1e-6)
    if corruption.normal_noise_deg > 0.0:
        angle = np.deg2rad(corruption.normal_noise_deg) * rng.standard_normal(depth.shape)
        g = rng.standard_normal(normals.shape)
        g -= np.sum(g * normals, axis=-1, keepdims=True) * normals
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
        axis = np.divide(g, norm, out=np.zeros_like(g), where=norm > 1e-12)
        normals = (normals * np.cos(angle)[..., None]
                   + np.cross(axis, normals) * np.sin(angle)[..., None])
        normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return (CubemapFaces(faces=depth, cam=cam),
            CubemapFaces(faces=normals, cam=cam))


@dataclass
class GradcheckInstance:
    """A small random optimization problem conditioned for finite differences.

    Two hazards make naive random instances untestable at h=1e-4: residuals
    sitting inside the smoothed-|x| curvature zone (central differences pick
    up the large third derivative there) and accidentally tiny gradient
    entries (any truncation bias is huge against the 1e-6 denominator
    floor).  The generator therefore drops graph edges / mask pixels whose
    residuals land near a kink and redraws until every remaining gradient
    entry is comfortably sized.
    """

    state: OptState
    graph: graphopt.NeighborGraph
    depth_in: np.ndarray
    normals_in: np.ndarray
    mask: np.ndarray
    cfg: OptConfig


def _random_unit(rng, shape) -> np.ndarray:
    v = rng.standard_normal(shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _smooth_intensity(rng, height: int, width: int) -> np.ndarray:
    """Piecewise-smooth random guide image.

    Gives patch distances on the order of the intensity bandwidth, so the
    instance's edge weights span a healthy range instead of underflowing
    the way iid-noise patches do.
    """
    coarse = rng.uniform(0.3, 0.7, (max(2, height // 4), max(4, width // 4)))
    base = resample.upsample(coarse, (height, width))
    return np.clip(base + rng.uniform(0.0, 0.01, (height, width)), 0.0, 1.0)


def _exclude_kinks(inst: GradcheckInstance, zone: float) -> None:
    """Zero out edges/mask pixels whose residuals sit within `zone` of a
    kink, plus numerically dead edges."""
    st = inst.state
    h, w = st.depth.shape
    rays = erp_ray_grid(h, w)
    pts = st.effective_depth()[..., None] * rays
    for k, (dy, dx) in enumerate(inst.graph.offsets):
        resid = np.sum(st.normals * (graphopt._gather(pts, dy, dx) - pts), axis=-1)
        dn = np.linalg.norm(graphopt._gather(st.normals, dy, dx) - st.normals, axis=-1)
        wk = inst.graph.weights[k]
        wk[(np.abs(resid) < zone) | (dn < zone) | (wk < 1e-8)] = 0.0
    bad = np.abs(st.depth - inst.depth_in) < zone
    bad |= (np.abs(st.normals - inst.normals_in) < zone).any(axis=-1)
    inst.mask &= ~bad


def make_random_instance(height: int = 8, width: int = 16, seed: int = 0,
                         cfg: OptConfig | None = None, kink_zone: float = 0.02,
                         min_grad: float = 0.05) -> GradcheckInstance:
    if height > 16 or width > 32:
        raise ValueError("gradcheck instances are capped at 32x16")
    if width != 2 * height:
        raise ValueError("ERP size must be 2:1")
    cfg = cfg or OptConfig()
    face_id = np.argmax(
        erp_ray_grid(height, width) @ CameraModel.cube(4).forwards.T, axis=-1
    ).astype(np.int32)
    for attempt in range(1000):
        rng = make_rng(seed, stream=attempt + 1)
        depth_in = rng.uniform(1.0, 3.0, (height, width))
        state = OptState.init(
            depth=rng.uniform(1.0, 3.0, (height, width)),
            normals=_random_unit(rng, (height, width)),
            face_id=face_id,
            depth_ref=depth_in,
            lambda_c=rng.uniform(0.8, 1.25, 6),
        )
        inst = GradcheckInstance(
            state=state,
            graph=graphopt.build_graph(_smooth_intensity(rng, height, width), cfg),
            depth_in=depth_in,
            normals_in=_random_unit(rng, (height, width)),
            mask=np.ones((height, width), dtype=bool),
            cfg=cfg,
        )
        _exclude_kinks(inst, kink_zone)
        grads = graphopt.gradients(state, inst.graph, inst.depth_in,
                                   inst.normals_in, inst.mask, cfg)
        ok = all(
            ((g == 0.0) | (np.abs(g) >= min_grad)).all()
            for g in (np.asarray(x).reshape(-1) for x in grads)
        )
        if ok:
            return inst
    raise RuntimeError("could not draw a well-conditioned gradcheck instance")


def numerical_gradient(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar function over every entry of x."""
    x = np.array(x)
    grad = np.zeros(x.shape, dtype=x.dtype)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return grad


def finite_diff_gradcheck(inst: GradcheckInstance, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Evaluations run at extended precision so the cancellation noise of the
    differences stays far below the 1e-6 denominator floor.
    """
    hh, ww = inst.state.depth.shape
    if hh > 16 or ww > 32:
        raise ValueError("gradcheck instances are capped at 32x16")
    ld = np.longdouble
    state = OptState.init(
        inst.state.depth.astype(ld),
        inst.state.normals.astype(ld),
        inst.state.face_id,
        inst.state.depth_ref.astype(ld),
        inst.state.lambda_c.astype(ld),
    )

    def loss() -> np.longdouble:
        return graphopt.total_loss(
            state, inst.graph, inst.depth_in, inst.normals_in,
            inst.mask, inst.cfg,
        )

    d_depth, d_normals, d_lambda = graphopt.gradients(
        state, inst.graph, inst.depth_in, inst.normals_in,
        inst.mask, inst.cfg,
    )
    step = ld(h)
    worst = 0.0
    for param, grad in ((state.depth, d_depth), (state.normals, d_normals),
                        (state.lambda_c, d_lambda)):
        flat = param.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss()
            flat[i] = orig - step
            fm = loss()
            flat[i] = orig
            cd = (fp - fm) / (2.0 * step)
            denom = max(float(abs(cd)), float(abs(gflat[i])), 1e-6)
            worst = max(worst, float(abs(cd - gflat[i])) / denom)
    return worst
