"""Joint refinement of ERP depth, normals and six per-face scale factors.

The objective couples a graph planar-consistency term over bilateral edge
weights with fidelity terms against the merged input depth/normals, gated
by a normal-agreement confidence mask.  Parameters are a per-pixel depth
shape anchored to the input, per-pixel free normal vectors (renormalized
after every step) and six positive per-face scales; the radial depth the
losses see is the affine combination described on OptState.  Optimization
is Adam with per-group trust radii, run coarse to fine over a 2x pyramid.

All loss/gradient code is dtype-preserving so the finite-difference oracle
can drive it at extended precision.
"""

import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import geometry, resample
from .errors import Diverged, NonFiniteGradient
from .geometry import erp_ray_grid


@dataclass
class OptConfig:
    """Optimizer settings. Defaults follow the published schedule."""

    alpha: float = 0.5            # weight of the normal-smoothness half of the planar term
    sigma_int: float = 0.07       # patch-appearance bandwidth
    sigma_spa: float = 3.0        # spatial bandwidth (pixels)
    eta_p: float = 50.0
    eta_d: float = 0.5
    eta_n: float = 10.0
    levels: int = 3
    iters: tuple = (300, 150, 30)  # per level, coarsest first
    lr_scale: float = 5.0          # lr at level l is lr_scale * 10**(l - levels)
    charbonnier_eps: float = 1e-3  # smoothing scale of the |x| surrogate, meters
    window_radius: int = 2
    patch_size: int = 3
    mask_threshold: float = 0.7
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # Per-iteration trust radii capping the Adam step of each parameter
    # group (depth relative to its current median, normals and scales
    # absolute).  The published per-level learning rates act as upper
    # bounds; without the caps they let single steps jump by whole meters,
    # which both destroys near-converged inputs and feeds the objective's
    # degenerate global shrink.  The scale radius is deliberately wide
    # relative to the depth radius: a face's scale must be able to claim a
    # seam discrepancy before local bending absorbs it.
    step_clamp_depth: float = 5e-4
    step_clamp_normals: float = 5e-3
    step_clamp_lambda: float = 2e-2
    reduction_mode: str = "ordered"

    def __post_init__(self):
        self.iters = tuple(int(i) for i in self.iters)
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.iters) != self.levels:
            raise ValueError(
                f"iters must list one count per level ({self.levels}), got {self.iters}"
            )
        if any(i < 1 for i in self.iters):
            raise ValueError("iteration counts must be positive")
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and >= 1")
        if self.sigma_int <= 0 or self.sigma_spa <= 0:
            raise ValueError("kernel bandwidths must be positive")
        if self.charbonnier_eps < 0:
            raise ValueError("charbonnier_eps must be >= 0")
        if not -1.0 <= self.mask_threshold <= 1.0:
            raise ValueError("mask_threshold must be a cosine in [-1, 1]")
        if (self.step_clamp_depth <= 0 or self.step_clamp_normals <= 0
                or self.step_clamp_lambda <= 0):
            raise ValueError("step clamps must be positive")
        if self.reduction_mode != "ordered":
            raise ValueError("only the 'ordered' reduction mode is implemented")

    def learning_rate(self, level: int) -> float:
        return self.lr_scale * 10.0 ** (level - self.levels)


@dataclass
class NeighborGraph:
    """Fixed-topology pixel graph: one weight plane per window offset.

    weights[k] holds w_ij for the edge from each pixel i to its neighbor at
    offsets[k]; columns wrap around the seam, edges leaving the top/bottom
    rows do not exist and are stored with weight 0.
    """

    offsets: tuple            # ((dy, dx), ...)
    weights: np.ndarray       # (K, H, W), 0 where the edge does not exist

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape[1:]


@dataclass
class OptState:
    """Optimization variables in anchored-shape / per-face-scale coordinates.

    The radial depth entering the losses is

        D = depth + (lambda_c[face_id] - 1) * depth_ref

    where depth_ref is the merged input the fidelity term anchors to.  In
    these coordinates the fidelity residual D - lambda*depth_ref equals
    depth - depth_ref, so lambda_c feels only the collective planar signal
    of its face: seam misalignment moves a face's scale as one coordinate
    instead of having to drag every pixel through the fidelity anchor.
    """

    depth: np.ndarray         # (H, W) anchored shape, radial meters
    normals: np.ndarray       # (H, W, 3)
    lambda_c: np.ndarray      # (6,)
    face_id: np.ndarray       # (H, W) int, routes lambda_c to pixels
    depth_ref: np.ndarray     # (H, W) merged input depth (constant)
    m_depth: np.ndarray = None
    v_depth: np.ndarray = None
    m_normals: np.ndarray = None
    v_normals: np.ndarray = None
    m_lambda: np.ndarray = None
    v_lambda: np.ndarray = None
    step: int = 0

    @classmethod
    def init(cls, depth, normals, face_id, depth_ref, lambda_c=None) -> "OptState":
        depth = np.array(depth, dtype=float)
        normals = np.array(normals, dtype=float)
        lam = np.ones(6) if lambda_c is None else np.array(lambda_c, dtype=float)
        return cls(
            depth=depth, normals=normals, lambda_c=lam,
            face_id=np.asarray(face_id), depth_ref=np.asarray(depth_ref, dtype=float),
            m_depth=np.zeros_like(depth), v_depth=np.zeros_like(depth),
            m_normals=np.zeros_like(normals), v_normals=np.zeros_like(normals),
            m_lambda=np.zeros_like(lam), v_lambda=np.zeros_like(lam),
        )

    @property
    def scale_map(self) -> np.ndarray:
        return self.lambda_c[self.face_id]

    def effective_depth(self) -> np.ndarray:
        """The radial depth entering the losses."""
        return self.depth + (self.scale_map - 1.0) * self.depth_ref

    def snapshot(self) -> tuple:
        return self.depth.copy(), self.normals.copy(), self.lambda_c.copy()


def _gather(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """a[y + dy, (x + dx) mod W] at [y, x]; vertical wraparound rows must be
    masked out by the caller (edge weights are zero there)."""
    return np.roll(a, (-dy, -dx), axis=(0, 1))


def _scatter(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Adjoint of _gather: deposits a[i] at i + (dy, dx)."""
    return np.roll(a, (dy, dx), axis=(0, 1))


def _shifted_clamped(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """img[clip(y + dy), (x + dx) mod W], the patch sampling rule."""
    h, w = img.shape
    rows = np.clip(np.arange(h) + dy, 0, h - 1)
    cols = (np.arange(w) + dx) % w
    return img[rows[:, None], cols[None, :]]


def window_offsets(radius: int, height: int, width: int) -> tuple:
    """All (dy, dx) in the square window except the center, restricted to
    displacements shorter than the grid itself."""
    return tuple(
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if (dy, dx) != (0, 0) and abs(dy) < height and abs(dx) < width
    )


def build_graph(intensity: np.ndarray, cfg: OptConfig) -> NeighborGraph:
    """Bilateral edge weights from a grayscale image in [0, 1].

    w_ij = exp(-||Q_i - Q_j||_F^2 / (2 sigma_int^2))
         * exp(-||i - j||_2^2    / (2 sigma_spa^2))

    with Q the patch_size x patch_size patch around each pixel and the
    neighbor's x coordinate taken modulo the image width.
    """
    img = np.asarray(intensity, dtype=float)
    if img.ndim != 2:
        raise ValueError("intensity must be a single-channel grid")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("intensity must be normalized to [0, 1]")
    h, w = img.shape
    pr = cfg.patch_size // 2
    patch = [
        _shifted_clamped(img, ey, ex)
        for ey in range(-pr, pr + 1)
        for ex in range(-pr, pr + 1)
    ]
    offsets = window_offsets(cfg.window_radius, h, w)
    weights = np.zeros((len(offsets), h, w))
    rows = np.arange(h)
    for k, (dy, dx) in enumerate(offsets):
        d2 = np.zeros((h, w))
        for pe in patch:
            diff = pe - _gather(pe, dy, dx)
            d2 += diff * diff
        wk = np.exp(-d2 / (2.0 * cfg.sigma_int**2))
        wk *= np.exp(-(dy * dy + dx * dx) / (2.0 * cfg.sigma_spa**2))
        invalid = (rows + dy < 0) | (rows + dy >= h)
        wk[invalid, :] = 0.0
        weights[k] = wk
    return NeighborGraph(offsets=offsets, weights=weights)


def apply_validity(graph: NeighborGraph, valid: np.ndarray) -> NeighborGraph:
    """Zero out edges touching invalid pixels (invalid at either endpoint)."""
    v = np.asarray(valid, dtype=float)
    weights = graph.weights * v
    for k, (dy, dx) in enumerate(graph.offsets):
        weights[k] *= _gather(v, dy, dx)
    return NeighborGraph(offsets=graph.offsets, weights=weights)


def compute_mask(depth_in: np.ndarray, normals_in: np.ndarray, cfg: OptConfig) -> np.ndarray:
    """Confidence mask: 1 where the ingested normal agrees with the normal
    derived from the ingested depth (cosine >= threshold)."""
    derived, _ = geometry.normals_from_depth(depth_in)
    cos = np.sum(np.asarray(normals_in, dtype=float) * derived, axis=-1)
    return cos >= cfg.mask_threshold


def _phi(x, eps):
    return np.sqrt(x * x + eps * eps)


def _masked_ratio(w, num, den):
    """w * num / den, forced to 0 where w == 0 (absent edges may carry
    garbage residuals; real 0/0 on live edges must surface as NaN)."""
    with np.errstate(invalid="ignore", divide="ignore"):
        r = num / den
    return np.where(w != 0.0, w * r, 0.0)


def _face_sums(values: np.ndarray, face_id: np.ndarray) -> np.ndarray:
    return np.array([np.sum(values[face_id == c]) for c in range(6)],
                    dtype=values.dtype)


def _planar(state: OptState, graph: NeighborGraph, cfg: OptConfig, with_grads: bool):
    """Planar-consistency loss on the effective depth.

    Gradients come back in chart coordinates: the shape gradient equals the
    effective-depth gradient (the chart is a unit-slope shift), and each
    lambda_c aggregates depth_ref * d/d(effective) over its face.
    """
    normals = state.normals
    h, w = state.depth.shape
    eps = cfg.charbonnier_eps
    rays = erp_ray_grid(h, w)
    eff = state.effective_depth()
    pts = eff[..., None] * rays
    n_dot_s = np.sum(normals * rays, axis=-1)

    zero = state.depth.dtype.type(0.0)
    loss_plane = zero
    loss_smooth = zero
    d_eff = np.zeros_like(state.depth) if with_grads else None
    d_normals = np.zeros_like(normals) if with_grads else None

    for k, (dy, dx) in enumerate(graph.offsets):
        wk = graph.weights[k]
        dp = _gather(pts, dy, dx) - pts
        resid = np.sum(normals * dp, axis=-1)
        phi_r = _phi(resid, eps)
        loss_plane = loss_plane + np.sum(wk * phi_r)

        dn = _gather(normals, dy, dx) - normals
        phi_n = _phi(np.sqrt(np.sum(dn * dn, axis=-1)), eps)
        loss_smooth = loss_smooth + np.sum(wk * phi_n)

        if with_grads:
            g = _masked_ratio(wk, resid, phi_r)
            d_normals += g[..., None] * dp
            d_eff -= g * n_dot_s
            nsj = np.sum(normals * _gather(rays, dy, dx), axis=-1)
            d_eff += _scatter(g * nsj, dy, dx)

            hs = cfg.alpha * _masked_ratio(wk, 1.0, phi_n)
            flow = hs[..., None] * dn
            d_normals -= flow
            d_normals += _scatter(flow, dy, dx)

    loss = loss_plane + cfg.alpha * loss_smooth
    if not with_grads:
        return loss, None, None, None
    d_lambda = _face_sums(state.depth_ref * d_eff, state.face_id)
    return loss, d_eff, d_normals, d_lambda


def _fidelity(state: OptState, depth_in, normals_in, mask, cfg: OptConfig,
              with_grads: bool):
    """Smoothed-L1 fit of the effective depth to the lambda-scaled input
    (which in chart coordinates reads shape - input) and of the normals to
    the input.  The residual does not depend on lambda_c: the fidelity
    pins the shape while the planar term owns the scales."""
    eps = cfg.charbonnier_eps
    m = np.asarray(mask, dtype=float)
    u = state.depth - depth_in
    phi_u = _phi(u, eps)
    loss_d = np.sum(m * phi_u)

    rn = state.normals - normals_in
    phi_rn = _phi(rn, eps)
    loss_n = np.sum(m[..., None] * phi_rn)

    if not with_grads:
        return loss_d, loss_n, None, None, None

    d_depth = _masked_ratio(m, u, phi_u)
    d_lambda = np.zeros_like(state.lambda_c)
    d_normals = _masked_ratio(m[..., None], rn, phi_rn)
    return loss_d, loss_n, d_depth, d_normals, d_lambda


def loss_planar(state: OptState, graph: NeighborGraph, cfg: OptConfig) -> float:
    """Unweighted planar-consistency loss (both halves, raw sum)."""
    loss, _, _, _ = _planar(state, graph, cfg, with_grads=False)
    return loss


def loss_fidelity(state: OptState, depth_in, normals_in, mask,
                  cfg: OptConfig) -> tuple[float, float]:
    """(L_d, L_n): masked smoothed-L1 fits to the scaled input depth and
    to the input normals."""
    ld, ln, _, _, _ = _fidelity(state, depth_in, normals_in, mask, cfg,
                                with_grads=False)
    return ld, ln


def total_loss(state: OptState, graph: NeighborGraph, depth_in, normals_in,
               mask, cfg: OptConfig) -> float:
    lp = loss_planar(state, graph, cfg)
    ld, ln = loss_fidelity(state, depth_in, normals_in, mask, cfg)
    return cfg.eta_p * lp + cfg.eta_d * ld + cfg.eta_n * ln


def gradients(state: OptState, graph: NeighborGraph, depth_in, normals_in,
              mask, cfg: OptConfig):
    """Analytic gradients of total_loss w.r.t. shape depth, normals, lambda_c."""
    _, _, dd, dn, dl = _loss_and_gradients(
        state, graph, depth_in, normals_in, mask, cfg
    )
    return dd, dn, dl


def _loss_and_gradients(state, graph, depth_in, normals_in, mask, cfg):
    lp, dd_p, dn_p, dl_p = _planar(state, graph, cfg, with_grads=True)
    ld, ln, dd_d, dn_n, dl_d = _fidelity(
        state, depth_in, normals_in, mask, cfg, with_grads=True
    )
    loss = cfg.eta_p * lp + cfg.eta_d * ld + cfg.eta_n * ln
    d_depth = cfg.eta_p * dd_p + cfg.eta_d * dd_d
    d_normals = cfg.eta_p * dn_p + cfg.eta_n * dn_n
    d_lambda = cfg.eta_p * dl_p + cfg.eta_d * dl_d
    if not (np.isfinite(d_depth).all() and np.isfinite(d_normals).all()
            and np.isfinite(d_lambda).all()):
        raise NonFiniteGradient(
            "non-finite gradient; check charbonnier_eps and input validity"
        )
    parts = {"planar": float(lp), "depth_fidelity": float(ld), "normal_fidelity": float(ln)}
    return loss, parts, d_depth, d_normals, d_lambda


def _adam_update(param, g, m, v, lr, t, cfg: OptConfig, clamp: float):
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * g
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * (g * g)
    mh = m / (1.0 - cfg.beta1**t)
    vh = v / (1.0 - cfg.beta2**t)
    step = lr * mh / (np.sqrt(vh) + cfg.adam_eps)
    np.clip(step, -clamp, clamp, out=step)
    param -= step


def adam_step(state: OptState, grads: tuple, lr: float, cfg: OptConfig) -> OptState:
    """One Adam step over all three parameter groups (in place).

    Step magnitudes are capped at the per-group trust radii; normals are
    renormalized afterwards; depth and lambda_c are clamped to stay
    positive.  lambda_c is then rescaled to geometric mean 1: the global
    scale is not identifiable (uniformly shrinking every scale and with it
    the effective depth strictly lowers the planar term), so only the
    relative scales are kept as degrees of freedom.
    """
    d_depth, d_normals, d_lambda = grads
    state.step += 1
    t = state.step
    depth_radius = cfg.step_clamp_depth * float(np.median(state.depth))
    _adam_update(state.depth, d_depth, state.m_depth, state.v_depth, lr, t, cfg,
                 depth_radius)
    _adam_update(state.normals, d_normals, state.m_normals, state.v_normals, lr, t,
                 cfg, cfg.step_clamp_normals)
    _adam_update(state.lambda_c, d_lambda, state.m_lambda, state.v_lambda, lr, t,
                 cfg, cfg.step_clamp_lambda)

    norm = np.linalg.norm(state.normals, axis=-1, keepdims=True)
    np.divide(state.normals, norm, out=state.normals, where=norm > 1e-300)
    np.maximum(state.lambda_c, 1e-4, out=state.lambda_c)
    state.lambda_c /= np.exp(np.mean(np.log(state.lambda_c)))
    np.maximum(state.lambda_c, 1e-4, out=state.lambda_c)
    np.maximum(state.depth, 1e-4, out=state.depth)
    short = 1e-4 - state.effective_depth()
    np.clip(short, 0.0, None, out=short)
    state.depth += short
    return state


@dataclass
class LevelStats:
    level: int
    height: int
    width: int
    lr: float
    iterations: int
    loss_initial: float
    loss_final: float
    seconds: float
    losses: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "losses"}
        return d


@dataclass
class OptResult:
    depth: np.ndarray
    normals: np.ndarray
    lambda_c: np.ndarray
    levels: list


def _run_level(state: OptState, graph, depth_in, normals_in, mask,
               cfg: OptConfig, lr: float, iterations: int):
    """Fixed number of Adam iterations; returns the best-loss visited state.

    Adam is not monotone, so the output is the lowest-loss iterate (the
    starting point included) rather than the last one.
    """
    best = state.snapshot()
    best_loss = np.inf
    losses = []
    for _ in range(iterations):
        loss, _, dd, dn, dl = _loss_and_gradients(
            state, graph, depth_in, normals_in, mask, cfg
        )
        loss = float(loss)
        losses.append(loss)
        if loss < best_loss:
            best_loss = loss
            best = state.snapshot()
        adam_step(state, (dd, dn, dl), lr, cfg)
    final = float(total_loss(state, graph, depth_in, normals_in, mask, cfg))
    losses.append(final)
    if final < best_loss:
        best_loss = final
        best = state.snapshot()
    if best_loss > losses[0]:
        raise Diverged(f"loss rose from {losses[0]} to {best_loss}")
    return best, losses


def optimize(depth_in: np.ndarray, normals_in: np.ndarray, intensity: np.ndarray,
             face_id: np.ndarray, cfg: OptConfig | None = None,
             valid: np.ndarray | None = None) -> OptResult:
    """Coarse-to-fine joint refinement of merged ERP depth/normals.

    Runs `cfg.levels` pyramid levels from coarsest to full resolution.  At
    each level the graph and confidence mask are rebuilt from the
    downsampled inputs and the depth shape re-anchors to them; the normals
    (upsampled), the per-face scales (starting at 1) and the scales' Adam
    moments carry across levels.

    Args:
        depth_in: merged radial ERP depth (H, W).
        normals_in: merged world-frame ERP normals (H, W, 3).
        intensity: grayscale guide image in [0, 1] for the edge weights.
        face_id: per-pixel source face indices (H, W).
        cfg: optimizer settings (defaults if None).
        valid: optional bool map; invalid pixels take part in no loss term.

    Returns:
        OptResult with the refined full-resolution depth, normals, the six
        scale factors and per-level statistics.
    """
    cfg = cfg or OptConfig()
    depth_in = np.asarray(depth_in, dtype=float)
    normals_in = np.asarray(normals_in, dtype=float)
    intensity = np.asarray(intensity, dtype=float)
    geometry.check_erp_shape(depth_in, channels=1)
    if normals_in.shape != depth_in.shape + (3,):
        raise ValueError("normals_in must be (H, W, 3) matching depth_in")
    if intensity.shape != depth_in.shape or face_id.shape != depth_in.shape:
        raise ValueError("intensity and face_id must match depth_in")

    normals_cur = None
    lam = np.ones(6)
    lam_moments = None
    depth_shape = None
    stats = []
    for level in range(cfg.levels - 1, -1, -1):
        factor = 2**level
        d_l = resample.downsample(depth_in, factor)
        n_l = resample.downsample(normals_in, factor, kind="normals")
        i_l = resample.downsample(intensity, factor)
        f_l = resample.downsample(face_id, factor, kind="label")
        h_l, w_l = d_l.shape

        graph = build_graph(i_l, cfg)
        mask = compute_mask(d_l, n_l, cfg)
        if valid is not None:
            v_l = resample.downsample(valid, factor, kind="mask")
            graph = apply_validity(graph, v_l)
            mask &= v_l

        if normals_cur is None:
            normals_cur = n_l.copy()
        else:
            normals_cur = resample.upsample(normals_cur, (h_l, w_l), kind="normals")

        # The shape re-anchors to the level's own merged input; the carried
        # state is the normals, the per-face scales and their Adam moments.
        # Carrying the bent shape across levels would re-import each
        # coarse level's transient seam bending as a counterfeit residual.
        state = OptState.init(d_l.copy(), normals_cur, f_l, d_l, lam)
        if lam_moments is not None:
            state.m_lambda[:], state.v_lambda[:] = lam_moments
        lr = cfg.learning_rate(level)
        iterations = cfg.iters[cfg.levels - 1 - level]
        t0 = time.perf_counter()
        (depth_shape, normals_cur, lam), losses = _run_level(
            state, graph, d_l, n_l, mask, cfg, lr, iterations
        )
        lam_moments = (state.m_lambda.copy(), state.v_lambda.copy())
        stats.append(LevelStats(
            level=level, height=h_l, width=w_l, lr=lr, iterations=iterations,
            loss_initial=losses[0], loss_final=min(losses),
            seconds=time.perf_counter() - t0, losses=losses,
        ))
    final = OptState.init(depth_shape, normals_cur, face_id, depth_in, lam)
    return OptResult(depth=final.effective_depth(), normals=normals_cur,
                     lambda_c=lam, levels=stats)
