"""File interchange: float grids (PFM), 16-bit PNG with sidecar scaling,
binary PLY point clouds, and JSON manifests / configs / reports.

PFM is the lossless float format (the sign of the scale field encodes
endianness, rows are stored bottom-up).  PNG16 carries a `<name>.json`
sidecar with the affine dequantization parameters.  The manifest binds six
per-face prediction files to the fixed face order and records the frame
conventions external predictors must follow: world frame x right / y up /
z forward, face order front, right, back, left, up, down, face images
top-down, per-face depth encoded as perspective z-depth, normals in the
face camera frame oriented toward the camera.
"""

import dataclasses
import difflib
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (CorruptHeader, DimensionMismatch, IoFailure,
                     NonUnitNormals, ParseError, UnsupportedFormat,
                     ValidationError)
from .geometry import FACE_NAMES, PointCloud
from .graphopt import OptConfig

MANIFEST_VERSIONS = ("1",)


# ---------------------------------------------------------------- PFM

def _read_pfm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(buf) and buf[pos : pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise CorruptHeader("truncated PFM header")
    return buf[start:pos], pos


def read_pfm(path) -> np.ndarray:
    """Load a PFM file as float32, shape (H, W) or (H, W, 3), row 0 on top."""
    buf = Path(path).read_bytes()
    magic, pos = _read_pfm_token(buf, 0)
    if magic == b"Pf":
        channels = 1
    elif magic == b"PF":
        channels = 3
    else:
        raise CorruptHeader(f"not a PFM file (magic {magic!r})")
    wtok, pos = _read_pfm_token(buf, pos)
    htok, pos = _read_pfm_token(buf, pos)
    stok, pos = _read_pfm_token(buf, pos)
    try:
        width, height, scale = int(wtok), int(htok), float(stok)
    except ValueError as e:
        raise CorruptHeader(f"bad PFM dimensions/scale: {e}") from e
    if width <= 0 or height <= 0 or scale == 0.0:
        raise CorruptHeader("PFM dimensions must be positive and scale nonzero")
    pos += 1  # single whitespace byte after the scale line
    body = buf[pos:]
    expected = width * height * channels * 4
    if len(body) != expected:
        raise DimensionMismatch(
            f"PFM body is {len(body)} bytes, header implies {expected}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(body, dtype=dtype).astype(np.float32)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return np.flipud(data.reshape(shape)).copy()


def write_pfm(path, grid: np.ndarray) -> None:
    """Write float data as little-endian PFM (scale field -1.0)."""
    grid = np.asarray(grid)
    if grid.ndim == 2:
        magic = b"Pf"
    elif grid.ndim == 3 and grid.shape[2] == 3:
        magic = b"PF"
    else:
        raise UnsupportedFormat(f"PFM stores 1 or 3 channels, got shape {grid.shape}")
    h, w = grid.shape[:2]
    header = magic + f"\n{w} {h}\n-1.0\n".encode("ascii")
    body = np.flipud(grid).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


# ---------------------------------------------------------------- PNG16

def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def write_png16(path, grid: np.ndarray, metadata: dict | None = None) -> None:
    """Quantize a float grid to 16-bit grayscale PNG plus a scaling sidecar."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2:
        raise UnsupportedFormat("PNG16 stores single-channel grids")
    if not np.isfinite(grid).all():
        raise ValueError("PNG16 cannot encode non-finite values")
    lo = float(grid.min()) if grid.size else 0.0
    hi = float(grid.max()) if grid.size else 0.0
    scale = (hi - lo) / 65535.0
    if scale > 0.0:
        q = np.round((grid - lo) / scale).astype(np.uint16)
    else:
        q = np.zeros(grid.shape, dtype=np.uint16)
    Image.fromarray(q).save(Path(path), format="PNG")
    doc = {"format": "png16", "scale": scale, "offset": lo,
           "width": grid.shape[1], "height": grid.shape[0]}
    if metadata:
        doc["metadata"] = metadata
    _sidecar(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_png16(path) -> np.ndarray:
    side = _sidecar(path)
    if not side.exists():
        raise CorruptHeader(f"missing PNG16 sidecar {side}")
    doc = json.loads(side.read_text())
    arr = np.asarray(Image.open(Path(path)), dtype=np.float64)
    if arr.shape != (doc["height"], doc["width"]):
        raise DimensionMismatch(
            f"PNG is {arr.shape}, sidecar says {(doc['height'], doc['width'])}"
        )
    return arr * doc["scale"] + doc["offset"]


# ---------------------------------------------------------------- dispatch

def write_depth(path, grid: np.ndarray, metadata: dict | None = None) -> None:
    """Write a depth grid; format chosen by extension (.pfm or .png)."""
    ext = Path(path).suffix.lower()
    if ext == ".pfm":
        write_pfm(path, grid)
    elif ext == ".png":
        write_png16(path, grid, metadata)
    else:
        raise UnsupportedFormat(f"cannot write depth to {ext!r} files")


def read_depth(path) -> np.ndarray:
    ext = Path(path).suffix.lower()
    if ext == ".pfm":
        grid = read_pfm(path)
        if grid.ndim != 2:
            raise DimensionMismatch("expected single-channel depth PFM")
        return grid
    if ext == ".png":
        return read_png16(path)
    raise UnsupportedFormat(f"cannot read depth from {ext!r} files")


def write_normals(path, grid: np.ndarray) -> None:
    """Write (H, W, 3) normals as 3-channel PFM, channel order (x, y, z)."""
    grid = np.asarray(grid)
    if grid.ndim != 3 or grid.shape[2] != 3:
        raise UnsupportedFormat("normals must be (H, W, 3)")
    if Path(path).suffix.lower() != ".pfm":
        raise UnsupportedFormat("normals are stored as PFM")
    write_pfm(path, grid)


def read_normals(path) -> tuple[np.ndarray, np.ndarray]:
    """Read normals, renormalizing on the way in.

    All-zero pixels are flagged invalid and left untouched.  Emits a
    NonUnitNormals warning if any valid pixel deviates from unit length by
    more than 1e-3.
    """
    grid = read_pfm(path).astype(np.float64)
    if grid.ndim != 3:
        raise DimensionMismatch("expected 3-channel normal PFM")
    norm = np.linalg.norm(grid, axis=-1)
    valid = norm > 1e-6
    if valid.any():
        deviation = float(np.abs(norm[valid] - 1.0).max())
        if deviation > 1e-3:
            warnings.warn(
                f"normals deviate from unit length by up to {deviation:.3g}",
                NonUnitNormals,
            )
    np.divide(grid, norm[..., None], out=grid, where=valid[..., None])
    return grid, valid


# ---------------------------------------------------------------- PLY

def write_pointcloud(path, cloud: PointCloud, comment: str | None = None) -> None:
    """Binary little-endian PLY with float32 xyz and optional uchar RGB."""
    pts = np.asarray(cloud.points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise IoFailure("point cloud must be a non-empty (N, 3) array")
    if not np.isfinite(pts).all():
        raise IoFailure("point cloud contains non-finite coordinates")
    lines = ["ply", "format binary_little_endian 1.0"]
    if comment:
        lines += [f"comment {line}" for line in comment.splitlines()]
    lines += [f"element vertex {len(pts)}",
              "property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    lines.append("end_header")
    rec = np.empty(len(pts), dtype=fields)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if cloud.colors is not None:
        colors = np.asarray(cloud.colors, dtype=np.uint8)
        rec["red"], rec["green"], rec["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    try:
        Path(path).write_bytes("\n".join(lines).encode("ascii") + b"\n" + rec.tobytes())
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


_PLY_PROPS = {"float": ("<f4", 4), "uchar": ("u1", 1)}


def read_pointcloud(path) -> PointCloud:
    """Read PLY files produced by write_pointcloud."""
    buf = Path(path).read_bytes()
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply\n") or end < 0:
        raise CorruptHeader("not a PLY file")
    header = buf[:end].decode("ascii").splitlines()
    body = buf[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header:
        raise UnsupportedFormat("only binary little-endian PLY is supported")
    count = None
    props = []
    for line in header:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
        elif line.startswith("element "):
            raise UnsupportedFormat(f"unsupported PLY element: {line}")
        elif line.startswith("property"):
            _, ptype, name = line.split()
            if ptype not in _PLY_PROPS:
                raise UnsupportedFormat(f"unsupported PLY property type {ptype}")
            props.append((name, _PLY_PROPS[ptype][0]))
    if count is None or [p[0] for p in props[:3]] != ["x", "y", "z"]:
        raise CorruptHeader("PLY header must declare vertex x, y, z")
    rec_dtype = np.dtype(props)
    if len(body) != count * rec_dtype.itemsize:
        raise DimensionMismatch(
            f"PLY body is {len(body)} bytes, header implies {count * rec_dtype.itemsize}"
        )
    rec = np.frombuffer(body, dtype=rec_dtype)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = None
    if {"red", "green", "blue"} <= {p[0] for p in props}:
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
    return PointCloud(points=pts, colors=colors)


# ---------------------------------------------------------------- config

def _reject_unknown(doc: dict, known, what: str, strict: bool) -> None:
    for key in doc:
        if key not in known:
            hint = difflib.get_close_matches(key, known, n=1)
            msg = f"unknown {what} key {key!r}"
            if hint:
                msg += f" (did you mean {hint[0]!r}?)"
            if strict:
                raise ValidationError(msg)
            warnings.warn(msg)


def config_to_dict(cfg: OptConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["iters"] = list(doc["iters"])
    return doc


def config_from_dict(doc: dict, strict: bool = True) -> OptConfig:
    known = [f.name for f in dataclasses.fields(OptConfig)]
    _reject_unknown(doc, known, "config", strict)
    kwargs = {k: v for k, v in doc.items() if k in known}
    try:
        return OptConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"bad config: {e}") from e


def load_config(path, strict: bool = True) -> OptConfig:
    """Load an optimizer config document; missing keys take the defaults."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: config must be a JSON object")
    return config_from_dict(doc, strict=strict)


# ---------------------------------------------------------------- manifest

@dataclass
class Manifest:
    """Binding of six per-face prediction files to one camera model."""

    erp_height: int
    erp_width: int
    face_size: int
    faces: dict                      # name -> {"depth": path[, "normals": path]}
    version: str = "1"
    depth_unit: str = "meter"
    depth_encoding: str = "z"        # perspective z-depth; merging applies rho
    normal_frame: str = "camera"
    normal_orientation: str = "inward"   # toward the camera (n . ray < 0)
    intensity: str | None = None     # optional ERP grayscale guide
    gt_depth: str | None = None      # optional ERP ground-truth radial depth
    metadata: dict = field(default_factory=dict)
    digest: str | None = None        # sha256 of the manifest file, set on load

    def validate(self, check_files: bool = False) -> None:
        if self.version not in MANIFEST_VERSIONS:
            raise ValidationError(f"unrecognized manifest version {self.version!r}")
        if tuple(self.faces.keys()) != FACE_NAMES:
            raise ValidationError(
                f"manifest must list exactly six faces in order {list(FACE_NAMES)}, "
                f"got {list(self.faces.keys())}"
            )
        if self.erp_width != 2 * self.erp_height:
            raise ValidationError("erp width must be twice erp height")
        if self.face_size < 2:
            raise ValidationError("face_size must be >= 2")
        if self.depth_encoding not in ("z", "radial"):
            raise ValidationError(f"unknown depth encoding {self.depth_encoding!r}")
        if self.normal_frame not in ("camera", "world"):
            raise ValidationError(f"unknown normal frame {self.normal_frame!r}")
        if self.normal_orientation not in ("inward", "outward"):
            raise ValidationError(
                f"unknown normal orientation {self.normal_orientation!r}"
            )
        for name, entry in self.faces.items():
            unknown = set(entry) - {"depth", "normals", "image"}
            if unknown or not entry:
                raise ValidationError(
                    f"face {name!r} entries must be depth/normals/image, got {sorted(entry)}"
                )
        if check_files:
            for name, entry in self.faces.items():
                for kind, p in entry.items():
                    if not Path(p).exists():
                        raise ValidationError(f"face {name!r} {kind} file not found: {p}")
            for p in (self.intensity, self.gt_depth):
                if p and not Path(p).exists():
                    raise ValidationError(f"file not found: {p}")

    def has_normals(self) -> bool:
        return all("normals" in entry for entry in self.faces.values())

    def require_depth(self) -> None:
        missing = [name for name, entry in self.faces.items() if "depth" not in entry]
        if missing:
            raise ValidationError(f"faces missing depth files: {missing}")


_MANIFEST_KEYS = ("version", "erp", "face_size", "faces", "depth", "normals",
                  "intensity", "gt_depth", "metadata")


def load_manifest(path, strict: bool = True) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: manifest must be a JSON object")
    _reject_unknown(doc, _MANIFEST_KEYS, "manifest", strict)
    try:
        erp = doc["erp"]
        faces_doc = doc["faces"]
    except KeyError as e:
        raise ValidationError(f"manifest is missing required key {e}") from e

    def resolve(p):
        return str((path.parent / p).resolve()) if p else None

    faces = {}
    if not isinstance(faces_doc, dict):
        raise ValidationError("manifest 'faces' must be an object")
    for name, entry in faces_doc.items():
        faces[name] = {k: resolve(v) for k, v in entry.items()}
    m = Manifest(
        erp_height=int(erp.get("height", 0)),
        erp_width=int(erp.get("width", 0)),
        face_size=int(doc.get("face_size", 0)),
        faces=faces,
        version=str(doc.get("version", "")),
        depth_unit=doc.get("depth", {}).get("unit", "meter"),
        depth_encoding=doc.get("depth", {}).get("encoding", "z"),
        normal_frame=doc.get("normals", {}).get("frame", "camera"),
        normal_orientation=doc.get("normals", {}).get("orientation", "inward"),
        intensity=resolve(doc.get("intensity")),
        gt_depth=resolve(doc.get("gt_depth")),
        metadata=doc.get("metadata", {}),
        digest=file_digest(path),
    )
    m.validate(check_files=True)
    return m


def save_manifest(path, manifest: Manifest) -> None:
    """Write a manifest with face paths stored relative to its directory."""
    manifest.validate(check_files=False)
    path = Path(path)

    def relativize(p):
        if p is None:
            return None
        try:
            return str(Path(p).resolve().relative_to(path.parent.resolve()))
        except ValueError:
            return str(p)

    doc = {
        "version": manifest.version,
        "erp": {"width": manifest.erp_width, "height": manifest.erp_height},
        "face_size": manifest.face_size,
        "faces": {
            name: {k: relativize(v) for k, v in entry.items()}
            for name, entry in manifest.faces.items()
        },
        "depth": {"unit": manifest.depth_unit, "encoding": manifest.depth_encoding},
        "normals": {"frame": manifest.normal_frame,
                    "orientation": manifest.normal_orientation},
        "intensity": relativize(manifest.intensity),
        "gt_depth": relativize(manifest.gt_depth),
        "metadata": manifest.metadata,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


# ---------------------------------------------------------------- misc

def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def write_report(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_intensity(path) -> np.ndarray:
    """Read a grayscale guide image in [0, 1] (PFM, PNG16 or plain PNG)."""
    ext = Path(path).suffix.lower()
    if ext == ".pfm":
        grid = read_pfm(path)
        if grid.ndim == 3:
            grid = grid.mean(axis=2)
        return np.clip(grid.astype(np.float64), 0.0, 1.0)
    if ext == ".png":
        if _sidecar(path).exists():
            return np.clip(read_png16(path), 0.0, 1.0)
        arr = np.asarray(Image.open(Path(path)), dtype=np.float64)
        if arr.ndim == 3:
            arr = arr.mean(axis=2)
        peak = 65535.0 if arr.max() > 255.0 else 255.0
        return np.clip(arr / peak, 0.0, 1.0)
    raise UnsupportedFormat(f"cannot read intensity from {ext!r} files")
