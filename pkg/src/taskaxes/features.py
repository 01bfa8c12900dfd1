"""Dense feature grids and keypoint matching.

A FeatureGrid holds one descriptor per pixel. A reference descriptor is
formed by averaging a small window around the annotated pixel, a cosine
similarity map is computed against every valid pixel of the target grid,
and the match is read off either as the argmax pixel or as the
soft-argmax (softmax-weighted expectation of pixel coordinates).

Binary file layouts (all little-endian):

  .fgrd   magic "FGRD", u32 version=1, u32 height, u32 width, u32 dim,
          height*width*dim float32 row-major (pixel-major, descriptor-minor),
          u32 metadata byte length, that many UTF-8 bytes of JSON metadata.

  .dpth   magic "DPTH", u32 version=1, u32 height, u32 width,
          height*width float32 depth in meters, NaN marking invalid pixels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DimMismatch,
    FileFormatError,
    NonPositiveTemperature,
    NoValidPixels,
    OutOfBounds,
    ZeroReferenceDescriptor,
)

FGRD_MAGIC = b"FGRD"
DPTH_MAGIC = b"DPTH"
FILE_VERSION = 1


@dataclass
class FeatureGrid:
    """Per-pixel descriptor array of shape (height, width, dim)."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ConfigError(f"feature grid must be 3D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("feature grid contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


@dataclass
class DepthMask:
    """Per-pixel depth in meters; NaN or non-positive entries are invalid."""

    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ConfigError(f"depth map must be 2D, got shape {self.depth.shape}")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.isfinite(self.depth) & (self.depth > 0)


@dataclass
class SimilarityMap:
    """Cosine scores per pixel plus the valid-candidate mask."""

    score: np.ndarray
    valid: np.ndarray

    @property
    def height(self) -> int:
        return self.score.shape[0]

    @property
    def width(self) -> int:
        return self.score.shape[1]


@dataclass
class PixelMatch:
    """Matched pixel; hard mode yields integer-valued coordinates."""

    u: float
    v: float
    peak_score: float
    mode: str

    @property
    def pixel(self) -> tuple:
        return (int(round(self.u)), int(round(self.v)))


@dataclass
class MatchConfig:
    mode: str = "soft"
    temperature: float = 0.01
    window_radius: int = 1

    def __post_init__(self):
        if self.mode not in ("hard", "soft"):
            raise ConfigError(f"unknown match mode {self.mode!r}")
        if self.window_radius < 0:
            raise ConfigError("window radius must be >= 0")


def window_average(grid: FeatureGrid, u: int, v: int, radius: int = 1) -> np.ndarray:
    """Mean descriptor over a (2r+1)^2 window clipped to the image bounds."""
    if radius < 0:
        raise ConfigError("window radius must be >= 0")
    u = int(u)
    v = int(v)
    if not (0 <= u < grid.width and 0 <= v < grid.height):
        raise OutOfBounds(f"pixel ({u}, {v}) outside {grid.width}x{grid.height} grid")
    u0, u1 = max(u - radius, 0), min(u + radius, grid.width - 1)
    v0, v1 = max(v - radius, 0), min(v + radius, grid.height - 1)
    window = grid.data[v0:v1 + 1, u0:u1 + 1].astype(np.float64)
    return window.reshape(-1, grid.dim).mean(axis=0)


def _cosine_scores(ref: np.ndarray, data64: np.ndarray, norms: np.ndarray,
                   candidate: np.ndarray) -> SimilarityMap:
    ref_norm = float(np.linalg.norm(ref))
    if ref_norm <= 0:
        raise ZeroReferenceDescriptor("reference descriptor has zero norm")
    valid = candidate & (norms > 0)
    score = np.zeros(norms.shape, dtype=np.float64)
    score[valid] = (data64[valid] @ ref) / (norms[valid] * ref_norm)
    return SimilarityMap(score=score, valid=valid)


def cosine_map(ref_desc, target: FeatureGrid, mask: DepthMask) -> SimilarityMap:
    """Cosine similarity of a reference descriptor against every valid pixel.

    Pixels with invalid depth or zero-norm descriptors are excluded from
    the candidate set. Scores are computed per pixel independently, so
    the result does not depend on evaluation order.
    """
    ref = np.asarray(ref_desc, dtype=np.float64).reshape(-1)
    if ref.shape[0] != target.dim:
        raise DimMismatch(f"descriptor dim {ref.shape[0]} != grid dim {target.dim}")
    if (mask.height, mask.width) != (target.height, target.width):
        raise DimMismatch("depth mask dimensions do not match the feature grid")
    data64, norms = _grid_cache(target)
    return _cosine_scores(ref, data64, norms, mask.valid)


def _grid_cache(grid: FeatureGrid):
    """float64 view + per-pixel norms, cached (grids are treated as immutable)."""
    cache = getattr(grid, "_cosine_cache", None)
    if cache is None:
        data64 = grid.data.astype(np.float64)
        norms = np.sqrt(np.einsum("hwd,hwd->hw", data64, data64))
        cache = (data64, norms)
        grid._cosine_cache = cache
    return cache


def hard_match(sim: SimilarityMap) -> PixelMatch:
    """Argmax pixel; ties broken by row-major scan order (smallest v, then u)."""
    if not sim.valid.any():
        raise NoValidPixels("similarity map has no valid pixels")
    masked = np.where(sim.valid, sim.score, -np.inf)
    idx = int(np.argmax(masked))
    v, u = divmod(idx, sim.width)
    return PixelMatch(u=float(u), v=float(v), peak_score=float(sim.score[v, u]), mode="hard")


def soft_match(sim: SimilarityMap, temperature: float) -> PixelMatch:
    """Soft-argmax: softmax-weighted mean of valid pixel coordinates.

    Scores are shifted by their maximum before exponentiation for
    numerical stability; the weighted sums run in row-major order.
    """
    if temperature <= 0:
        raise NonPositiveTemperature(f"temperature must be > 0, got {temperature}")
    if not sim.valid.any():
        raise NoValidPixels("similarity map has no valid pixels")
    vv, uu = np.nonzero(sim.valid)
    scores = sim.score[vv, uu]
    peak = float(scores.max())
    weights = np.exp((scores - peak) / temperature)
    total = float(weights.sum())
    u = float((weights * uu).sum() / total)
    v = float((weights * vv).sum() / total)
    return PixelMatch(u=u, v=v, peak_score=peak, mode="soft")


def match_keypoint(ref: FeatureGrid, ref_px, target: FeatureGrid,
                   target_mask: DepthMask, cfg: MatchConfig) -> PixelMatch:
    """Transfer one reference pixel onto the target grid.

    Window-averages the reference descriptor, builds the cosine map over
    valid target pixels, then applies the configured argmax.
    """
    ref_desc = window_average(ref, ref_px[0], ref_px[1], cfg.window_radius)
    sim = cosine_map(ref_desc, target, target_mask)
    if cfg.mode == "hard":
        return hard_match(sim)
    return soft_match(sim, cfg.temperature)


# ----------------------------------------------------------------------
# file I/O


def write_feature_grid(path, grid: FeatureGrid) -> None:
    meta_bytes = json.dumps(grid.meta, sort_keys=True).encode("utf-8")
    data = np.ascontiguousarray(grid.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FGRD_MAGIC)
        fh.write(struct.pack("<IIII", FILE_VERSION, grid.height, grid.width, grid.dim))
        fh.write(data.tobytes())
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)


def read_feature_grid(path) -> FeatureGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FGRD_MAGIC:
        raise FileFormatError(f"{path}: not a feature grid file")
    version, height, width, dim = struct.unpack_from("<IIII", raw, 4)
    if version != FILE_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    offset = 20
    count = height * width * dim
    end = offset + 4 * count
    if len(raw) < end + 4:
        raise FileFormatError(f"{path}: truncated feature grid")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    data = data.reshape(height, width, dim).copy()
    (meta_len,) = struct.unpack_from("<I", raw, end)
    meta_raw = raw[end + 4:end + 4 + meta_len]
    if len(meta_raw) != meta_len:
        raise FileFormatError(f"{path}: truncated metadata")
    meta = json.loads(meta_raw.decode("utf-8")) if meta_len else {}
    return FeatureGrid(data=data, meta=meta)


def write_depth_mask(path, mask: DepthMask) -> None:
    data = np.ascontiguousarray(mask.depth, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(DPTH_MAGIC)
        fh.write(struct.pack("<III", FILE_VERSION, mask.height, mask.width))
        fh.write(data.tobytes())


def read_depth_mask(path) -> DepthMask:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DPTH_MAGIC:
        raise FileFormatError(f"{path}: not a depth file")
    version, height, width = struct.unpack_from("<III", raw, 4)
    if version != FILE_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    count = height * width
    if len(raw) != 16 + 4 * count:
        raise FileFormatError(f"{path}: wrong payload size")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=16)
    return DepthMask(depth=data.reshape(height, width).astype(np.float64))
