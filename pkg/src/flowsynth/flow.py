"""Dense optical flow: estimation, ``.flo`` persistence, colorization and QC stats.

A flow field is an ``(H, W, 2)`` float array of per-pixel ``(u, v)`` displacements
in pixels (``u`` horizontal, ``v`` vertical), aligned with the source frame.
"""
import hashlib
import struct
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from scipy.fft import dctn

from . import adapters
from .errors import (
    BadMagic,
    DimensionMismatch,
    DimensionOverflow,
    EstimatorUnavailable,
    FlowFormatError,
    TruncatedFile,
)
from .imaging import read_image, write_image

FLO_MAGIC = 202021.25
FLO_HEADER_BYTES = 12
# 2 GiB payload cap; anything larger is a corrupt header, not a real field.
_MAX_FLO_PIXELS = (1 << 31) // 8


def as_flow(flow) -> np.ndarray:
    arr = np.asarray(flow)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise DimensionMismatch(f"flow must have shape (H, W, 2), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


def zero_flow(height, width, dtype=np.float32):
    return np.zeros((height, width, 2), dtype=dtype)


def endpoint_error(flow, gt) -> np.ndarray:
    flow, gt = as_flow(flow), as_flow(gt)
    if flow.shape != gt.shape:
        raise DimensionMismatch(f"flow {flow.shape} vs gt {gt.shape}")
    d = flow.astype(np.float64) - gt.astype(np.float64)
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


# ---------------------------------------------------------------- .flo format

def write_flo(flow, path) -> None:
    flow = as_flow(flow)
    if not np.all(np.isfinite(flow)):
        raise FlowFormatError("refusing to write non-finite flow")
    h, w = flow.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < FLO_HEADER_BYTES:
        raise TruncatedFile(f"{path}: {len(data)} bytes, header needs {FLO_HEADER_BYTES}")
    magic, w, h = struct.unpack("<fii", data[:FLO_HEADER_BYTES])
    if magic != np.float32(FLO_MAGIC):
        raise BadMagic(f"{path}: magic {magic!r} != {FLO_MAGIC}")
    if w <= 0 or h <= 0 or w * h > _MAX_FLO_PIXELS:
        raise DimensionOverflow(f"{path}: implausible dimensions {w}x{h}")
    need = FLO_HEADER_BYTES + w * h * 8
    if len(data) < need:
        raise TruncatedFile(f"{path}: {len(data)} bytes, expected {need}")
    arr = np.frombuffer(data, dtype="<f4", count=w * h * 2, offset=FLO_HEADER_BYTES)
    return arr.reshape(h, w, 2).astype(np.float32)


# ------------------------------------------------------------ block matching

def _candidates(radius):
    offsets = [(du, dv) for dv in range(-radius, radius + 1) for du in range(-radius, radius + 1)]
    # raster index is the secondary key, so the stable sort keeps row-major order
    return sorted(offsets, key=lambda o: abs(o[0]) + abs(o[1]))


def _box_sum(a, size):
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1), dtype=a.dtype)
    s[1:, 1:] = a.cumsum(0).cumsum(1)
    return s[size:, size:] - s[:-size, size:] - s[size:, :-size] + s[:-size, :-size]


def block_match_flow(src, tgt, search_radius=4, patch=7) -> np.ndarray:
    """Integer-displacement flow minimizing patch SSD within a square search window.

    Ties go to the smallest ``|u| + |v|``, then to the first candidate in
    row-major order. SSD is accumulated in int64 so equal costs compare exactly.
    """
    if search_radius < 1:
        raise ValueError("search_radius must be >= 1")
    if patch < 3 or patch % 2 == 0:
        raise ValueError("patch must be odd and >= 3")
    a = np.asarray(src)
    b = np.asarray(tgt)
    if a.shape != b.shape:
        raise DimensionMismatch(f"frames differ: {a.shape} vs {b.shape}")
    if a.shape[0] < patch or a.shape[1] < patch:
        raise DimensionMismatch(f"frames {a.shape[:2]} smaller than patch {patch}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    a = a.astype(np.int64)
    b = b.astype(np.int64)
    H, W = a.shape[:2]
    half = patch // 2
    pad = search_radius + half
    ap = np.pad(a, ((half, half), (half, half), (0, 0)), mode="edge")
    bp = np.pad(b, ((pad, pad), (pad, pad), (0, 0)), mode="edge")

    best = np.full((H, W), np.iinfo(np.int64).max, dtype=np.int64)
    flow = np.zeros((H, W, 2), dtype=np.float32)
    for du, dv in _candidates(search_radius):
        y0 = search_radius + dv
        x0 = search_radius + du
        shifted = bp[y0 : y0 + H + 2 * half, x0 : x0 + W + 2 * half]
        ssd = _box_sum(((ap - shifted) ** 2).sum(axis=-1), patch)
        better = ssd < best
        best[better] = ssd[better]
        flow[better] = (du, dv)
    return flow


# --------------------------------------------------------- estimator registry

class BlockMatchEstimator:
    name = "block_match"
    reentrant = True

    def __init__(self, search_radius=4, patch=7):
        self.search_radius = search_radius
        self.patch = patch

    def estimate(self, src, tgt):
        return block_match_flow(src, tgt, self.search_radius, self.patch)


def _pair_key(src, tgt):
    h = hashlib.blake2b(digest_size=16)
    for arr in (src, tgt):
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


class FixtureEstimator:
    """Replays recorded flows for known frame pairs (bit-exact pass-through)."""

    name = "fixture"
    reentrant = True

    def __init__(self):
        self._flows = {}

    def add(self, src, tgt, flow):
        self._flows[_pair_key(src, tgt)] = as_flow(flow)

    @classmethod
    def from_dir(cls, directory):
        """Load ``pairs.tsv`` lines of ``src.png<TAB>tgt.png<TAB>flow.flo`` (relative paths)."""
        directory = Path(directory)
        est = cls()
        for line in (directory / "pairs.tsv").read_text().splitlines():
            if not line.strip():
                continue
            s, t, f = line.split("\t")
            est.add(read_image(directory / s), read_image(directory / t), read_flo(directory / f))
        return est

    def estimate(self, src, tgt):
        try:
            return self._flows[_pair_key(src, tgt)].copy()
        except KeyError:
            raise EstimatorUnavailable("no recorded flow for this frame pair") from None


class ExternalEstimator:
    """Learned estimator behind an adapter: ``<cmd> src.png tgt.png out.flo``."""

    reentrant = False

    def __init__(self, name, command=None, timeout=None):
        self.name = name
        self.command = command or adapters.find_adapter("flowsynth-flow", name)
        if self.command is None:
            raise EstimatorUnavailable(
                f"no adapter 'flowsynth-flow-{name}' on ${adapters.ADAPTER_PATH_ENV}"
            )
        self.timeout = timeout

    def estimate(self, src, tgt):
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            write_image(tmp / "src.png", src)
            write_image(tmp / "tgt.png", tgt)
            proc = adapters.run_adapter(
                self.command, [tmp / "src.png", tmp / "tgt.png", tmp / "out.flo"], self.timeout
            )
            if proc.returncode != 0 or not (tmp / "out.flo").exists():
                raise EstimatorUnavailable(
                    f"estimator {self.name} failed (exit {proc.returncode}): {proc.stderr.strip()}"
                )
            return read_flo(tmp / "out.flo")


class _Serialized:
    """Wraps a non-reentrant estimator so concurrent callers take turns."""

    def __init__(self, inner):
        self.inner = inner
        self.name = inner.name
        self.reentrant = True
        self._lock = threading.Lock()

    def estimate(self, src, tgt):
        with self._lock:
            return self.inner.estimate(src, tgt)


_ESTIMATORS = {
    "block_match": BlockMatchEstimator,
}


def register_estimator(name, factory):
    _ESTIMATORS[name] = factory


def get_estimator(name, **kwargs):
    """Instantiate a registered estimator; unknown names fall back to an adapter lookup."""
    if name in _ESTIMATORS:
        est = _ESTIMATORS[name](**kwargs)
    else:
        est = ExternalEstimator(name, **kwargs)
    return _registered(est)


def _registered(est):
    if not hasattr(est, "reentrant"):
        raise EstimatorUnavailable(f"estimator {est!r} does not declare reentrancy")
    return est if est.reentrant else _Serialized(est)


def estimate_flow(src_frame, tgt_frame, estimator="block_match") -> np.ndarray:
    if isinstance(estimator, str):
        estimator = get_estimator(estimator)
    elif not isinstance(estimator, _Serialized):
        estimator = _registered(estimator)
    src_frame = np.asarray(src_frame)
    tgt_frame = np.asarray(tgt_frame)
    if src_frame.shape != tgt_frame.shape:
        raise DimensionMismatch(f"frames differ: {src_frame.shape} vs {tgt_frame.shape}")
    flow = as_flow(estimator.estimate(src_frame, tgt_frame))
    if flow.shape[:2] != src_frame.shape[:2]:
        raise DimensionMismatch(
            f"estimator {estimator.name} returned {flow.shape[:2]}, frames are {src_frame.shape[:2]}"
        )
    return flow


# ------------------------------------------------------------ visualization

def colorize_flow(flow, max_magnitude=None) -> np.ndarray:
    """Render flow as uint8 RGB: hue = direction atan2(v, u), saturation = magnitude.

    Magnitudes are normalized by ``max_magnitude`` (default: the field's 99th
    percentile magnitude, or its maximum when that percentile is zero). Zero
    motion is white.
    """
    flow = as_flow(flow).astype(np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(np.percentile(mag, 99)) if mag.size else 0.0
        if max_magnitude <= 0:
            max_magnitude = float(mag.max()) if mag.size else 0.0
    if max_magnitude <= 0:
        return np.full(flow.shape[:2] + (3,), 255, dtype=np.uint8)
    hue = np.mod(np.arctan2(v, u), 2 * np.pi) / (2 * np.pi)
    sat = np.clip(mag / max_magnitude, 0.0, 1.0)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    return np.rint(hsv_to_rgb(hsv) * 255).astype(np.uint8)


# ------------------------------------------------------------------ QC stats

@dataclass
class FlowStats:
    mean_epe: float | None
    max_epe: float | None
    smoothness: float
    checkerboard_score: float

    def as_dict(self):
        return {
            "mean_epe": self.mean_epe,
            "max_epe": self.max_epe,
            "smoothness": self.smoothness,
            "checkerboard_score": self.checkerboard_score,
        }


def _hf_energy_ratio(channel, block=8):
    h, w = channel.shape
    bh, bw = (block, block) if h >= block and w >= block else (h, w)
    ny, nx = h // bh, w // bw
    tiles = channel[: ny * bh, : nx * bw].reshape(ny, bh, nx, bw).transpose(0, 2, 1, 3)
    coeffs = dctn(tiles, type=2, axes=(2, 3), norm="ortho")
    energy = coeffs**2
    total = energy.sum()
    if total <= 0:
        return 0.0
    return float(energy[:, :, bh // 2 :, bw // 2 :].sum() / total)


def checkerboard_score(flow) -> float:
    """Share of 8x8 block-DCT energy in the highest-frequency quadrant, averaged over u and v."""
    flow = as_flow(flow).astype(np.float64)
    return 0.5 * (_hf_energy_ratio(flow[..., 0]) + _hf_energy_ratio(flow[..., 1]))


def smoothness(flow) -> float:
    flow = as_flow(flow).astype(np.float64)
    if min(flow.shape[:2]) < 2:
        return 0.0
    uy, ux = np.gradient(flow[..., 0])
    vy, vx = np.gradient(flow[..., 1])
    return float(np.mean(np.sqrt(ux**2 + uy**2 + vx**2 + vy**2)))


def flow_stats(flow, gt=None) -> FlowStats:
    flow = as_flow(flow)
    mean_epe = max_epe = None
    if gt is not None:
        epe = endpoint_error(flow, gt)
        mean_epe, max_epe = float(epe.mean()), float(epe.max())
    return FlowStats(mean_epe, max_epe, smoothness(flow), checkerboard_score(flow))


def affine_fit_residual(flow) -> np.ndarray:
    """Per-pixel distance between ``flow`` and its least-squares global affine fit."""
    flow = as_flow(flow).astype(np.float64)
    h, w = flow.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # centre coordinates to keep the normal equations well conditioned
    design = np.stack([xs.ravel() - w / 2, ys.ravel() - h / 2, np.ones(h * w)], axis=1)
    target = flow.reshape(-1, 2)
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    resid = target - design @ coef
    return np.hypot(resid[:, 0], resid[:, 1]).reshape(h, w)
