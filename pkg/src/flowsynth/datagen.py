"""Target-frame generation from a single source image.

Four interchangeable backends produce a :class:`GeneratedClip`:

* ``replicate``    -- every frame is the source (identity; useful as a control)
* ``geometric``    -- affine + thin-plate-spline warps with analytic flow
* ``rigid_oracle`` -- the masked object translates over an inpainted background,
  with analytic object-shaped flow
* ``diffusion``    -- an external image-to-video generator reached through an
  adapter executable or a directory of recorded frames
"""
import hashlib
import json
import math
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import adapters
from .errors import (
    BackendFailure,
    BackendUnavailable,
    ConfigInvalid,
    DimensionMismatch,
    EmptyMask,
    ObjectOutOfFrame,
    SingularTransform,
)
from .flow import read_flo, write_flo
from .imaging import read_image, read_mask, resize_bilinear, write_image, write_mask

BACKEND_KINDS = ("diffusion", "geometric", "rigid_oracle", "replicate")


@dataclass
class SourceSample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    origin: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.uint8)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DimensionMismatch(f"{self.id}: image must be H x W x 3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DimensionMismatch(
                f"{self.id}: mask {self.mask.shape} vs image {self.image.shape[:2]}"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"{self.id}: mask values must be 0 or 1")
        self.mask = self.mask.astype(np.uint8)

    @property
    def shape(self):
        return self.image.shape[:2]

    @classmethod
    def load(cls, image_path, mask_path, id=None, origin=""):
        return cls(id or Path(image_path).stem, read_image(image_path), read_mask(mask_path), origin)


@dataclass
class GeneratorConfig:
    frames: int = 14
    height: int = 576
    width: int = 1024
    frame_rate: int = 7
    sampler_steps: int = 25
    guidance_first: float = 3.0
    guidance_last: float = 1.0
    decode_chunk: int = 8
    seed: int = 0

    def validate(self):
        if self.frames < 1:
            raise ConfigInvalid("frames must be >= 1")
        if self.height < 1 or self.width < 1:
            raise ConfigInvalid("resolution components must be positive")
        if self.sampler_steps < 1:
            raise ConfigInvalid("sampler_steps must be >= 1")
        if self.decode_chunk < 1 or self.frame_rate < 1:
            raise ConfigInvalid("decode_chunk and frame_rate must be positive")
        return self


@dataclass
class GeneratedClip:
    source_id: str
    frames: list
    backend: str
    gt_flows: list | None = None

    def __post_init__(self):
        if self.backend not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.backend!r}")
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise DimensionMismatch(f"{self.source_id}: frames differ in shape {shapes}")
        if self.gt_flows is not None:
            if len(self.gt_flows) != len(self.frames):
                raise DimensionMismatch(f"{self.source_id}: gt_flows/frames count differ")
            for fl in self.gt_flows:
                if fl.shape != self.frames[0].shape[:2] + (2,):
                    raise DimensionMismatch(f"{self.source_id}: gt flow shape {fl.shape}")

    @property
    def T(self):
        return len(self.frames)


def derive_seed(global_seed, source_id):
    """Per-sample seed that does not depend on processing order."""
    digest = hashlib.blake2b(f"{int(global_seed)}:{source_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def default_schedule(T):
    return [t / T for t in range(1, T + 1)]


# ------------------------------------------------------------------ geometric

@dataclass
class GeometricParams:
    """Affine parameters (about the image centre) plus optional TPS jitter.

    Frame ``t`` applies the transform scaled by ``schedule[t]``: rotation, shear,
    translation and TPS displacements are multiplied by it, and the scale is
    interpolated from 1.
    """

    rotation: float = 0.0
    scale: float = 1.0
    shear: float = 0.0
    translation: tuple = (0.0, 0.0)
    tps_grid: int = 0
    tps_std: float = 0.0
    tps_seed: int = 0
    schedule: list | None = None

    def validate(self, T=None):
        if not self.scale > 0:
            raise ConfigInvalid("scale must be > 0")
        if self.tps_grid != 0 and self.tps_grid < 2:
            raise ConfigInvalid("tps_grid must be 0 (off) or >= 2")
        if self.tps_std < 0:
            raise ConfigInvalid("tps_std must be >= 0")
        if self.schedule is not None:
            s = np.asarray(self.schedule, dtype=float)
            if s.size and (s.min() < 0 or s.max() > 1 or np.any(np.diff(s) < 0)):
                raise ConfigInvalid("schedule must be monotone within [0, 1]")
            if T is not None and len(s) != T:
                raise ConfigInvalid(f"schedule has {len(s)} entries for {T} frames")
        for s in self._schedule(T or 1):
            if abs(np.linalg.det(self.matrix(s))) < 1e-6:
                raise SingularTransform(f"|det A| < 1e-6 at schedule value {s}")
        return self

    def _schedule(self, T):
        return list(self.schedule) if self.schedule is not None else default_schedule(T)

    def matrix(self, s=1.0):
        theta = self.rotation * s
        k = 1.0 + (self.scale - 1.0) * s
        c, sn = math.cos(theta), math.sin(theta)
        rot = np.array([[c, -sn], [sn, c]])
        shear = np.array([[1.0, self.shear * s], [0.0, 1.0]])
        return rot @ (k * shear)

    @classmethod
    def sample(cls, rng, height, width, tps_grid=0, tps_std=0.0):
        """Draw parameters from the default augmentation ranges."""
        return cls(
            rotation=float(rng.uniform(-np.pi / 12, np.pi / 12)),
            scale=float(rng.uniform(0.9, 1.1)),
            shear=float(rng.uniform(-0.1, 0.1)),
            translation=(
                float(rng.uniform(-0.05, 0.05) * width),
                float(rng.uniform(-0.05, 0.05) * height),
            ),
            tps_grid=tps_grid,
            tps_std=tps_std,
            tps_seed=int(rng.integers(0, 2**31)),
        )


def _tps_kernel(r2):
    # U(r) = r^2 log r, written in r^2 to avoid a sqrt
    with np.errstate(divide="ignore", invalid="ignore"):
        out = 0.5 * r2 * np.log(r2)
    return np.where(r2 > 0, out, 0.0)


def tps_displacement(height, width, grid, std, seed):
    """Dense displacement interpolating random control-point offsets with a TPS."""
    if grid == 0 or std == 0:
        return np.zeros((height, width, 2))
    rng = np.random.default_rng(seed)
    scale = float(max(height, width))
    gx, gy = np.meshgrid(np.linspace(0, width - 1, grid), np.linspace(0, height - 1, grid))
    ctrl = np.stack([gx.ravel(), gy.ravel()], axis=1) / scale
    disp = rng.normal(0.0, std, size=(len(ctrl), 2))
    n = len(ctrl)
    K = _tps_kernel(((ctrl[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1))
    P = np.hstack([np.ones((n, 1)), ctrl])
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = K
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = disp
    coef = np.linalg.solve(L, rhs)
    ys, xs = np.mgrid[0:height, 0:width]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1) / scale
    U = _tps_kernel(((pts[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1))
    out = U @ coef[:n] + np.hstack([np.ones((len(pts), 1)), pts]) @ coef[n:]
    return out.reshape(height, width, 2)


def _warp(image, coords_x, coords_y):
    out = np.empty(image.shape, dtype=np.float64)
    for c in range(image.shape[2]):
        out[..., c] = ndimage.map_coordinates(
            image[..., c].astype(np.float64), [coords_y, coords_x], order=1, mode="nearest"
        )
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def geometric_clip(source, params, T):
    """Warp the source with an interpolated affine+TPS transform; flows are analytic.

    The flow at source pixel ``p`` is ``A (p - c) + c + b + d(p) - p`` where
    ``c`` is the image centre and ``d`` the TPS displacement.
    """
    params.validate(T)
    h, w = source.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    px, py = xs - cx, ys - cy
    tps = tps_displacement(h, w, params.tps_grid, params.tps_std, params.tps_seed)
    frames, flows = [], []
    for s in params._schedule(T):
        A = params.matrix(s)
        B = A - np.eye(2)
        bx, by = params.translation[0] * s, params.translation[1] * s
        flow = np.empty((h, w, 2))
        flow[..., 0] = B[0, 0] * px + B[0, 1] * py + bx + s * tps[..., 0]
        flow[..., 1] = B[1, 0] * px + B[1, 1] * py + by + s * tps[..., 1]
        flows.append(flow)
        frames.append(_render_forward(source.image, A, (bx, by), s * tps, (cx, cy)))
    return GeneratedClip(source.id, frames, "geometric", flows)


def _render_forward(image, A, b, tps, centre, iterations=8):
    """Backward-sample the target frame by inverting the forward map per pixel."""
    h, w = image.shape[:2]
    cx, cy = centre
    Ainv = np.linalg.inv(A)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    qx, qy = xs - cx - b[0], ys - cy - b[1]
    sx = Ainv[0, 0] * qx + Ainv[0, 1] * qy + cx
    sy = Ainv[1, 0] * qx + Ainv[1, 1] * qy + cy
    if np.any(tps):
        # fixed point of p = A^-1 (q - c - b - d(p)) + c
        for _ in range(iterations):
            dx = ndimage.map_coordinates(tps[..., 0], [sy, sx], order=1, mode="nearest")
            dy = ndimage.map_coordinates(tps[..., 1], [sy, sx], order=1, mode="nearest")
            rx, ry = qx - dx, qy - dy
            sx = Ainv[0, 0] * rx + Ainv[0, 1] * ry + cx
            sy = Ainv[1, 0] * rx + Ainv[1, 1] * ry + cy
    return _warp(image, sx, sy)


# --------------------------------------------------------------- rigid oracle

@dataclass
class MotionSpec:
    """Per-frame integer (dx, dy) increments; frame t shows the cumulative offset."""

    displacement_schedule: list = field(default_factory=list)
    background_fill: str = "nearest"

    def offsets(self):
        steps = np.asarray(self.displacement_schedule, dtype=float).reshape(-1, 2)
        if not np.array_equal(steps, np.round(steps)):
            raise ConfigInvalid("rigid oracle displacements must be integers")
        return np.cumsum(steps.astype(np.int64), axis=0)

    @classmethod
    def constant(cls, dx, dy, T, background_fill="nearest"):
        return cls([(dx, dy)] * T, background_fill)


def fill_background(image, mask, mode="nearest"):
    if mode == "hold" or not mask.any() or mask.all():
        return image.copy()
    if mode != "nearest":
        raise ConfigInvalid(f"unknown background_fill {mode!r}")
    _, (iy, ix) = ndimage.distance_transform_edt(mask.astype(bool), return_indices=True)
    return image[iy, ix]


def rigid_object_clip(source, spec):
    if not spec.displacement_schedule:
        raise ConfigInvalid("displacement_schedule is empty")
    mask = source.mask.astype(bool)
    if not mask.any():
        raise EmptyMask(f"{source.id}: mask is empty")
    h, w = source.shape
    ys, xs = np.nonzero(mask)
    offsets = spec.offsets()
    for t, (ox, oy) in enumerate(offsets, start=1):
        ny, nx = ys + oy, xs + ox
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        if inside.mean() < 0.5:
            raise ObjectOutOfFrame(
                f"{source.id}: frame {t} offset ({ox}, {oy}) leaves {inside.mean():.0%} in frame"
            )
    background = fill_background(source.image, mask, spec.background_fill)
    frames, flows = [], []
    for ox, oy in offsets:
        ny, nx = ys + oy, xs + ox
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        frame = background.copy()
        frame[ny[inside], nx[inside]] = source.image[ys[inside], xs[inside]]
        flow = np.zeros((h, w, 2))
        flow[mask] = (ox, oy)
        frames.append(frame)
        flows.append(flow)
    return GeneratedClip(source.id, frames, "rigid_oracle", flows)


# ------------------------------------------------------------------- backends

class ReplicateBackend:
    kind = "replicate"
    deterministic = True

    def generate(self, source, config, seed):
        return GeneratedClip(source.id, [source.image.copy() for _ in range(config.frames)], self.kind)


class GeometricBackend:
    kind = "geometric"
    deterministic = True

    def __init__(self, params=None, tps_grid=4, tps_std=0.01):
        self.params = params
        self.tps_grid = tps_grid
        self.tps_std = tps_std

    def generate(self, source, config, seed):
        params = self.params
        if params is None:
            params = GeometricParams.sample(
                np.random.default_rng(seed), *source.shape, self.tps_grid, self.tps_std
            )
        return geometric_clip(source, params, config.frames)


class RigidOracleBackend:
    kind = "rigid_oracle"
    deterministic = True

    def __init__(self, spec=None, max_step=2):
        self.spec = spec
        self.max_step = max_step

    def generate(self, source, config, seed):
        spec = self.spec
        if spec is None:
            rng = np.random.default_rng(seed)
            step = rng.integers(-self.max_step, self.max_step + 1, size=2)
            if not step.any():
                step[0] = self.max_step
            spec = MotionSpec.constant(int(step[0]), int(step[1]), config.frames)
        if len(spec.displacement_schedule) != config.frames:
            raise ConfigInvalid(
                f"MotionSpec has {len(spec.displacement_schedule)} steps for {config.frames} frames"
            )
        return rigid_object_clip(source, spec)


class DiffusionBackend:
    """External image-to-video generator.

    The adapter is called as ``<cmd> <record.json>``; the record carries the
    source path, seed and every :class:`GeneratorConfig` field, plus
    ``output_dir``. The adapter must write ``<output_dir>/<source_id>/frame_001.png``
    through ``frame_{T:03d}.png``. Alternatively ``fixture_dir`` holds
    previously recorded frames in the same layout.
    """

    kind = "diffusion"

    def __init__(self, model="svd", command=None, fixture_dir=None, deterministic=True, timeout=None):
        self.model = model
        self.command = command
        self.fixture_dir = Path(fixture_dir) if fixture_dir else None
        self.deterministic = deterministic
        self.timeout = timeout
        if self.fixture_dir is None and self.command is None:
            self.command = adapters.find_adapter("flowsynth-gen", model)
            if self.command is None:
                raise BackendUnavailable(
                    f"no generator adapter 'flowsynth-gen-{model}' on ${adapters.ADAPTER_PATH_ENV}"
                    " and no fixture_dir given"
                )

    @staticmethod
    def record(source_id, source_path, config, seed, output_dir):
        return {
            "source_id": source_id,
            "source_path": str(source_path),
            "seed": int(seed),
            "frames": config.frames,
            "resolution": [config.height, config.width],
            "sampler_steps": config.sampler_steps,
            "guidance_first": config.guidance_first,
            "guidance_last": config.guidance_last,
            "frame_rate": config.frame_rate,
            "decode_chunk": config.decode_chunk,
            "output_dir": str(output_dir),
        }

    def generate(self, source, config, seed):
        if self.fixture_dir is not None:
            clip_dir = self.fixture_dir / source.id
            if not clip_dir.is_dir():
                raise BackendUnavailable(f"no recorded frames for {source.id} in {self.fixture_dir}")
            frames = self._collect(clip_dir, config.frames, "")
        else:
            with tempfile.TemporaryDirectory() as tmp:
                tmp = Path(tmp)
                src_path = tmp / "source.png"
                write_image(src_path, source.image)
                rec_path = tmp / "record.json"
                rec_path.write_text(
                    json.dumps(self.record(source.id, src_path, config, seed, tmp / "out"))
                )
                proc = adapters.run_adapter(self.command, [rec_path], self.timeout)
                diag = f"stdout:\n{proc.stdout}\nstderr:\n{proc.stderr}"
                if proc.returncode != 0:
                    raise BackendFailure(
                        f"generator exited with status {proc.returncode} for {source.id}", diag
                    )
                frames = self._collect(tmp / "out" / source.id, config.frames, diag)
        h, w = source.shape
        frames = [resize_bilinear(f, h, w) for f in frames]
        return GeneratedClip(source.id, frames, self.kind)

    @staticmethod
    def _collect(clip_dir, T, diag):
        frames = []
        for t in range(1, T + 1):
            path = clip_dir / f"frame_{t:03d}.png"
            if not path.exists():
                raise BackendFailure(f"generator did not produce {path.name}", diag)
            frames.append(read_image(path))
        return frames


_BACKENDS = {
    "replicate": ReplicateBackend,
    "geometric": GeometricBackend,
    "rigid_oracle": RigidOracleBackend,
    "diffusion": DiffusionBackend,
}


def get_backend(name, **kwargs):
    try:
        factory = _BACKENDS[name]
    except KeyError:
        raise BackendUnavailable(f"backend {name!r} is not registered") from None
    return factory(**kwargs)


def register_backend(name, factory):
    _BACKENDS[name] = factory


def generate_clip(source, config, backend):
    """Produce ``config.frames`` target frames for ``source`` with ``backend``.

    ``backend`` is a backend instance or a registered name. The backend sees a
    seed derived from ``(config.seed, source.id)``.
    """
    config.validate()
    if isinstance(backend, str):
        backend = get_backend(backend)
    seed = derive_seed(config.seed, source.id)
    clip = backend.generate(source, config, seed)
    if clip.T != config.frames:
        raise BackendFailure(f"{source.id}: backend returned {clip.T} frames, expected {config.frames}")
    if clip.frames[0].shape != source.image.shape:
        raise BackendFailure(
            f"{source.id}: frame shape {clip.frames[0].shape} != source {source.image.shape}"
        )
    return clip


# ---------------------------------------------------------------- persistence

CLIP_META = "clip.json"


def save_clip(clip, source, root, seed=None, config=None):
    """Write a clip to ``root/<source_id>/``; ``clip.json`` is written last and marks completion."""
    d = Path(root) / clip.source_id
    d.mkdir(parents=True, exist_ok=True)
    write_image(d / "source.png", source.image)
    write_mask(d / "mask.png", source.mask)
    for t, frame in enumerate(clip.frames, start=1):
        write_image(d / f"frame_{t:03d}.png", frame)
    if clip.gt_flows is not None:
        for t, fl in enumerate(clip.gt_flows, start=1):
            write_flo(fl, d / f"gt_flow_{t:03d}.flo")
    meta = {
        "source_id": clip.source_id,
        "backend": clip.backend,
        "frames": clip.T,
        "has_gt_flow": clip.gt_flows is not None,
        "seed": seed,
        "config": asdict(config) if config is not None else None,
    }
    (d / CLIP_META).write_text(json.dumps(meta, indent=2))
    return d


def clip_complete(root, source_id):
    return (Path(root) / source_id / CLIP_META).exists()


def load_clip(clip_dir):
    """Inverse of :func:`save_clip`; returns ``(source, clip, meta)``."""
    d = Path(clip_dir)
    meta = json.loads((d / CLIP_META).read_text())
    source = SourceSample(meta["source_id"], read_image(d / "source.png"), read_mask(d / "mask.png"))
    T = meta["frames"]
    frames = [read_image(d / f"frame_{t:03d}.png") for t in range(1, T + 1)]
    gt = None
    if meta.get("has_gt_flow"):
        gt = [read_flo(d / f"gt_flow_{t:03d}.flo") for t in range(1, T + 1)]
    return source, GeneratedClip(meta["source_id"], frames, meta["backend"], gt), meta
