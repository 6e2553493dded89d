"""Image-flow-mask triplets: assembly, on-disk manifests, stats and mixed sampling.

Manifest format (line-delimited JSON): the first line is a header
``{"kind": "header", "schema_version", "name", "fingerprint", "counts"}``;
each following line is a record
``{"image_path", "flow_path", "mask_path", "source_id", "t", "provenance"}``
with paths relative to the manifest file.
"""
import json
import os
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    ConfigInvalid,
    CorruptManifest,
    CountMismatch,
    DimensionMismatch,
    EmptyDataset,
    MissingMask,
    SingleFrameVideo,
)
from .flow import as_flow, estimate_flow, read_flo, write_flo
from .imaging import read_image, read_mask, write_image, write_mask

SCHEMA_VERSION = 1
PROVENANCES = ("synthetic", "real")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Triplet:
    image: np.ndarray
    flow: np.ndarray
    mask: np.ndarray
    source_id: str
    t: int
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        hw = self.image.shape[:2]
        if self.flow.shape[:2] != hw or self.mask.shape != hw:
            raise DimensionMismatch(
                f"{self.source_id}/{self.t}: image {hw}, flow {self.flow.shape[:2]}, mask {self.mask.shape}"
            )


@dataclass(frozen=True)
class TripletRecord:
    image_path: str
    flow_path: str
    mask_path: str
    source_id: str
    t: int
    provenance: str


class DatasetManifest:
    def __init__(self, name, records, fingerprint=None, root=None):
        self.name = name
        self.records = list(records)
        self.fingerprint = dict(fingerprint or {})
        self.root = Path(root) if root is not None else Path(".")

    def __len__(self):
        return len(self.records)

    def __repr__(self):
        return f"DatasetManifest({self.name!r}, {len(self.records)} records)"

    @property
    def counts(self):
        per_source = Counter(r.source_id for r in self.records)
        lengths = set(per_source.values())
        return {
            "n_sources": len(per_source),
            "T": lengths.pop() if len(lengths) == 1 else None,
            "n_triplets": len(self.records),
        }

    def resolve(self, rel):
        return self.root / rel

    def load_triplet(self, index):
        r = self.records[index]
        return Triplet(
            read_image(self.resolve(r.image_path)),
            read_flo(self.resolve(r.flow_path)),
            read_mask(self.resolve(r.mask_path)),
            r.source_id,
            r.t,
            r.provenance,
        )

    def header(self):
        return {
            "kind": "header",
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "fingerprint": self.fingerprint,
            "counts": self.counts,
        }

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w") as f:
            f.write(json.dumps(self.header()) + "\n")
            for r in self.records:
                f.write(json.dumps(asdict(r)) + "\n")
        os.replace(tmp, path)
        self.root = path.parent
        return path

    @classmethod
    def load(cls, path, check_files=True):
        path = Path(path)
        try:
            lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
            header = json.loads(lines[0])
            records = [TripletRecord(**json.loads(ln)) for ln in lines[1:]]
        except (OSError, IndexError, ValueError, TypeError) as exc:
            raise CorruptManifest(f"{path}: {exc}") from exc
        if header.get("kind") != "header" or header.get("schema_version") != SCHEMA_VERSION:
            raise CorruptManifest(f"{path}: missing header or unsupported schema version")
        m = cls(header["name"], records, header.get("fingerprint"), path.parent)
        if header.get("counts") != m.counts:
            raise CorruptManifest(f"{path}: header counts {header.get('counts')} != records {m.counts}")
        if check_files:
            for r in records:
                for rel in (r.image_path, r.flow_path, r.mask_path):
                    if not m.resolve(rel).exists():
                        raise CorruptManifest(f"{path}: missing file {rel}")
        return m


# ------------------------------------------------------------------ synthetic

def build_triplets(source, clip, flows):
    """Pair the source image and mask with each source->target flow."""
    if len(flows) != clip.T:
        raise CountMismatch(f"{source.id}: {len(flows)} flows for {clip.T} frames")
    triplets = []
    for t, flow in enumerate(flows, start=1):
        flow = as_flow(flow)
        if flow.shape[:2] != source.shape:
            raise DimensionMismatch(f"{source.id}: flow {t} is {flow.shape[:2]}, source {source.shape}")
        triplets.append(Triplet(source.image, flow, source.mask, source.id, t, "synthetic"))
    return triplets


def write_source_triplets(root, triplets):
    """Write one source's triplets under ``root/<source_id>/``; the image and mask are stored once."""
    root = Path(root)
    first = triplets[0]
    d = root / first.source_id
    write_image(d / "image.png", first.image)
    write_mask(d / "mask.png", first.mask)
    records = []
    for tr in triplets:
        flow_name = f"flow_{tr.t:03d}.flo"
        write_flo(tr.flow, d / flow_name)
        records.append(TripletRecord(
            f"{tr.source_id}/image.png", f"{tr.source_id}/{flow_name}", f"{tr.source_id}/mask.png",
            tr.source_id, tr.t, tr.provenance,
        ))
    return records


def write_dataset(root, name, triplet_groups, fingerprint=None):
    """Persist groups of triplets (one group per source) and their manifest."""
    root = Path(root)
    records = []
    for group in sorted(triplet_groups, key=lambda g: g[0].source_id):
        records.extend(write_source_triplets(root, group))
    manifest = DatasetManifest(name, records, fingerprint, root)
    manifest.save(root / "manifest.jsonl")
    return manifest


# ----------------------------------------------------------------------- real

def _images_in(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _find_mask(mask_dir, stem):
    for suffix in IMAGE_SUFFIXES:
        p = Path(mask_dir) / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def video_flows(frames, estimator):
    """Consecutive-frame flows ``t -> t+1``; the last frame reuses the penultimate flow."""
    if len(frames) < 2:
        raise SingleFrameVideo("need at least 2 frames")
    flows = [estimate_flow(frames[t], frames[t + 1], estimator) for t in range(len(frames) - 1)]
    flows.append(flows[-1].copy())
    return flows


def ingest_video(frames_dir, masks_dir, estimator, out_dir, name=None):
    """Turn ``frames_dir/<video>/*`` + ``masks_dir/<video>/*`` into a real-provenance dataset.

    Frames and masks stay where they are; flows are written to ``out_dir/<video>/``.
    """
    frames_dir, masks_dir, out_dir = Path(frames_dir), Path(masks_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for vdir in sorted(p for p in frames_dir.iterdir() if p.is_dir()):
        frame_paths = _images_in(vdir)
        if len(frame_paths) < 2:
            raise SingleFrameVideo(f"{vdir.name}: {len(frame_paths)} frame(s)")
        mask_paths = []
        for fp in frame_paths:
            mp = _find_mask(masks_dir / vdir.name, fp.stem)
            if mp is None:
                raise MissingMask(f"{vdir.name}: no mask for frame {fp.name}")
            mask_paths.append(mp)
        frames = [read_image(p) for p in frame_paths]
        flows = video_flows(frames, estimator)
        for t, (fp, mp, flow) in enumerate(zip(frame_paths, mask_paths, flows)):
            flow_path = out_dir / vdir.name / f"flow_{t:03d}.flo"
            write_flo(flow, flow_path)
            records.append(TripletRecord(
                os.path.relpath(fp, out_dir), os.path.relpath(flow_path, out_dir),
                os.path.relpath(mp, out_dir), vdir.name, t, "real",
            ))
    est_name = getattr(estimator, "name", str(estimator))
    manifest = DatasetManifest(name or frames_dir.name, records, {"estimator": est_name}, out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def dataset_stats(manifest):
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    counts = manifest.counts
    return {
        "name": manifest.name,
        **counts,
        "per_provenance": dict(sorted(Counter(r.provenance for r in manifest.records).items())),
        "fingerprint": manifest.fingerprint,
    }


# -------------------------------------------------------------------- mixing

@dataclass
class MixingSpec:
    datasets: list
    ratios: list = None
    seed: int = 0

    def __post_init__(self):
        if self.ratios is None:
            self.ratios = [2, 1, 1][: len(self.datasets)]
        self.ratios = [int(r) for r in self.ratios]
        if len(self.ratios) != len(self.datasets):
            raise ConfigInvalid(f"{len(self.ratios)} ratios for {len(self.datasets)} datasets")
        if any(r < 0 for r in self.ratios) or sum(self.ratios) <= 0:
            raise ConfigInvalid("ratios must be non-negative with a positive sum")
        for ds, r in zip(self.datasets, self.ratios):
            if r > 0 and len(ds) == 0:
                raise EmptyDataset(f"dataset {getattr(ds, 'name', ds)!r} is empty but has ratio {r}")


class Draw(NamedTuple):
    index: int
    dataset: int
    record: int


class MixedSampler:
    """Infinite i.i.d. stream of ``Draw``s; draw ``i`` depends only on ``(spec, seed, i)``."""

    def __init__(self, spec, start=0):
        self.spec = spec
        self._cum = np.cumsum(spec.ratios)
        self._next = start

    def draw(self, i):
        rng = np.random.default_rng([self.spec.seed, i])
        k = rng.integers(int(self._cum[-1]))
        d = int(np.searchsorted(self._cum, k, side="right"))
        return Draw(i, d, int(rng.integers(len(self.spec.datasets[d]))))

    def __iter__(self):
        return self

    def __next__(self):
        out = self.draw(self._next)
        self._next += 1
        return out

    def load(self, draw):
        return self.spec.datasets[draw.dataset].load_triplet(draw.record)


def mixed_sampler(spec, start=0):
    return MixedSampler(spec, start)
