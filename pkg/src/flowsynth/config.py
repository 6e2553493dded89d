"""Declarative run file (YAML or JSON). Unknown keys are rejected."""
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from .datagen import GeneratorConfig
from .errors import ConfigInvalid
from .segnet import ModelConfig
from .train import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SourcesSection(_Strict):
    images: Path
    masks: Path


class GenerateSection(_Strict):
    backend: Literal["replicate", "geometric", "rigid_oracle", "diffusion"] = "replicate"
    frames: int = 14
    height: int = 576
    width: int = 1024
    frame_rate: int = 7
    sampler_steps: int = 25
    guidance_first: float = 3.0
    guidance_last: float = 1.0
    decode_chunk: int = 8
    # diffusion adapter
    model: str = "svd"
    command: list[str] | None = None
    fixture_dir: Path | None = None
    timeout: float | None = None
    # rigid oracle: constant per-frame step, else random in [-max_step, max_step]
    motion: tuple[int, int] | None = None
    max_step: int = 1
    # geometric
    tps_grid: int = 4
    tps_std: float = 0.01

    def generator_config(self, seed):
        return GeneratorConfig(self.frames, self.height, self.width, self.frame_rate,
                               self.sampler_steps, self.guidance_first, self.guidance_last,
                               self.decode_chunk, seed)


class EstimatorSection(_Strict):
    name: str = "block_match"
    search_radius: int = 4
    patch: int = 7
    fixture_dir: Path | None = None


class IngestSection(_Strict):
    frames_dir: Path
    masks_dir: Path
    name: str | None = None


class ModelSection(_Strict):
    stages: int | None = None
    widths: list[int] | None = None
    reduction: int | None = None
    spatial_kernel: int | None = None
    resolution: int | None = None
    flow_encoding: Literal["color", "raw"] | None = None


class TrainSection(_Strict):
    preset: Literal["default", "toy"] = "default"
    manifests: list[Path] = []
    val_manifest: Path | None = None
    learning_rate: float | None = None
    batch_size: int | None = None
    max_steps: int | None = None
    eval_every: int | None = None
    checkpoint_every: int | None = None
    ratios: list[int] | None = None
    threads: int | None = None
    model: ModelSection = ModelSection()
    resume: Path | None = None

    def train_config(self, seed):
        overrides = {k: v for k, v in self.model_dump(exclude={"preset", "manifests", "val_manifest", "model", "resume"}).items()
                     if v is not None}
        model_over = {k: v for k, v in self.model.model_dump().items() if v is not None}
        base_model = ModelConfig.toy() if self.preset == "toy" else ModelConfig()
        model = ModelConfig(**{**base_model.to_dict(), **model_over})
        ratios = overrides.pop("ratios", None)
        if ratios is None:
            ratios = [2, 1, 1][: len(self.manifests)] if len(self.manifests) > 1 else [1]
        if self.preset == "toy":
            cfg = TrainConfig.toy(seed=seed, ratios=ratios, model=model, **overrides)
        else:
            cfg = TrainConfig(seed=seed, ratios=ratios, model=model, **overrides)
        if cfg.eval_every > cfg.max_steps:
            cfg.eval_every = cfg.max_steps
        return cfg


class EvalSection(_Strict):
    manifest: Path
    checkpoint: Path | None = None
    pred_dir: Path | None = None
    protocol: Literal["max", "mean", "adaptive"] = "max"
    dataset: str | None = None


class PipelineConfig(_Strict):
    seed: int = 0
    out: Path = Path("runs")
    name: str = "synthetic"
    sources: SourcesSection | None = None
    generate: GenerateSection = GenerateSection()
    estimator: EstimatorSection = EstimatorSection()
    ingest: IngestSection | None = None
    train: TrainSection = TrainSection()
    eval: EvalSection | None = None


def _set_path(tree, dotted, raw):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigInvalid(f"--set {dotted}: {k} is not a section")
    if isinstance(node.get(keys[-1]), (dict, list)):
        raise ConfigInvalid(f"--set {dotted}: only scalar leaves can be overridden")
    node[keys[-1]] = yaml.safe_load(raw)


def _resolve_paths(model, base):
    for name, value in model:
        if isinstance(value, Path) and not value.is_absolute():
            setattr(model, name, base / value)
        elif isinstance(value, list) and value and isinstance(value[0], Path):
            setattr(model, name, [v if v.is_absolute() else base / v for v in value])
        elif isinstance(value, BaseModel):
            _resolve_paths(value, base)


def load_config(path=None, overrides=(), seed=None, out=None):
    """Parse and validate a run file; ``overrides`` are ``key.path=value`` strings."""
    tree = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            tree = yaml.safe_load(path.read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigInvalid(f"{path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigInvalid(f"{path}: top level must be a mapping")
        base = path.resolve().parent
    for item in overrides:
        if "=" not in item:
            raise ConfigInvalid(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(tree, k.strip(), v)
    if seed is not None:
        tree["seed"] = seed
    try:
        cfg = PipelineConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigInvalid(str(exc)) from exc
    _resolve_paths(cfg, base)
    if out is not None:
        cfg.out = Path(out).resolve()
    return cfg
