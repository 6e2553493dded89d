"""Supervised training of the two-stream network over mixed triplet datasets."""
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .errors import ConfigInvalid, DimensionMismatch, NonFiniteLoss
from .segnet import (
    ModelConfig,
    build_model,
    encode_inputs,
    encode_mask,
    load_model,
    read_checkpoint,
    save_checkpoint,
)
from .triplets import DatasetManifest, MixedSampler, MixingSpec

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    max_steps: int = 1000
    eval_every: int = 100
    checkpoint_every: int = 100
    ratios: list = field(default_factory=lambda: [2, 1, 1])
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    threads: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.betas = tuple(self.betas)
        self.ratios = list(self.ratios)

    @classmethod
    def toy(cls, **overrides):
        base = dict(learning_rate=5e-3, batch_size=4, max_steps=500, eval_every=100,
                    checkpoint_every=100, ratios=[1], model=ModelConfig.toy())
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigInvalid("learning_rate must be >= 0")
        if self.batch_size < 1 or self.max_steps < 1:
            raise ConfigInvalid("batch_size and max_steps must be positive")
        if not 1 <= self.eval_every <= self.max_steps:
            raise ConfigInvalid("eval_every must lie in [1, max_steps]")
        if self.checkpoint_every < 1:
            raise ConfigInvalid("checkpoint_every must be positive")
        self.model.validate()
        return self

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class TrainState:
    step: int
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    losses: list = field(default_factory=list)


def bce_loss(logits, mask):
    """Mean per-pixel binary cross-entropy on logits (log-sum-exp stable)."""
    if logits.shape != mask.shape:
        raise DimensionMismatch(f"logits {tuple(logits.shape)} vs mask {tuple(mask.shape)}")
    return F.binary_cross_entropy_with_logits(logits, mask.to(logits.dtype))


def make_optimizer(model, config):
    return torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas,
                            eps=config.eps, foreach=False)


def init_state(config):
    config.validate()
    torch.set_num_threads(config.threads)
    model = build_model(config.model, config.seed)
    return TrainState(0, model, make_optimizer(model, config))


def train_step(state, batch):
    images, flows, masks = batch
    res = state.model.config.resolution
    if images.shape[-2:] != (res, res):
        raise DimensionMismatch(f"batch resolution {tuple(images.shape[-2:])} != {res}")
    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    loss = bce_loss(state.model(images, flows), masks)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss.item()} at step {state.step}")
    loss.backward()
    state.optimizer.step()
    state.step += 1
    state.losses.append(float(loss.item()))
    return state


class BatchLoader:
    """Deterministic batches: batch ``k`` holds sampler draws ``k*B .. k*B+B-1``."""

    def __init__(self, spec, model_config, batch_size):
        self.sampler = MixedSampler(spec)
        self.model_config = model_config
        self.batch_size = batch_size
        self._cache = {}

    def _example(self, draw):
        key = (draw.dataset, draw.record)
        if key not in self._cache:
            tr = self.sampler.load(draw)
            img, fl = encode_inputs(tr.image, tr.flow, self.model_config)
            self._cache[key] = (img, fl, encode_mask(tr.mask, self.model_config))
        return self._cache[key]

    def batch(self, k):
        start = k * self.batch_size
        rows = [self._example(self.sampler.draw(i)) for i in range(start, start + self.batch_size)]
        return tuple(torch.stack(col) for col in zip(*rows))


def evaluate_model(model, manifest, protocol="max"):
    """In-memory evaluation at model resolution; returns a MetricReport."""
    cfg = model.config
    model.eval()
    scores = {}
    with torch.no_grad():
        for i, r in enumerate(manifest.records):
            tr = manifest.load_triplet(i)
            img, fl = encode_inputs(tr.image, tr.flow, cfg)
            prob = model.predict(img[None], fl[None])[0, 0].numpy().astype(np.float64)
            gt = encode_mask(tr.mask, cfg)[0].numpy()
            scores[(r.source_id, r.t)] = metrics.frame_metrics(prob, gt, protocol)
    return metrics.aggregate(scores, manifest.name, protocol)


@dataclass
class FitResult:
    model: torch.nn.Module
    trace: list
    checkpoint: Path | None


def _load_manifests(manifests):
    return [m if isinstance(m, DatasetManifest) else DatasetManifest.load(m) for m in manifests]


def fit(config, manifests, val_manifest=None, out_dir=None, resume=None, stop_at=None):
    """Train for ``config.max_steps`` steps, evaluating and checkpointing periodically.

    ``stop_at`` ends the run early (after checkpointing) to simulate interruption.
    Trace records: one header, one ``{"kind": "step"}`` per step and one
    ``{"kind": "eval"}`` per evaluation.
    """
    config.validate()
    datasets = _load_manifests(manifests)
    val = _load_manifests([val_manifest])[0] if val_manifest is not None else None
    spec = MixingSpec(datasets, config.ratios, config.seed)
    header = {"kind": "header", "config": config.to_dict(), "ratios": list(config.ratios),
              "datasets": [d.name for d in datasets]}
    torch.set_num_threads(config.threads)

    if resume is not None:
        payload = read_checkpoint(resume)
        model = load_model(payload, config.model)
        state = TrainState(payload["step"], model, make_optimizer(model, config))
        state.optimizer.load_state_dict(payload["optimizer"])
        trace = [header] + [json.loads(s) for s in payload["trace"]][1:]
        state.losses = [r["loss"] for r in trace if r["kind"] == "step"]
    else:
        state = init_state(config)
        trace = [header]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    loader = BatchLoader(spec, config.model, config.batch_size)
    last_ckpt = None
    end = config.max_steps if stop_at is None else min(stop_at, config.max_steps)

    while state.step < end:
        train_step(state, loader.batch(state.step))
        trace.append({"kind": "step", "step": state.step, "loss": state.losses[-1]})
        if val is not None and (state.step % config.eval_every == 0 or state.step == config.max_steps):
            rep = evaluate_model(state.model, val)
            trace.append({"kind": "eval", "step": state.step, "dataset": val.name,
                          "S": rep.S, "F": rep.F, "M": rep.M})
            log.info("step %d loss %.4f S %.3f F %.3f M %.3f",
                     state.step, state.losses[-1], rep.S, rep.F, rep.M)
        if out is not None and (state.step % config.checkpoint_every == 0 or state.step == end):
            last_ckpt = out / f"ckpt_{state.step:06d}.pt"
            save_checkpoint(last_ckpt, state.model, {
                "step": state.step,
                "optimizer": state.optimizer.state_dict(),
                "train_config": json.dumps(config.to_dict()),
                "trace": [json.dumps(r) for r in trace],
            })
    if out is not None:
        write_trace(out / "trace.jsonl", trace)
    return FitResult(state.model, trace, last_ckpt)


def write_trace(path, trace):
    with open(path, "w") as f:
        for rec in trace:
            f.write(json.dumps(rec) + "\n")


def read_trace(path):
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln.strip()]


def loss_trace(trace):
    return [r["loss"] for r in trace if r["kind"] == "step"]


def final_score(trace, metric="S"):
    evals = [r for r in trace if r["kind"] == "eval"]
    if not evals:
        raise ValueError("trace has no eval records")
    return evals[-1][metric]


def ratio_sweep(config, manifests, ratio_grid, val_manifest, seeds=(0,)):
    """Train once per (ratios, seed); returns ``{"a:b:c": [trace, ...]}`` in grid order."""
    out = {}
    for ratios in ratio_grid:
        label = ":".join(str(int(r)) for r in ratios)
        out[label] = [
            fit(replace(config, ratios=list(ratios), seed=seed), manifests, val_manifest).trace
            for seed in seeds
        ]
    return out
