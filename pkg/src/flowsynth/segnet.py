"""Two-stream saliency network: appearance and motion encoders, attention fusion, decoder.

Each stream is a hierarchical encoder whose stage ``s`` has stride ``2**(s+2)``
(a stride-4 patch embedding followed by stride-2 stages). Encoder and decoder
use GELU so the loss is smooth in the parameters. At every stage the
two streams are gated by channel-then-spatial attention and summed; the fused
pyramid is decoded coarse-to-fine with bilinear upsampling and skip
concatenation, and a 1-channel head is upsampled to the input resolution.
"""
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, ConfigInvalid, DimensionMismatch
from .flow import colorize_flow
from .imaging import resize_bilinear, resize_nearest

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    stages: int = 4
    widths: tuple = (32, 64, 160, 256)
    reduction: int = 4
    spatial_kernel: int = 7
    resolution: int = 512
    flow_encoding: str = "color"  # "color" (3-channel wheel) or "raw" (u, v)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    @classmethod
    def toy(cls, **overrides):
        return cls(**{"stages": 2, "widths": (8, 16), "reduction": 4, "resolution": 64, **overrides})

    @property
    def flow_channels(self):
        return 3 if self.flow_encoding == "color" else 2

    def validate(self):
        if self.stages < 1 or len(self.widths) != self.stages:
            raise ConfigInvalid(f"need {self.stages} widths, got {self.widths}")
        if min(self.widths) % self.reduction:
            raise ConfigInvalid(f"reduction {self.reduction} must divide min width {min(self.widths)}")
        if self.spatial_kernel % 2 == 0:
            raise ConfigInvalid("spatial_kernel must be odd")
        if self.resolution % (2 ** (self.stages + 1)):
            raise ConfigInvalid(f"resolution must be divisible by {2 ** (self.stages + 1)}")
        if self.flow_encoding not in ("color", "raw"):
            raise ConfigInvalid("flow_encoding must be 'color' or 'raw'")
        return self

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class ChannelAttention(nn.Module):
    """Per-channel gates ``sigmoid(mlp(avgpool(x)) + mlp(maxpool(x)))`` with a shared MLP."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        if channels % reduction:
            raise ConfigInvalid(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))

    def forward(self, x):
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))


class SpatialAttention(nn.Module):
    """Per-pixel gates from a k x k conv over the channel-wise mean and max maps."""

    def __init__(self, kernel=7):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigInvalid("spatial attention kernel must be odd")
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    def __init__(self, channels, reduction=4, kernel=7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel)

    def forward(self, x):
        x = x * self.channel(x)[:, :, None, None]
        return x * self.spatial(x)


class Fusion(nn.Module):
    """Sum of the independently gated appearance and motion features."""

    def __init__(self, channels, reduction=4, kernel=7):
        super().__init__()
        self.image_gate = CBAM(channels, reduction, kernel)
        self.flow_gate = CBAM(channels, reduction, kernel)

    def forward(self, image_feat, flow_feat):
        return self.image_gate(image_feat) + self.flow_gate(flow_feat)


class EncoderStage(nn.Module):
    def __init__(self, cin, cout, first):
        super().__init__()
        if first:
            self.embed = nn.Conv2d(cin, cout, 7, stride=4, padding=3)
        else:
            self.embed = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.norm = nn.GroupNorm(1, cout)
        self.conv = nn.Conv2d(cout, cout, 3, padding=1)

    def forward(self, x):
        x = F.gelu(self.norm(self.embed(x)))
        return x + F.gelu(self.conv(x))


class Encoder(nn.Module):
    def __init__(self, in_channels, widths):
        super().__init__()
        chans = [in_channels, *widths]
        self.stages = nn.ModuleList(
            EncoderStage(chans[i], chans[i + 1], first=(i == 0)) for i in range(len(widths))
        )

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Coarse-to-fine decoder. ``linear=True`` drops biases and activations (testing aid)."""

    def __init__(self, widths, linear=False):
        super().__init__()
        self.widths = tuple(widths)
        self.linear = linear
        self.blocks = nn.ModuleList(
            nn.Conv2d(widths[s + 1] + widths[s], widths[s], 3, padding=1, bias=not linear)
            for s in range(len(widths) - 1)
        )
        self.head = nn.Conv2d(widths[0], 1, 1, bias=not linear)

    def zero_head(self):
        nn.init.zeros_(self.head.weight)
        if self.head.bias is not None:
            nn.init.zeros_(self.head.bias)

    def forward(self, pyramid, out_size):
        if len(pyramid) != len(self.widths):
            raise ValueError(f"pyramid has {len(pyramid)} stages, decoder expects {len(self.widths)}")
        x = pyramid[-1]
        for s in range(len(self.widths) - 2, -1, -1):
            skip = pyramid[s]
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = self.blocks[s](torch.cat([x, skip], dim=1))
            if not self.linear:
                x = F.gelu(x)
        logits = self.head(x)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


class TwoStreamSaliencyNet(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = (config or ModelConfig()).validate()
        c = self.config
        self.image_encoder = Encoder(3, c.widths)
        self.flow_encoder = Encoder(c.flow_channels, c.widths)
        self.fusion = nn.ModuleList(Fusion(w, c.reduction, c.spatial_kernel) for w in c.widths)
        self.decoder = Decoder(c.widths)

    def encode(self, image, flow):
        fi = self.image_encoder(image)
        ff = self.flow_encoder(flow)
        return [fuse(a, b) for fuse, a, b in zip(self.fusion, fi, ff)]

    def forward(self, image, flow):
        """Return logits of shape ``(N, 1, H, W)``."""
        res = self.config.resolution
        if image.shape[-2:] != (res, res) or flow.shape[-2:] != (res, res):
            raise DimensionMismatch(
                f"inputs {tuple(image.shape[-2:])}/{tuple(flow.shape[-2:])} != model resolution {res}"
            )
        if image.shape[1] != 3 or flow.shape[1] != self.config.flow_channels:
            raise DimensionMismatch(f"channels: image {image.shape[1]}, flow {flow.shape[1]}")
        return self.decoder(self.encode(image, flow), (res, res))

    def predict(self, image, flow):
        return torch.sigmoid(self.forward(image, flow))


def build_model(config=None, seed=0):
    torch.manual_seed(seed)
    return TwoStreamSaliencyNet(config)


# ---------------------------------------------------------------- input prep

def encode_inputs(image, flow, config):
    """Resize a uint8 image and a pixel flow field to model tensors ``(3,R,R)``, ``(C,R,R)``."""
    r = config.resolution
    img = resize_bilinear(np.asarray(image, dtype=np.uint8), r, r).astype(np.float32) / 255.0
    if config.flow_encoding == "color":
        fl = resize_bilinear(colorize_flow(flow), r, r).astype(np.float32) / 255.0
    else:
        h, w = flow.shape[:2]
        fl = resize_bilinear(np.asarray(flow, dtype=np.float32), r, r)
        fl = fl * np.array([r / w, r / h], dtype=np.float32)
    return (torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))),
            torch.from_numpy(np.ascontiguousarray(fl.transpose(2, 0, 1))))


def encode_mask(mask, config):
    r = config.resolution
    m = resize_nearest(np.asarray(mask, dtype=np.uint8), r, r).astype(np.float32)
    return torch.from_numpy(m)[None]


def predict_map(model, image, flow):
    """Probability map for one triplet at the image's own resolution (float64)."""
    x, f = encode_inputs(image, flow, model.config)
    model.eval()
    with torch.no_grad():
        prob = model.predict(x[None], f[None])[0, 0].numpy().astype(np.float64)
    h, w = np.asarray(image).shape[:2]
    return np.clip(resize_bilinear(prob, h, w), 0.0, 1.0)


# ----------------------------------------------------------------- checkpoint

def save_checkpoint(path, model, extra=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
        **(extra or {}),
    }
    torch.save(payload, path)


def read_checkpoint(path):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    return payload


def load_model(path_or_payload, config=None):
    """Rebuild the model stored in a checkpoint, refusing any shape mismatch."""
    payload = path_or_payload if isinstance(path_or_payload, dict) else read_checkpoint(path_or_payload)
    stored = ModelConfig(**payload["model_config"])
    model = TwoStreamSaliencyNet(config or stored)
    expected = model.state_dict()
    params = payload["params"]
    if set(params) != set(expected):
        raise CheckpointError("checkpoint parameter names do not match the model")
    for k, v in params.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise CheckpointError(f"{k}: checkpoint {tuple(v.shape)} vs model {tuple(expected[k].shape)}")
    model.load_state_dict(params)
    return model
