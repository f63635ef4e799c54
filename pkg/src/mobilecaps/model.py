"""MobileCaps assembly and the two ablation variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, ops
from .backbone import Backbone, PlainConvStem, get_profile
from .capsnet import CapsuleHead, capsule_head_configs, primary_capsules
from .layers import Dense, Module

VARIANTS = ("mobilecaps", "capsnet_only", "backbone_only")
TASKS = ("classify", "severity")

# per-profile capsule geometry: (primary capsule width, hidden capsule layers, final width)
HEAD_DEFAULTS = {
    "paper": {"primary_dim": 128, "hidden": [[32, 16], [32, 16]], "final_dim": 16},
    "desk": {"primary_dim": 64, "hidden": [[16, 8]], "final_dim": 8},
}


@dataclass
class ModelConfig:
    profile: str = "desk"
    task: str = "classify"
    variant: str = "mobilecaps"
    num_classes: int = 3
    routing_iters: int = 3
    dropout: float = 0.2
    use_batch_norm: bool = True
    share_primary_weights: bool = True
    primary_dim: int | None = None
    hidden: list | None = None
    final_dim: int | None = None
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        defaults = HEAD_DEFAULTS.get(self.profile, HEAD_DEFAULTS["desk"])
        if self.primary_dim is None:
            self.primary_dim = defaults["primary_dim"]
        if self.hidden is None:
            self.hidden = [list(h) for h in defaults["hidden"]]
        if self.final_dim is None:
            self.final_dim = defaults["final_dim"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


class MobileCaps(Module):
    """Feature extractor -> dropout -> primary capsules -> routed capsule layers.

    ``__call__`` returns capsule lengths ([batch, K] for classification,
    [batch, 1] severity probability). The ``backbone_only`` variant instead
    returns class logits (classification) or a sigmoid probability (severity).
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        profile = get_profile(config.profile)
        profile.use_batch_norm = config.use_batch_norm
        if not config.use_batch_norm:
            profile.blocks = [type(b)(**{**asdict(b), "use_batch_norm": False}) for b in profile.blocks]
        if config.variant == "capsnet_only":
            self.features = PlainConvStem(profile, rng)
        else:
            self.features = Backbone(profile, rng)
        grid, _, channels = self.features.output_shape
        out_k = config.num_classes if config.task == "classify" else 1
        if config.variant == "backbone_only":
            self.classifier = Dense(channels, out_k, rng)
        else:
            if channels % config.primary_dim:
                raise ValueError(f"feature width {channels} not divisible by primary capsule width {config.primary_dim}")
            types = channels // config.primary_dim
            kind = "classifier" if config.task == "classify" else "severity"
            self.head = CapsuleHead(capsule_head_configs(
                kind, primary_caps=grid * grid * types, primary_dim=config.primary_dim,
                primary_groups=types if config.share_primary_weights else None,
                hidden=config.hidden, num_classes=config.num_classes,
                final_dim=config.final_dim, routing_iters=config.routing_iters), rng)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        s = self.features.profile.input_size
        return s, s, 3

    @property
    def outputs_logits(self) -> bool:
        return self.config.variant == "backbone_only" and self.config.task == "classify"

    def feature_map(self, x: Tensor) -> Tensor:
        return self.features(x)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"model expects [batch, {', '.join(map(str, self.input_shape))}], got {x.shape}")
        h = self.features(x)
        h = ops.dropout(h, self.config.dropout, self.training, rng)
        if self.config.variant == "backbone_only":
            pooled = ops.mean(h, axis=(1, 2))
            out = self.classifier(pooled)
            return ops.sigmoid(out) if self.config.task == "severity" else out
        return self.head(primary_capsules(h, self.config.primary_dim))

    def probabilities(self, outputs: np.ndarray) -> np.ndarray:
        """Per-class scores in [0, 1] from raw outputs (softmax for logits)."""
        if self.outputs_logits:
            z = outputs - outputs.max(axis=1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=1, keepdims=True)
        return outputs


def build_model(config: ModelConfig | dict | None = None, **overrides) -> MobileCaps:
    if config is None:
        config = ModelConfig(**overrides)
    elif isinstance(config, dict):
        config = ModelConfig.from_dict({**config, **overrides})
    elif overrides:
        config = ModelConfig.from_dict({**config.to_dict(), **overrides})
    return MobileCaps(config)
