"""Generator backbone, embedding head and domain discriminator, plus checkpoints."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional

import torch
import torch.nn as nn

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    backbone: str = "tiny_cnn"
    feature_dim: int = 64
    embed_hidden: int = 64
    embed_out: int = 64
    disc_hidden: int = 64
    input_resolution: int = 32
    conv_channels: tuple = (16, 32)
    nonlinearity: str = "relu"

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        for name in ("feature_dim", "embed_hidden", "embed_out", "disc_hidden", "input_resolution"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if any(c < 1 for c in self.conv_channels):
            raise ValueError("model.conv_channels must be >= 1")
        if self.backbone not in BACKBONES:
            raise ValueError(f"model.backbone must be one of {sorted(BACKBONES)}, got {self.backbone!r}")
        if self.nonlinearity != "relu":
            raise ValueError("model.nonlinearity: only 'relu' is supported")


class TinyCNN(nn.Module):
    """Three stride-2 conv blocks and a global average pool."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = (3,) + cfg.conv_channels + (cfg.feature_dim,)
        layers = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU()]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x).mean(dim=(2, 3))


def _resnet50_trunk(cfg: ModelConfig) -> nn.Module:
    import torchvision

    net = torchvision.models.resnet50(weights=None)
    net.fc = nn.Linear(net.fc.in_features, cfg.feature_dim)
    return net


BACKBONES: Dict[str, Callable[[ModelConfig], nn.Module]] = {
    "tiny_cnn": TinyCNN,
    "pluggable_large": _resnet50_trunk,
}


def register_backbone(name: str, factory: Callable[[ModelConfig], nn.Module]) -> None:
    """Make ``factory(cfg) -> module mapping (B,3,R,R) to (B, feature_dim)`` selectable by name."""
    BACKBONES[name] = factory


def mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.ReLU(), nn.Linear(hidden, d_out))


class Discriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = mlp(cfg.feature_dim, cfg.disc_hidden, 1)

    def forward(self, feats):
        return torch.sigmoid(self.net(feats))


@dataclass
class ModelState:
    """Generator (theta), embedding head (omega) and discriminator (phi) parameters."""

    config: ModelConfig
    generator: nn.Module
    embedder: nn.Module
    discriminator: nn.Module
    step: int = 0
    extra: dict = field(default_factory=dict)

    def modules(self):
        return {"generator": self.generator, "embedder": self.embedder,
                "discriminator": self.discriminator}

    def eval(self) -> "ModelState":
        for m in self.modules().values():
            m.eval()
        return self

    def to(self, dtype) -> "ModelState":
        for m in self.modules().values():
            m.to(dtype)
        return self

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)

    def named_arrays(self) -> dict:
        return {f"{name}.{k}": v.detach().cpu().numpy().copy()
                for name, m in self.modules().items() for k, v in m.state_dict().items()}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.named_arrays().items()):
            h.update(name.encode())
            h.update(arr.tobytes())
        return h.hexdigest()[:16]


def _init_weights(module: nn.Module, gen: torch.Generator) -> None:
    """He-normal (std = sqrt(2 / fan_in)) weights and zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


def init_model(config: ModelConfig, seed: int) -> ModelState:
    gen = torch.Generator().manual_seed(int(seed))
    generator = BACKBONES[config.backbone](config)
    embedder = mlp(config.feature_dim, config.embed_hidden, config.embed_out)
    discriminator = Discriminator(config)
    for m in (generator, embedder, discriminator):
        _init_weights(m, gen)
    return ModelState(config, generator, embedder, discriminator, step=0)


def _check_batch(state: ModelState, x: torch.Tensor) -> None:
    r = state.config.input_resolution
    if x.ndim != 4 or x.shape[0] == 0 or tuple(x.shape[1:]) != (3, r, r):
        raise ValueError(f"expected a nonempty (B, 3, {r}, {r}) batch, got {tuple(x.shape)}")


def forward_generator(state: ModelState, patches: torch.Tensor) -> torch.Tensor:
    _check_batch(state, patches)
    p = next(state.generator.parameters())
    return state.generator(patches.to(p.dtype))


def forward_embedding(state: ModelState, features: torch.Tensor) -> torch.Tensor:
    if features.ndim != 2 or features.shape[1] != state.config.feature_dim:
        raise ValueError(f"expected (B, {state.config.feature_dim}) features, got {tuple(features.shape)}")
    return state.embedder(features)


def forward_discriminator(state: ModelState, features: torch.Tensor) -> torch.Tensor:
    if features.ndim != 2 or features.shape[1] != state.config.feature_dim:
        raise ValueError(f"expected (B, {state.config.feature_dim}) features, got {tuple(features.shape)}")
    return state.discriminator(features)


def embed_patches(state: ModelState, patches: torch.Tensor) -> torch.Tensor:
    """f'(x) = f(g(x)); the only composition used by losses and evaluation."""
    return forward_embedding(state, forward_generator(state, patches))


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ----------------------------------------------------------------------------
# checkpoints

class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, state: ModelState, optimizers: Optional[dict] = None,
                    rng_state: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(state.config)
    cfg["conv_channels"] = list(cfg["conv_channels"])
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": cfg,
        "step": int(state.step),
        "params": {name: m.state_dict() for name, m in state.modules().items()},
        "optimizers": {k: opt.state_dict() for k, opt in (optimizers or {}).items()},
        "rng_state": rng_state or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns ``(state, optimizer_state_dicts, rng_state)``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format {version!r}, expected {CHECKPOINT_VERSION}")
    state = init_model(ModelConfig(**payload["model_config"]), seed=0)
    for name, m in state.modules().items():
        m.load_state_dict(payload["params"][name])
    state.step = int(payload["step"])
    return state, payload["optimizers"], payload["rng_state"]
