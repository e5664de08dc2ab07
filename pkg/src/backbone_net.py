"""
Backbone Multi-Decoder
U-Net residuale con instance normalization: un encoder condiviso e N decoder,
uno per ogni annotazione da imitare
"""

import json
import logging
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MDUNCKPT"
CHECKPOINT_VERSION = 1


class ModelConfigError(ValueError):
    """Configurazione di rete non valida"""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        self.message = message
        super().__init__(f"Invalid model config '{field_name}': {message}")


class ShapeMismatchError(ValueError):
    """Forma di un tensore diversa da quella attesa"""

    def __init__(self, what: str, expected: Any, actual: Any):
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


@dataclass
class ModelConfig:
    """Topologia della rete"""
    stage_channels: List[int] = field(default_factory=lambda: [16, 32, 48, 64, 64])
    n_decoders: int = 3
    n_classes: int = 2
    in_channels: int = 1
    norm_epsilon: float = 1e-5

    def validate(self) -> "ModelConfig":
        if len(self.stage_channels) < 2:
            raise ModelConfigError("stage_channels", "at least 2 stages are required")
        if any(int(c) <= 0 for c in self.stage_channels):
            raise ModelConfigError("stage_channels",
                                   f"all widths must be positive, got {self.stage_channels}")
        if self.n_decoders < 1:
            raise ModelConfigError("n_decoders", f"must be >= 1, got {self.n_decoders}")
        if self.n_classes < 2:
            raise ModelConfigError("n_classes", f"must be >= 2, got {self.n_classes}")
        if self.in_channels < 1:
            raise ModelConfigError("in_channels", f"must be >= 1, got {self.in_channels}")
        if not self.norm_epsilon > 0:
            raise ModelConfigError("norm_epsilon", f"must be > 0, got {self.norm_epsilon}")
        return self

    @property
    def n_downsamplings(self) -> int:
        return len(self.stage_channels) - 1

    @property
    def grid_multiple(self) -> int:
        """Altezza e larghezza in ingresso devono essere multipli di questo valore"""
        return 2 ** self.n_downsamplings

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return cls(
            stage_channels=[int(c) for c in data["stage_channels"]],
            n_decoders=int(data["n_decoders"]),
            n_classes=int(data["n_classes"]),
            in_channels=int(data["in_channels"]),
            norm_epsilon=float(data.get("norm_epsilon", 1e-5)),
        )


@dataclass
class FeaturePyramid:
    """Feature dell'encoder, livello s a risoluzione (H/2^s, W/2^s)"""
    levels: List[torch.Tensor]

    def __len__(self) -> int:
        return len(self.levels)


@dataclass
class BranchPredictions:
    """
    Mappe di probabilità dei rami: probs ha forma (N, K, H, W) oppure,
    durante il training, (N, B, K, H, W)
    """
    probs: torch.Tensor

    @property
    def n_branches(self) -> int:
        return self.probs.shape[0]

    def branch(self, i: int) -> torch.Tensor:
        return self.probs[i]

    @property
    def foreground(self) -> torch.Tensor:
        # Classi 1..K-1 sono foreground; per il caso binario è il canale 1
        return self.probs[..., 1:, :, :].sum(dim=-3)

    @property
    def mean_foreground(self) -> torch.Tensor:
        return self.foreground.mean(dim=0)


class ConvGroup(nn.Module):
    """Convoluzione 3x3 -> instance norm -> ReLU"""

    def __init__(self, in_ch: int, out_ch: int, eps: float):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=1, padding=1, bias=False)
        self.norm = nn.InstanceNorm2d(out_ch, eps=eps, affine=True)
        self.act = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class ResidualStage(nn.Module):
    """Due ConvGroup sommati all'ingresso (proiezione 1x1 se cambiano i canali)"""

    def __init__(self, in_ch: int, out_ch: int, eps: float):
        super().__init__()
        self.body = nn.Sequential(ConvGroup(in_ch, out_ch, eps), ConvGroup(out_ch, out_ch, eps))
        if in_ch == out_ch:
            self.shortcut: nn.Module = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(in_ch, out_ch, kernel_size=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x) + self.shortcut(x)


class Encoder(nn.Module):
    """Percorso di contrazione: max pooling stride 2 tra gli stadi"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        chans = config.stage_channels
        eps = config.norm_epsilon
        self.stages = nn.ModuleList([ResidualStage(config.in_channels, chans[0], eps)])
        for prev, cur in zip(chans[:-1], chans[1:]):
            self.stages.append(ResidualStage(prev, cur, eps))
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        levels = []
        for s, stage in enumerate(self.stages):
            if s > 0:
                x = self.pool(x)
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(levels=levels)


class Decoder(nn.Module):
    """
    Percorso di espansione: upsampling bilineare x2, concatenazione della
    skip dell'encoder, stadio residuo; larghezze speculari all'encoder
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        chans = config.stage_channels
        eps = config.norm_epsilon
        # stages[s] produce il livello s partendo dal livello s+1
        self.stages = nn.ModuleList([
            ResidualStage(chans[s + 1] + chans[s], chans[s], eps)
            for s in range(len(chans) - 1)
        ])
        self.head = nn.Conv2d(chans[0], config.n_classes, kernel_size=1)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        x = pyramid.levels[-1]
        for s in reversed(range(len(self.stages))):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = torch.cat([x, pyramid.levels[s]], dim=1)
            x = self.stages[s](x)
        return torch.softmax(self.head(x), dim=1)


class MultiDecoderNet(nn.Module):
    """Un encoder condiviso, N decoder indipendenti"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        self.encoder = Encoder(config)
        self.decoders = nn.ModuleList([Decoder(config) for _ in range(config.n_decoders)])

    @property
    def n_decoders(self) -> int:
        return len(self.decoders)

    def check_input(self, x: torch.Tensor) -> None:
        """Verifica canali e griglia di un batch (B, C, H, W)"""
        if x.dim() != 4:
            raise ShapeMismatchError("input rank", "(B, C, H, W)", tuple(x.shape))
        if x.shape[1] != self.config.in_channels:
            raise ShapeMismatchError("input channels", self.config.in_channels, x.shape[1])
        m = self.config.grid_multiple
        h, w = x.shape[-2:]
        if h % m or w % m:
            raise ShapeMismatchError(
                "input spatial size",
                f"multiples of {m} ({self.config.n_downsamplings} downsampling steps)",
                (h, w),
            )

    def encode(self, x: torch.Tensor) -> FeaturePyramid:
        self.check_input(x)
        return self.encoder(x)

    def decode(self, i: int, pyramid: FeaturePyramid) -> torch.Tensor:
        return self.decoders[i](pyramid)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (N, B, K, H, W); l'encoding è calcolato una sola volta"""
        pyramid = self.encode(x)
        return torch.stack([self.decode(i, pyramid) for i in range(self.n_decoders)], dim=0)


def _initialize_weights(net: nn.Module) -> None:
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_model(config: ModelConfig, seed: int = 0) -> MultiDecoderNet:
    """Costruisce la rete con inizializzazione deterministica dato il seed"""
    config.validate()
    # Lo stato RNG globale del chiamante non viene toccato
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = MultiDecoderNet(config)
        _initialize_weights(net)

    logger.info(f"Built multi-decoder U-Net: stages={config.stage_channels}, "
                f"decoders={config.n_decoders}, classes={config.n_classes}, "
                f"parameters={parameter_count(net)}")
    return net


def forward_all(net: MultiDecoderNet, image: Union[torch.Tensor, np.ndarray]) -> BranchPredictions:
    """Esegue tutti i rami su una singola immagine (C, H, W)"""
    x = torch.as_tensor(image)
    if x.dim() != 3:
        raise ShapeMismatchError("image rank", "(C, H, W)", tuple(x.shape))
    param = next(net.parameters())
    x = x.to(device=param.device, dtype=param.dtype)
    probs = net(x.unsqueeze(0))
    return BranchPredictions(probs=probs[:, 0])


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def independent_parameter_count(config: ModelConfig) -> int:
    """Parametri di N reti indipendenti a decoder singolo (baseline per annotatore)"""
    single = ModelConfig(
        stage_channels=list(config.stage_channels),
        n_decoders=1,
        n_classes=config.n_classes,
        in_channels=config.in_channels,
        norm_epsilon=config.norm_epsilon,
    )
    with torch.random.fork_rng(devices=[]):
        return config.n_decoders * parameter_count(MultiDecoderNet(single))


def save_checkpoint(net: MultiDecoderNet, path: Union[str, Path],
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    """
    Salva un checkpoint a file singolo:
    magic | uint32 LE versione | header JSON terminato da NUL | array float32 LE
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    manifest = []
    blobs = []
    offset = 0
    for name, tensor in net.state_dict().items():
        array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
        manifest.append({
            "name": name,
            "shape": list(array.shape),
            "offset": offset,
            "count": int(array.size),
        })
        blobs.append(array.tobytes(order="C"))
        offset += array.nbytes

    header = {
        "config": net.config.to_dict(),
        "dtype": "float32",
        "byte_order": "little",
        "manifest": manifest,
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\0")
        for blob in blobs:
            f.write(blob)

    logger.info(f"Checkpoint saved to {path} ({len(manifest)} tensors, {offset} bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[MultiDecoderNet, Dict[str, Any]]:
    """Ricostruisce la rete da un checkpoint; restituisce anche i metadati extra"""
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"Not a multi-decoder checkpoint: {path}")

    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {version} in {path}")
    pos += 4
    end = data.index(b"\0", pos)
    header = json.loads(data[pos:end].decode("utf-8"))
    payload = memoryview(data)[end + 1:]

    config = ModelConfig.from_dict(header["config"])
    with torch.random.fork_rng(devices=[]):
        net = MultiDecoderNet(config)

    state = {}
    for entry in header["manifest"]:
        array = np.frombuffer(payload, dtype="<f4", count=entry["count"], offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(array.reshape(entry["shape"]).astype(np.float32))
    net.load_state_dict(state)

    logger.info(f"Checkpoint loaded from {path}")
    return net, header.get("extra", {})
