"""Generator and discriminator networks plus a small deterministic checkpoint format.

Both networks treat the 40 Mel bands as channels and convolve along time, so every
learned correction is band-specific. Patches enter as ``[batch, 40, 11]``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InvalidInputError
from .features import N_MELS, PATCH_FRAMES

T_TO_S = "T->S"
S_TO_T = "S->T"


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 32
    n_downsample: int = 2
    n_residual: int = 3
    use_global_skip: bool = True
    norm: str = "none"
    n_mels: int = N_MELS

    def __post_init__(self):
        if self.n_downsample < 1 or self.n_residual < 1:
            raise ConfigurationError("n_downsample and n_residual must be >= 1")
        if self.norm not in _NORMS:
            raise ConfigurationError(f"norm must be one of {sorted(_NORMS)}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 32
    norm: str = "none"
    n_mels: int = N_MELS

    def __post_init__(self):
        if self.norm not in _NORMS:
            raise ConfigurationError(f"norm must be one of {sorted(_NORMS)}")


_NORMS = {
    "instance": lambda c: nn.InstanceNorm1d(c, affine=True),
    "batch": lambda c: nn.BatchNorm1d(c),
    "none": lambda c: nn.Identity(),
}


class ResidualBlock(nn.Module):
    """conv-norm-relu-conv-norm plus identity; nothing is applied after the sum."""

    def __init__(self, channels: int, norm: str):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv1d(channels, channels, 3, padding=1),
            _NORMS[norm](channels),
            nn.ReLU(),
            nn.Conv1d(channels, channels, 3, padding=1),
            _NORMS[norm](channels),
        )

    def forward(self, x):
        return x + self.body(x)


def _as_batch(x: torch.Tensor, n_mels: int) -> tuple[torch.Tensor, bool]:
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 3 or x.shape[1] != n_mels or x.shape[2] != PATCH_FRAMES:
        raise InvalidInputError(f"expected patches of shape [batch, {n_mels}, {PATCH_FRAMES}], got {tuple(x.shape)}")
    return x, single


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig(), direction_tag: str = T_TO_S):
        super().__init__()
        self.config = config
        self.direction_tag = direction_tag
        c, norm = config.base_channels, config.norm
        self.stem = nn.Sequential(nn.Conv1d(config.n_mels, c, 3, padding=1), _NORMS[norm](c), nn.ReLU())
        self.down = nn.ModuleList()
        for i in range(config.n_downsample):
            cin, cout = c * 2 ** i, c * 2 ** (i + 1)
            self.down.append(nn.Sequential(nn.Conv1d(cin, cout, 3, stride=2, padding=1), _NORMS[norm](cout), nn.ReLU()))
        width = c * 2 ** config.n_downsample
        self.residual = nn.Sequential(*[ResidualBlock(width, norm) for _ in range(config.n_residual)])
        self.up_conv = nn.ModuleList()
        self.up_post = nn.ModuleList()
        for i in reversed(range(config.n_downsample)):
            cin, cout = c * 2 ** (i + 1), c * 2 ** i
            self.up_conv.append(nn.ConvTranspose1d(cin, cout, 3, stride=2, padding=1))
            self.up_post.append(nn.Sequential(_NORMS[norm](cout), nn.ReLU()))
        self.head = nn.Conv1d(c, config.n_mels, 3, padding=1)

    def core(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(x)
        lengths = []
        for block in self.down:
            lengths.append(h.shape[-1])
            h = block(h)
        h = self.residual(h)
        for conv, post, n in zip(self.up_conv, self.up_post, reversed(lengths)):
            h = post(conv(h, output_size=[n]))
        return self.head(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, single = _as_batch(x, self.config.n_mels)
        h = self.core(x)
        if self.config.use_global_skip:
            h = h + x
        out = torch.tanh(h)
        return out[0] if single else out


class Discriminator(nn.Module):
    """Four stride-2 convolutions (11 -> 6 -> 3 -> 2 -> 1 frames), time average, sigmoid."""

    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig(), domain_tag: str = "S"):
        super().__init__()
        self.config = config
        self.domain_tag = domain_tag
        c, norm = config.base_channels, config.norm
        self.features = nn.Sequential(
            nn.Conv1d(config.n_mels, c, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv1d(c, 2 * c, 3, stride=2, padding=1),
            _NORMS[norm](2 * c),
            nn.LeakyReLU(0.2),
            nn.Conv1d(2 * c, 4 * c, 3, stride=2, padding=1),
            _NORMS[norm](4 * c),
            nn.LeakyReLU(0.2),
        )
        self.final = nn.Conv1d(4 * c, 1, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x, single = _as_batch(x, self.config.n_mels)
        score = torch.sigmoid(self.final(self.features(x)).mean(dim=(1, 2)))
        return score[0] if single else score


def init_params(config: GeneratorConfig | DiscriminatorConfig, seed: int, tag: str | None = None,
                dtype: torch.dtype = torch.float32) -> Generator | Discriminator:
    """Build a network whose initial parameters depend only on ``config`` and ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if isinstance(config, GeneratorConfig):
            model = Generator(config, tag or T_TO_S)
        elif isinstance(config, DiscriminatorConfig):
            model = Discriminator(config, tag or "S")
        else:
            raise ConfigurationError(f"unsupported config type {type(config).__name__}")
    return model.to(dtype)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"DANP"
_VERSION = 1
_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8"), 2: (torch.int64, "<i8")}
_DTYPE_CODES = {t: code for code, (t, _) in _DTYPES.items()}


def write_arrays(path: str | Path, arrays: Mapping[str, torch.Tensor]) -> str:
    """Write named tensors to a byte-deterministic container; returns its sha256."""
    chunks = [_MAGIC, struct.pack("<HI", _VERSION, len(arrays))]
    for name, tensor in arrays.items():
        t = tensor.detach().cpu().contiguous()
        code = _DTYPE_CODES[t.dtype]
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", code, t.dim()) + struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.numpy(), dtype=_DTYPES[code][1]).tobytes())
    blob = b"".join(chunks)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def read_arrays(path: str | Path) -> dict[str, torch.Tensor]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise InvalidInputError(f"{path}: not a parameter container")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != _VERSION:
        raise InvalidInputError(f"{path}: unsupported container version {version}")
    pos, out = 10, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        code, ndim = struct.unpack_from("<BB", raw, pos)
        shape = struct.unpack_from(f"<{ndim}I", raw, pos + 2)
        pos += 2 + 4 * ndim
        torch_dtype, np_dtype = _DTYPES[code]
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype=np_dtype, count=size, offset=pos).reshape(shape)
        pos += arr.nbytes
        out[name] = torch.from_numpy(arr.copy()).to(torch_dtype)
    return out


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(path: str | Path, model: Generator | Discriminator, **meta) -> str:
    """Write ``path`` (parameters) and ``path + '.json'`` (config and metadata)."""
    path = Path(path)
    digest = write_arrays(path, model.state_dict())
    kind = "generator" if isinstance(model, Generator) else "discriminator"
    tag = model.direction_tag if isinstance(model, Generator) else model.domain_tag
    sidecar = {"kind": kind, "config": asdict(model.config), "tag": tag, "sha256": digest, **meta}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return digest


def load_checkpoint(path: str | Path) -> tuple[Generator | Discriminator, dict]:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    if sidecar["kind"] == "generator":
        model = Generator(GeneratorConfig(**sidecar["config"]), sidecar["tag"])
    else:
        model = Discriminator(DiscriminatorConfig(**sidecar["config"]), sidecar["tag"])
    model.load_state_dict(read_arrays(path))
    model.eval()
    return model, sidecar
