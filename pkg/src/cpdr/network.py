"""Backbone, FPN/UNet decoders, refinement stack, heads, and accounting."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .fusion import ADFBlock, AUFBlock, DACFBlock
from .layers import Conv2d, Module
from .tensor import ParamSet, ShapeError, Tensor, bilinear_resize, concat_channels, count_macs_scope, \
    no_grad, relu, resize_array, sigmoid

ARCHS = ("fpn", "unet")
REFINES = ("none", "dacf", "adf_auf")
N_STAGES = 3


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone_widths: tuple[int, ...] = (8, 8, 16, 16)
    decoder_width: int = 8
    arch: str = "fpn"
    refine: str = "dacf"
    input_size: tuple[int, int] = (96, 96)
    seed: int = 42

    def __post_init__(self):
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)
        self.input_size = tuple(int(s) for s in self.input_size)
        self.arch = self.arch.lower()
        self.refine = self.refine.lower()
        self.validate()

    def validate(self) -> None:
        if len(self.backbone_widths) != N_STAGES + 1:
            raise ConfigError(f"backbone_widths needs {N_STAGES + 1} entries (stem + {N_STAGES} stages), "
                              f"got {len(self.backbone_widths)}")
        if min(self.backbone_widths) < 1 or self.decoder_width < 1:
            raise ConfigError("widths must be positive")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.refine not in REFINES:
            raise ConfigError(f"refine must be one of {REFINES}, got {self.refine!r}")
        div = 2 ** (N_STAGES + 1)
        if len(self.input_size) != 2 or any(s < div or s % div for s in self.input_size):
            raise ConfigError(f"input size {self.input_size} must be positive multiples of {div}")

    def digest(self) -> bytes:
        """Architecture identity; the init seed is deliberately excluded."""
        arch = {k: v for k, v in asdict(self).items() if k != "seed"}
        arch["backbone_widths"] = list(arch["backbone_widths"])
        arch["input_size"] = list(arch["input_size"])
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).digest()


class Backbone(Module):
    """Stride-2 stem, then stages of stride-2 conv plus one two-conv residual unit."""

    def __init__(self, widths: tuple[int, ...], rng: np.random.Generator):
        self.stem = Conv2d(3, widths[0], 3, rng, stride=2, padding=1)
        self.downs = [Conv2d(widths[j - 1], widths[j], 3, rng, stride=2, padding=1) for j in range(1, len(widths))]
        self.res_a = [Conv2d(w, w, 3, rng) for w in widths[1:]]
        self.res_b = [Conv2d(w, w, 3, rng) for w in widths[1:]]

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = [relu(self.stem(x))]
        for down, ra, rb in zip(self.downs, self.res_a, self.res_b):
            a = relu(down(feats[-1]))
            feats.append(relu(a + rb(relu(ra(a)))))
        return feats


class DecoderBlock(Module):
    def __init__(self, c_in: int, width: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, width, 3, rng)
        self.conv2 = Conv2d(width, width, 3, rng)
        self.conv3 = Conv2d(width, width, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv3(relu(self.conv2(relu(self.conv1(x)))))


class Decoder(Module):
    """Top-down decoding into three stages, coarse (F_1) to fine (F_3)."""

    def __init__(self, widths: tuple[int, ...], d: int, arch: str, rng: np.random.Generator):
        self.arch = arch
        skips = list(reversed(widths[:-1]))
        if arch == "fpn":
            self.lateral_top = Conv2d(widths[-1], d, 1, rng)
            self.laterals = [Conv2d(c, d, 1, rng) for c in skips]
            self.blocks = [DecoderBlock(d, d, rng) for _ in skips]
        else:
            tops = [widths[-1]] + [d] * (len(skips) - 1)
            self.blocks = [DecoderBlock(t + c, d, rng) for t, c in zip(tops, skips)]

    def __call__(self, feats: list[Tensor]) -> list[Tensor]:
        skips = list(reversed(feats[:-1]))
        top = self.lateral_top(feats[-1]) if self.arch == "fpn" else feats[-1]
        outs = []
        for k, skip in enumerate(skips):
            up = bilinear_resize(top, skip.shape[2], skip.shape[3])
            fused = up + self.laterals[k](skip) if self.arch == "fpn" else concat_channels([up, skip])
            top = self.blocks[k](fused)
            outs.append(top)
        return outs


class DACFRefine(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.blocks = [DACFBlock(d, d, rng), DACFBlock(d, d, rng)]
        self.out_channels = (d, d, d)

    def __call__(self, f: list[Tensor]) -> list[Tensor]:
        f2 = self.blocks[0](f[0], f[1])
        f3 = self.blocks[1](f2, f[2])
        return [f[0], f2, f3]


class UShapeRefine(Module):
    """Two ADFs walking coarse-ward over the decoder outputs, then two AUFs walking back fine-ward."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.adf_a = ADFBlock(d, d, d, rng)
        a2, _ = self.adf_a.out_channels
        self.adf_b = ADFBlock(d, a2, d, rng)
        a1, a2b = self.adf_b.out_channels
        self.auf_a = AUFBlock(a1, a2b, d, rng)
        u1, u2 = self.auf_a.out_channels
        self.auf_b = AUFBlock(u2, d, d, rng)
        u2b, u3 = self.auf_b.out_channels
        self.out_channels = (u1, u2b, u3)

    def __call__(self, f: list[Tensor]) -> list[Tensor]:
        a2, a3 = self.adf_a(f[1], f[2])
        a1, a2 = self.adf_b(f[0], a2)
        u1, u2 = self.auf_a(a1, a2)
        u2, u3 = self.auf_b(u2, a3)
        return [u1, u2, u3]


class CPDRModel(Module):
    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        d = cfg.decoder_width
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone_widths, rng)
        self.decoder = Decoder(cfg.backbone_widths, d, cfg.arch, rng)
        if cfg.refine == "dacf":
            self.refine = DACFRefine(d, rng)
            chans = self.refine.out_channels
        elif cfg.refine == "adf_auf":
            self.refine = UShapeRefine(d, rng)
            chans = self.refine.out_channels
        else:
            self.refine = None
            chans = (d, d, d)
        self.heads = [Conv2d(c, 1, 1, rng) for c in chans]
        self._params = self.params()

    @property
    def parameters(self) -> ParamSet:
        return self._params

    def forward(self, x: Tensor, check_size: bool = True) -> list[Tensor]:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (n,3,H,W) input, got {x.shape}")
        if check_size and tuple(x.shape[2:]) != self.cfg.input_size:
            raise ShapeError(f"input {x.shape[2:]} does not match configured {self.cfg.input_size}")
        stages = self.decoder(self.backbone(x))
        if self.refine is not None:
            stages = self.refine(stages)
        return [head(s) for head, s in zip(self.heads, stages)]

    __call__ = forward

    def predict(self, x: Tensor) -> np.ndarray:
        """Saliency probabilities at input resolution, shape (n, H, W)."""
        with no_grad():
            logits = self.forward(x)[-1]
            prob = sigmoid(logits).data
        return resize_array(prob[:, 0], x.shape[2], x.shape[3])


def build_model(cfg: ModelConfig) -> CPDRModel:
    cfg.validate()
    return CPDRModel(cfg)


def forward(model: CPDRModel, x: Tensor) -> list[Tensor]:
    return model.forward(x)


def count_params(model: Module) -> int:
    return model.params().numel()


def count_macs(model: CPDRModel, input_size: tuple[int, int] | None = None) -> int:
    """Multiply-accumulates of one forward pass on a single image.

    Counts every conv (k*k*c_in*c_out*h_out*w_out); the SE fully connected
    layers are 1x1 convs on pooled descriptors so they land in the same sum.
    Resizes and elementwise ops are free.
    """
    h, w = input_size or model.cfg.input_size
    x = Tensor(np.zeros((1, 3, h, w)))
    with no_grad(), count_macs_scope() as counter:
        model.forward(x, check_size=False)
    return counter[0]


# ----------------------------------------------------------------------------- checkpoints

MAGIC = b"CPDRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: CPDRModel, path: str | Path) -> None:
    """Header (magic, version, config digest, record count), then one record per parameter."""
    parts = [MAGIC, struct.pack("<I", VERSION), model.cfg.digest(), struct.pack("<I", len(model.parameters))]
    for name, t in model.parameters:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path) -> tuple[bytes, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = buf[pos:pos + 32]
    pos += 32
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    records = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        nbytes = 8 * int(np.prod(shape))
        records[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).copy()
        pos += nbytes
    return digest, records


def load_checkpoint(path: str | Path, cfg: ModelConfig) -> CPDRModel:
    digest, records = read_checkpoint(path)
    if digest != cfg.digest():
        raise CheckpointError(f"{path}: config digest does not match the supplied model config")
    model = build_model(cfg)
    if set(records) != set(model.parameters.names()):
        raise CheckpointError(f"{path}: parameter names do not match the model")
    for name, t in model.parameters:
        if records[name].shape != t.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        t.data[...] = records[name]
    return model
