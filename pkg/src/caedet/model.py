"""The convolutional autoencoder (encoder/decoder builders) and checkpoint I/O."""
from __future__ import annotations

import json
import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .layers import (ACTIVATION, CONV2D, CONV2D_TRANSPOSE, DENSE, FLATTEN, RESHAPE,
                     LayerSpec, ParamStore, Sequential)
from .tensor import RELU, SIGMOID

BASE_CHANNELS = (16, 32, 64, 128)
DEFAULT_INPUT_SHAPE = (256, 256, 1)
DEFAULT_BOTTLENECK = 32

MAGIC = b"CAE1"
VERSION = 1


def _check_config(input_shape, bottleneck_dim, scale_factor, stride):
    h, w, c = input_shape
    down = stride ** len(BASE_CHANNELS)
    if h % down or w % down:
        raise ConfigError(f"input {h}x{w} is not divisible by {down} (four stride-{stride} stages)")
    if c < 1 or bottleneck_dim < 1:
        raise ConfigError("channels and bottleneck_dim must be positive")
    if scale_factor < 1 or any(ch % scale_factor for ch in BASE_CHANNELS):
        raise ConfigError(f"scale_factor {scale_factor} must divide every channel width {BASE_CHANNELS}")


def channel_widths(scale_factor=1):
    return [ch // scale_factor for ch in BASE_CHANNELS]


def encoder_specs(input_shape=DEFAULT_INPUT_SHAPE, bottleneck_dim=DEFAULT_BOTTLENECK, scale_factor=1,
                  kernel_size=(3, 3), stride=2):
    """Conv2D+ReLU x4 -> Flatten -> Dense+Sigmoid."""
    _check_config(tuple(input_shape), bottleneck_dim, scale_factor, stride)
    specs = []
    for ch in channel_widths(scale_factor):
        specs.append(LayerSpec(CONV2D, units=ch, kernel_size=tuple(kernel_size), stride=stride))
        specs.append(LayerSpec(ACTIVATION, activation=RELU))
    specs.append(LayerSpec(FLATTEN))
    specs.append(LayerSpec(DENSE, units=bottleneck_dim))
    specs.append(LayerSpec(ACTIVATION, activation=SIGMOID))
    return specs


def decoder_specs(bottleneck_dim=DEFAULT_BOTTLENECK, output_shape=DEFAULT_INPUT_SHAPE, scale_factor=1,
                  kernel_size=(3, 3), stride=2):
    """Dense+ReLU -> Reshape -> Conv2DTranspose+ReLU x3 -> Conv2DTranspose+Sigmoid."""
    h, w, c = output_shape
    _check_config(tuple(output_shape), bottleneck_dim, scale_factor, stride)
    widths = channel_widths(scale_factor)
    down = stride ** len(widths)
    code_shape = (h // down, w // down, widths[-1])
    specs = [
        LayerSpec(DENSE, units=math.prod(code_shape)),
        LayerSpec(ACTIVATION, activation=RELU),
        LayerSpec(RESHAPE, target_shape=code_shape),
    ]
    outs = widths[-2::-1] + [c]
    for i, ch in enumerate(outs):
        specs.append(LayerSpec(CONV2D_TRANSPOSE, units=ch, kernel_size=tuple(kernel_size), stride=stride))
        specs.append(LayerSpec(ACTIVATION, activation=SIGMOID if i == len(outs) - 1 else RELU))
    return specs


def build_encoder(input_shape=DEFAULT_INPUT_SHAPE, bottleneck_dim=DEFAULT_BOTTLENECK, scale_factor=1,
                  kernel_size=(3, 3), seed=0, dtype=np.float64, store=None) -> Sequential:
    specs = encoder_specs(input_shape, bottleneck_dim, scale_factor, kernel_size)
    return Sequential(specs, input_shape, seed=[seed, 0], dtype=dtype, prefix="encoder", store=store)


def build_decoder(bottleneck_dim=DEFAULT_BOTTLENECK, output_shape=DEFAULT_INPUT_SHAPE, scale_factor=1,
                  kernel_size=(3, 3), seed=0, dtype=np.float64, store=None) -> Sequential:
    specs = decoder_specs(bottleneck_dim, output_shape, scale_factor, kernel_size)
    return Sequential(specs, (bottleneck_dim,), seed=[seed, 1], dtype=dtype, prefix="decoder", store=store)


def table_rows(stack: Sequential):
    """Collapse a layer stack into (kind, input shape, output shape, activation) rows.

    A parameterized layer followed by an Activation layer becomes one row,
    the way the architecture tables are laid out.
    """
    rows = []
    layers = list(stack)
    i = 0
    while i < len(layers):
        layer = layers[i]
        act = None
        out = layer.out_shape
        if i + 1 < len(layers) and layers[i + 1].spec.kind == ACTIVATION:
            act = layers[i + 1].spec.activation
            out = layers[i + 1].out_shape
            i += 1
        rows.append((layer.spec.kind, layer.in_shape, out, act))
        i += 1
    return rows


class AutoencoderModel:
    def __init__(self, input_shape=DEFAULT_INPUT_SHAPE, bottleneck_dim=DEFAULT_BOTTLENECK, scale_factor=1,
                 kernel_size=(3, 3), seed=0, dtype=np.float32):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.bottleneck_dim = int(bottleneck_dim)
        self.scale_factor = int(scale_factor)
        self.kernel_size = tuple(int(k) for k in kernel_size)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.store = ParamStore()
        self.encoder = build_encoder(self.input_shape, self.bottleneck_dim, self.scale_factor,
                                     self.kernel_size, self.seed, self.dtype, self.store)
        self.decoder = build_decoder(self.bottleneck_dim, self.input_shape, self.scale_factor,
                                     self.kernel_size, self.seed, self.dtype, self.store)

    @classmethod
    def from_config(cls, config: dict, dtype=np.float32):
        try:
            return cls(config["input_shape"], config["bottleneck_dim"], config["scale_factor"],
                       config["kernel_size"], config.get("seed", 0), dtype)
        except KeyError as exc:
            raise ConfigError(f"model config is missing {exc}") from None

    def config(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "bottleneck_dim": self.bottleneck_dim,
            "scale_factor": self.scale_factor,
            "kernel_size": list(self.kernel_size),
            "seed": self.seed,
        }

    def __iter__(self):
        yield from self.encoder
        yield from self.decoder

    @property
    def layers(self):
        return list(self)

    def parameter_count(self) -> int:
        return self.store.count()

    def _check_batch(self, batch):
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.input_shape:
            raise DimensionError(f"expected a batch of shape [N, {', '.join(map(str, self.input_shape))}], "
                                 f"got {list(batch.shape)}")

    def encode(self, batch):
        self._check_batch(batch)
        return self.encoder.forward(np.asarray(batch, dtype=self.dtype))

    def decode(self, codes):
        return self.decoder.forward(np.asarray(codes, dtype=self.dtype))

    def forward(self, batch):
        return self.decode(self.encode(batch))

    __call__ = forward

    def backward(self, grad):
        return self.encoder.backward(self.decoder.backward(grad))

    def reconstruct(self, frames, batch_size=32):
        """Forward pass in chunks, for scoring large frame sets."""
        frames = np.asarray(frames)
        outs = [self.forward(frames[i:i + batch_size]) for i in range(0, len(frames), batch_size)]
        return np.concatenate(outs) if outs else np.empty((0,) + self.input_shape, self.dtype)


# -- checkpoint format ------------------------------------------------------
#
# "CAE1" | u32 version | u32 len + JSON config | parameter records in build order
# | [optional: m records, v records, u64 step] | u32 CRC32 of everything before it.
# Record: u32 len + UTF-8 name | u32 rank | u64 dims... | float32 LE values.


def _pack_record(name: str, value: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", value.ndim)]
    parts.append(struct.pack(f"<{value.ndim}Q", *value.shape))
    parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: AutoencoderModel, path, optimizer_state: bool = True, metadata: dict | None = None):
    """Write ``model`` (and, if requested, its Adam moments and step) to ``path``."""
    config = {"model": model.config(), "has_optimizer": bool(optimizer_state)}
    config.update(metadata or {})
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    for name, p in model.store:
        parts.append(_pack_record(name, p.value))
    if optimizer_state:
        for name, p in model.store:
            parts.append(_pack_record("m:" + name, p.m))
        for name, p in model.store:
            parts.append(_pack_record("v:" + name, p.v))
        parts.append(struct.pack("<Q", model.store.t))
    body = b"".join(parts)
    data = body + struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(data)
    return config


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.end = end
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]

    def record(self):
        start = self.pos
        name_len = self.u32("record name length")
        try:
            name = self.take(name_len, "record name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not valid UTF-8", start) from None
        rank = self.u32(f"rank of {name}")
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for {name}", start)
        dims = struct.unpack(f"<{rank}Q", self.take(8 * rank, f"dims of {name}"))
        count = math.prod(dims)
        values = np.frombuffer(self.take(4 * count, f"values of {name}"), dtype="<f4").reshape(dims)
        return name, values, start


def read_checkpoint(path):
    """Parse and validate a checkpoint file; returns (config, params, optimizer or None)."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad magic, not a caedet checkpoint", 0)
    if len(data) < 8:
        raise FormatError("truncated checkpoint while reading version", 4)
    version = struct.unpack("<I", data[4:8])[0]
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    rd = _Reader(data, len(data) - 4)
    rd.pos = 8
    if rd.end < rd.pos:
        raise FormatError("truncated checkpoint while reading CRC", len(data))
    blob_len = rd.u32("config length")
    blob = rd.take(blob_len, "config block")
    try:
        config = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("config block is not valid JSON", 12) from None
    if "model" not in config:
        raise FormatError("config block has no model section", 12)

    reference = AutoencoderModel.from_config(config["model"], dtype=np.float32)
    names = [name for name, _ in reference.store]
    params = {}
    for expected in names:
        name, values, start = rd.record()
        if name != expected:
            raise FormatError(f"expected record {expected!r}, found {name!r}", start)
        want = reference.store[name].value.shape
        if values.shape != want:
            raise ConfigError(f"{name}: stored shape {values.shape} does not match configured shape {want}")
        params[name] = values
    optimizer = None
    if config.get("has_optimizer"):
        optimizer = {"m": {}, "v": {}}
        for slot in ("m", "v"):
            for expected in names:
                name, values, start = rd.record()
                if name != f"{slot}:{expected}":
                    raise FormatError(f"expected record {slot}:{expected!r}, found {name!r}", start)
                if values.shape != params[expected].shape:
                    raise ConfigError(f"{name}: moment shape {values.shape} does not match parameter")
                optimizer[slot][expected] = values
        optimizer["t"] = rd.u64("optimizer step")
    if rd.pos != rd.end:
        raise FormatError(f"{rd.end - rd.pos} unexpected trailing bytes", rd.pos)
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) != stored_crc:
        raise FormatError("CRC32 mismatch", len(data) - 4)
    return config, params, optimizer


def load_checkpoint(path, expected_config: dict | None = None) -> AutoencoderModel:
    """Load a model. With ``expected_config``, reject checkpoints of another architecture."""
    config, params, optimizer = read_checkpoint(path)
    if expected_config is not None:
        for key in ("input_shape", "bottleneck_dim", "scale_factor", "kernel_size"):
            if key in expected_config and list(np.atleast_1d(expected_config[key])) != list(
                    np.atleast_1d(config["model"][key])):
                raise ConfigError(f"checkpoint {key}={config['model'][key]} does not match expected "
                                  f"{expected_config[key]}")
    model = AutoencoderModel.from_config(config["model"], dtype=np.float32)
    for name, p in model.store:
        p.value[...] = params[name]
        if optimizer is not None:
            p.m[...] = optimizer["m"][name]
            p.v[...] = optimizer["v"][name]
    if optimizer is not None:
        model.store.t = int(optimizer["t"])
    model.checkpoint_config = config
    return model
