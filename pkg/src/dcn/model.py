"""The full network: encoder-decoder, embedding head, competition output.

Five encoder blocks (conv-BN-ReLU twice, then 2x2 max pool) shrink a
tile by 2^5 while widening channels; five decoder blocks (nearest
upsample, conv-BN-ReLU) restore the tile size; a 1x1 convolution maps
to a D-dimensional per-pixel embedding. Embeddings are averaged over
superpixels and scored against a two-row codebook, and each superpixel
takes the class of its nearest prototype.

Checkpoints are self-describing: a small key=value config block rides
along with the named parameter payload, so loading needs no side input.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, reshape
from .competition import Codebook, CompetitionConfig, class_distances, winner
from .errors import DataError
from .layers import (
    MODES,
    BatchNormLayer,
    Conv2dLayer,
    DropoutLayer,
    batch_norm,
    conv2d,
    dropout,
    maxpool2,
    relu,
    upsample_nearest2,
)
from .superpixel import SuperpixelMap, broadcast_labels, superpixel_mean

CHECKPOINT_MAGIC = b"DCNW"
CHECKPOINT_VERSION = 1

DEFAULT_BANDS = ("RED", "GREEN", "BLUE", "NIR", "NDVI", "DSM")


@dataclass(frozen=True)
class DcnConfig:
    """Architecture and initialization knobs.

    ``input_bands`` names the raster bands fed to the network, in
    order; the channel count follows from it. ``dropout_blocks`` lists
    the encoder blocks (0-based) whose outputs are dropped during
    training.
    """

    input_bands: tuple[str, ...] = DEFAULT_BANDS
    block_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    embedding_dim: int = 16
    dropout_rate: float = 0.5
    dropout_blocks: tuple[int, ...] = (3, 4)
    sigmoid_form: str = "standard"
    batchnorm_mode: str = "standard"
    competition_form: str = "activated_difference"
    tile_size: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_bands", tuple(self.input_bands))
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "dropout_blocks", tuple(int(b) for b in self.dropout_blocks))
        if len(self.input_bands) < 1:
            raise ValueError("input_bands must name at least one band")
        if len(set(self.input_bands)) != len(self.input_bands):
            raise ValueError("input_bands must be unique")
        if len(self.block_channels) != 5:
            raise ValueError(
                f"block_channels must list exactly 5 widths, got {len(self.block_channels)}"
            )
        if any(c < 1 for c in self.block_channels):
            raise ValueError("block_channels must be positive")
        if self.embedding_dim < 1:
            raise ValueError(f"embedding_dim must be positive, got {self.embedding_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if any(not 0 <= b < 5 for b in self.dropout_blocks):
            raise ValueError("dropout_blocks must index encoder blocks 0..4")
        if self.sigmoid_form not in MODES:
            raise ValueError(f"sigmoid_form must be one of {MODES}")
        if self.batchnorm_mode not in MODES:
            raise ValueError(f"batchnorm_mode must be one of {MODES}")
        if self.tile_size < 32 or self.tile_size % 32 != 0:
            raise ValueError(
                f"tile_size must be a positive multiple of 32, got {self.tile_size}"
            )
        CompetitionConfig(self.competition_form, self.sigmoid_form)  # validates form

    @property
    def input_channels(self) -> int:
        return len(self.input_bands)


@dataclass
class EncoderBlock:
    conv1: Conv2dLayer
    bn1: BatchNormLayer
    conv2: Conv2dLayer
    bn2: BatchNormLayer


@dataclass
class DecoderBlock:
    conv: Conv2dLayer
    bn: BatchNormLayer


@dataclass
class DcnModel:
    config: DcnConfig
    encoder: list[EncoderBlock]
    decoder: list[DecoderBlock]
    head: Conv2dLayer
    codebook: Codebook
    dropouts: dict[int, DropoutLayer]
    global_step: int = 0
    _param_slots: dict = field(default_factory=dict, repr=False)
    _buffer_slots: dict = field(default_factory=dict, repr=False)

    def _register(self) -> None:
        params, buffers = {}, {}
        for i, blk in enumerate(self.encoder):
            for tag, conv, bn in (("1", blk.conv1, blk.bn1), ("2", blk.conv2, blk.bn2)):
                params[f"enc{i}.conv{tag}.kernel"] = (conv, "kernel")
                params[f"enc{i}.conv{tag}.bias"] = (conv, "bias")
                params[f"enc{i}.bn{tag}.gamma"] = (bn, "gamma")
                params[f"enc{i}.bn{tag}.beta"] = (bn, "beta")
                buffers[f"enc{i}.bn{tag}.running_mean"] = (bn, "running_mean")
                buffers[f"enc{i}.bn{tag}.running_var"] = (bn, "running_var")
        for i, blk in enumerate(self.decoder):
            params[f"dec{i}.conv.kernel"] = (blk.conv, "kernel")
            params[f"dec{i}.conv.bias"] = (blk.conv, "bias")
            params[f"dec{i}.bn.gamma"] = (blk.bn, "gamma")
            params[f"dec{i}.bn.beta"] = (blk.bn, "beta")
            buffers[f"dec{i}.bn.running_mean"] = (blk.bn, "running_mean")
            buffers[f"dec{i}.bn.running_var"] = (blk.bn, "running_var")
        params["head.kernel"] = (self.head, "kernel")
        params["head.bias"] = (self.head, "bias")
        params["codebook.prototypes"] = (self.codebook, "prototypes")
        self._param_slots = params
        self._buffer_slots = buffers

    def parameters(self) -> dict[str, Tensor]:
        return {n: getattr(o, a) for n, (o, a) in self._param_slots.items()}

    def buffers(self) -> dict[str, Tensor]:
        return {n: getattr(o, a) for n, (o, a) in self._buffer_slots.items()}

    def set_parameter(self, name: str, value: Tensor) -> None:
        obj, attr = self._param_slots[name]
        if getattr(obj, attr).shape != value.shape:
            raise ValueError(f"shape mismatch for {name}")
        setattr(obj, attr, value)

    def set_buffer(self, name: str, value: Tensor) -> None:
        obj, attr = self._buffer_slots[name]
        if getattr(obj, attr).shape != value.shape:
            raise ValueError(f"shape mismatch for {name}")
        setattr(obj, attr, value)


def _he_kernel(rng: np.random.Generator, kh, kw, cin, cout, dtype) -> Tensor:
    std = np.sqrt(2.0 / (kh * kw * cin))
    data = (rng.standard_normal((kh, kw, cin, cout)) * std).astype(dtype)
    return Tensor(data, requires_grad=True)


def _conv_layer(rng, kh, kw, cin, cout, dtype) -> Conv2dLayer:
    return Conv2dLayer(
        kernel=_he_kernel(rng, kh, kw, cin, cout, dtype),
        bias=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
    )


def build(config: DcnConfig, dtype=np.float32) -> DcnModel:
    """Deterministically initialize a model from the config seed."""
    rng = np.random.default_rng(config.seed)
    bc = config.block_channels
    bn_mode = config.batchnorm_mode

    encoder = []
    cin = config.input_channels
    for c in bc:
        encoder.append(
            EncoderBlock(
                conv1=_conv_layer(rng, 3, 3, cin, c, dtype),
                bn1=BatchNormLayer.create(c, mode=bn_mode, dtype=dtype),
                conv2=_conv_layer(rng, 3, 3, c, c, dtype),
                bn2=BatchNormLayer.create(c, mode=bn_mode, dtype=dtype),
            )
        )
        cin = c

    decoder = []
    dec_out = [bc[3], bc[2], bc[1], bc[0], bc[0]]
    cin = bc[4]
    for c in dec_out:
        decoder.append(
            DecoderBlock(
                conv=_conv_layer(rng, 3, 3, cin, c, dtype),
                bn=BatchNormLayer.create(c, mode=bn_mode, dtype=dtype),
            )
        )
        cin = c

    head = _conv_layer(rng, 1, 1, dec_out[-1], config.embedding_dim, dtype)
    codebook = Codebook.create(config.embedding_dim, dtype=dtype)
    dropouts = {
        b: DropoutLayer(config.dropout_rate, seed=config.seed + 1000 + b)
        for b in config.dropout_blocks
    }

    model = DcnModel(
        config=config,
        encoder=encoder,
        decoder=decoder,
        head=head,
        codebook=codebook,
        dropouts=dropouts,
    )
    model._register()
    return model


def embed_batch(model: DcnModel, batch: Tensor, phase: str) -> Tensor:
    """Encoder-decoder-head pass: [n, t, t, c_in] -> [n, t, t, D].

    Batch statistics in every norm layer are shared across the whole
    batch, so tiles trained together see one normalization.
    """
    cfg = model.config
    ts = cfg.tile_size
    if batch.data.ndim != 4 or batch.shape[1:3] != (ts, ts):
        raise ValueError(f"batch must be [n, {ts}, {ts}, c], got {batch.shape}")
    if batch.shape[3] != cfg.input_channels:
        raise ValueError(
            f"batch has {batch.shape[3]} channels, config expects {cfg.input_channels}"
        )
    x = batch
    for i, blk in enumerate(model.encoder):
        x = relu(batch_norm(conv2d(x, blk.conv1), blk.bn1, phase))
        x = relu(batch_norm(conv2d(x, blk.conv2), blk.bn2, phase))
        x, _ = maxpool2(x)
        if i in model.dropouts:
            x = dropout(x, model.dropouts[i], phase)
    for blk in model.decoder:
        x = upsample_nearest2(x)
        x = relu(batch_norm(conv2d(x, blk.conv), blk.bn, phase))
    return conv2d(x, model.head)


def embed(model: DcnModel, tile: Tensor, phase: str) -> Tensor:
    """Encoder-decoder-head pass for one tile: [t, t, c_in] -> [t, t, D]."""
    cfg = model.config
    if tile.data.ndim != 3 or tile.shape[:2] != (cfg.tile_size, cfg.tile_size):
        raise ValueError(
            f"tile must be [{cfg.tile_size}, {cfg.tile_size}, c], got {tile.shape}"
        )
    if tile.shape[2] != cfg.input_channels:
        raise ValueError(
            f"tile has {tile.shape[2]} channels, config expects {cfg.input_channels}"
        )
    h, w, _ = tile.shape
    out = embed_batch(model, reshape(tile, (1, h, w, tile.shape[2])), phase)
    return reshape(out, (h, w, cfg.embedding_dim))


def forward(
    model: DcnModel, tile: Tensor, spmap: SuperpixelMap, phase: str
) -> tuple[Tensor, np.ndarray]:
    """Full pass: per-superpixel class distances and the label raster."""
    if spmap.shape != (model.config.tile_size, model.config.tile_size):
        raise ValueError(
            f"superpixel map covers {spmap.shape}, tile is "
            f"{(model.config.tile_size, model.config.tile_size)}"
        )
    emb = embed(model, tile, phase)
    pooled = superpixel_mean(spmap, emb)
    comp = CompetitionConfig(model.config.competition_form, model.config.sigmoid_form)
    distances = class_distances(pooled, model.codebook, comp)
    labels = winner(distances)
    raster = broadcast_labels(spmap, labels)
    return distances, raster


def _config_to_text(config: DcnConfig) -> str:
    pairs = [
        ("input_bands", ",".join(config.input_bands)),
        ("block_channels", ",".join(str(c) for c in config.block_channels)),
        ("embedding_dim", str(config.embedding_dim)),
        ("dropout_rate", repr(config.dropout_rate)),
        ("dropout_blocks", ",".join(str(b) for b in config.dropout_blocks)),
        ("sigmoid_form", config.sigmoid_form),
        ("batchnorm_mode", config.batchnorm_mode),
        ("competition_form", config.competition_form),
        ("tile_size", str(config.tile_size)),
        ("seed", str(config.seed)),
    ]
    return "\n".join(f"{k}={v}" for k, v in pairs)


def _config_from_text(text: str) -> DcnConfig:
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise DataError(f"malformed config line in checkpoint: {line!r}")
        key, value = line.split("=", 1)
        fields[key] = value
    try:
        return DcnConfig(
            input_bands=tuple(fields["input_bands"].split(",")),
            block_channels=tuple(int(c) for c in fields["block_channels"].split(",")),
            embedding_dim=int(fields["embedding_dim"]),
            dropout_rate=float(fields["dropout_rate"]),
            dropout_blocks=tuple(
                int(b) for b in fields["dropout_blocks"].split(",") if b
            ),
            sigmoid_form=fields["sigmoid_form"],
            batchnorm_mode=fields["batchnorm_mode"],
            competition_form=fields["competition_form"],
            tile_size=int(fields["tile_size"]),
            seed=int(fields["seed"]),
        )
    except (KeyError, ValueError) as err:
        raise DataError(f"invalid checkpoint config: {err}") from err


def save_checkpoint(model: DcnModel, path: str, step: int | None = None) -> None:
    """Write the model to ``path`` atomically in the DCNW layout."""
    if step is None:
        step = model.global_step
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    cfg = _config_to_text(model.config).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    chunks.append(struct.pack("<Q", step))
    records = list(model.parameters().items()) + list(model.buffers().items())
    for name, tensor in records:
        nb = name.encode("utf-8")
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    blob = b"".join(chunks)

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DataError(f"truncated checkpoint: {self.path}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path: str) -> DcnModel:
    """Rebuild a model from a DCNW file, bit-exact in every parameter."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as err:
        raise DataError(f"cannot read checkpoint {path}: {err}") from err
    r = _Reader(blob, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise DataError(f"bad magic in checkpoint {path}: not a DCNW file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported checkpoint version {version} in {path} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    cfg_text = r.take(r.u32()).decode("utf-8")
    config = _config_from_text(cfg_text)
    step = r.u64()

    tensors: dict[str, np.ndarray] = {}
    while r.pos < len(blob):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        if name in tensors:
            raise DataError(f"duplicate tensor {name!r} in checkpoint {path}")
        tensors[name] = data.copy()

    model = build(config)
    expected_params = model.parameters()
    expected_buffers = model.buffers()
    missing = (set(expected_params) | set(expected_buffers)) - set(tensors)
    if missing:
        raise DataError(f"checkpoint {path} is missing tensors: {sorted(missing)}")
    for name, data in tensors.items():
        if name in expected_params:
            if expected_params[name].shape != data.shape:
                raise DataError(
                    f"checkpoint tensor {name!r} has shape {data.shape}, "
                    f"config implies {expected_params[name].shape}"
                )
            model.set_parameter(
                name, Tensor(data, requires_grad=expected_params[name].requires_grad)
            )
        elif name in expected_buffers:
            if expected_buffers[name].shape != data.shape:
                raise DataError(
                    f"checkpoint tensor {name!r} has shape {data.shape}, "
                    f"config implies {expected_buffers[name].shape}"
                )
            model.set_buffer(name, Tensor(data))
        else:
            raise DataError(f"unexpected tensor {name!r} in checkpoint {path}")
    model.global_step = step
    return model
