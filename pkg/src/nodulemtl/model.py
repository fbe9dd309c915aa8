"""Shared-trunk 3D encoder-decoder with a segmentation and a classification head.

Layer numbering is 1-based to match how the architecture is usually
described: trunk layers 1-14, segmentation layers 15-16 (conv, sigmoid),
classification layers 17-19 (conv, fc-hidden, fc-2).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensor import (
    Tensor,
    batch_norm,
    bilinear_upsample_xy,
    concat,
    conv3d,
    flatten,
    fully_connected,
    max_pool_xy,
    no_grad,
    relu,
    sigmoid,
    softmax,
)

TRUNK_DEPTH = 14
NODULE_CLASS = 1
DEFAULT_CHANNELS = (16, 16, 32, 32, 64, 64, 64, 64, 64, 32, 32, 16, 16, 16)
# quarter-width trunk used for single-core training runs
DESK_CHANNELS = (4, 4, 8, 8, 16, 16, 16, 16, 16, 8, 8, 4, 4, 4)


@dataclass
class NetworkConfig:
    input_shape: tuple[int, int, int] = (8, 32, 32)
    channels_per_stage: tuple[int, ...] = DEFAULT_CHANNELS
    pool_positions: tuple[int, ...] = (2, 4, 6)
    upsample_positions: tuple[int, ...] = (8, 10, 12)
    fc_hidden: int = 1024
    cls_conv_channels: int = 1
    seed: int = 0
    dtype: str = "float64"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    skips: bool = False

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.channels_per_stage = tuple(int(v) for v in self.channels_per_stage)
        self.pool_positions = tuple(int(v) for v in self.pool_positions)
        self.upsample_positions = tuple(int(v) for v in self.upsample_positions)
        self.validate()

    def validate(self) -> None:
        if len(self.channels_per_stage) != TRUNK_DEPTH:
            raise ConfigError(
                f"channels_per_stage: trunk must have exactly {TRUNK_DEPTH} conv layers, "
                f"got {len(self.channels_per_stage)}"
            )
        if any(c < 1 for c in self.channels_per_stage):
            raise ConfigError("channels_per_stage: every layer needs at least one kernel")
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise ConfigError(f"input_shape must be three positive extents, got {self.input_shape}")
        if len(self.pool_positions) != len(self.upsample_positions):
            raise ConfigError(
                "pool_positions/upsample_positions: decoder must undo every pooling "
                f"({len(self.pool_positions)} pools vs {len(self.upsample_positions)} upsamples)"
            )
        positions = self.pool_positions + self.upsample_positions
        if any(not 1 <= p <= TRUNK_DEPTH for p in positions) or len(set(positions)) != len(positions):
            raise ConfigError("pool/upsample positions must be distinct trunk layer numbers in 1..14")
        level = 0
        for layer in range(1, TRUNK_DEPTH + 1):
            level += (layer in self.pool_positions) - (layer in self.upsample_positions)
            if level < 0:
                raise ConfigError(f"upsample at layer {layer} precedes its matching pool")
        factor = 2 ** len(self.pool_positions)
        _, y, x = self.input_shape
        if y % factor or x % factor:
            raise ConfigError(f"input_shape: y and x must be divisible by 2^{len(self.pool_positions)}={factor}")
        if self.fc_hidden < 2:
            raise ConfigError("fc_hidden must be at least 2")
        if self.cls_conv_channels < 1:
            raise ConfigError("cls_conv_channels must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def signature(self) -> dict:
        """Structural description; two configs with equal signatures share a weights layout."""
        return {
            "input_shape": list(self.input_shape),
            "channels_per_stage": list(self.channels_per_stage),
            "pool_positions": list(self.pool_positions),
            "upsample_positions": list(self.upsample_positions),
            "fc_hidden": self.fc_hidden,
            "cls_conv_channels": self.cls_conv_channels,
            "skips": self.skips,
        }

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.signature(), sort_keys=True).encode()).digest()


@dataclass
class ConvBlock:
    """3x3x3 conv, optionally followed by batch norm (with running statistics)."""

    weight: Tensor
    bias: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def params(self) -> list[tuple[str, Tensor]]:
        out = [("weight", self.weight), ("bias", self.bias)]
        if self.gamma is not None:
            out += [("gamma", self.gamma), ("beta", self.beta)]
        return out

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        if self.running_mean is None:
            return []
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


@dataclass
class Dense:
    weight: Tensor
    bias: Tensor

    def params(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]


@dataclass
class MultiTaskNet:
    cfg: NetworkConfig
    trunk: list[ConvBlock]
    seg_conv: ConvBlock
    cls_conv: ConvBlock
    fc_hidden: Dense
    fc_out: Dense
    training: bool = field(default=True)

    def train(self) -> "MultiTaskNet":
        self.training = True
        return self

    def eval(self) -> "MultiTaskNet":
        self.training = False
        return self

    def _modules(self) -> Iterator[tuple[str, object]]:
        for i, block in enumerate(self.trunk, 1):
            yield f"trunk{i:02d}", block
        yield "seg_conv", self.seg_conv
        yield "cls_conv", self.cls_conv
        yield "cls_fc1", self.fc_hidden
        yield "cls_fc2", self.fc_out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{m}.{n}", t) for m, mod in self._modules() for n, t in mod.params()]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [
            (f"{m}.{n}", a)
            for m, mod in self._modules()
            if isinstance(mod, ConvBlock)
            for n, a in mod.buffers()
        ]

    def head_parameters(self, head: str) -> list[Tensor]:
        prefixes = {"seg": ("seg_conv",), "cls": ("cls_conv", "cls_fc1", "cls_fc2")}[head]
        return [t for n, t in self.named_parameters() if n.split(".")[0] in prefixes]

    def trunk_parameters(self) -> list[Tensor]:
        return [t for n, t in self.named_parameters() if n.startswith("trunk")]

    def layer_names(self) -> list[str]:
        trunk = [f"trunk{i:02d}:conv-bn-relu" for i in range(1, TRUNK_DEPTH + 1)]
        seg = ["seg:conv", "seg:sigmoid"]
        cls = ["cls:conv-bn-relu", f"cls:fc{self.cfg.fc_hidden}-relu", "cls:fc2-softmax"]
        return trunk + seg + cls

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def _block(self, block: ConvBlock, h: Tensor) -> Tensor:
        h = conv3d(h, block.weight, block.bias, padding="same")
        h = batch_norm(h, block.gamma, block.beta, block.running_mean, block.running_var,
                       training=self.training, momentum=self.cfg.bn_momentum, eps=self.cfg.bn_eps)
        return relu(h)

    def features(self, x: Tensor) -> Tensor:
        """Shared trunk output, at the input's spatial resolution.

        With ``cfg.skips`` each upsampled map is concatenated with the
        encoder map taken just before the matching pool.
        """
        pools, ups = set(self.cfg.pool_positions), set(self.cfg.upsample_positions)
        saved = []
        h = x
        for i, block in enumerate(self.trunk, 1):
            h = self._block(block, h)
            if i in pools:
                saved.append(h)
                h = max_pool_xy(h)
            if i in ups:
                h = bilinear_upsample_xy(h)
                if self.cfg.skips:
                    h = concat([h, saved.pop()], axis=1)
        return h

    def seg_head(self, h: Tensor) -> Tensor:
        return sigmoid(conv3d(h, self.seg_conv.weight, self.seg_conv.bias, padding="same"))

    def cls_head(self, h: Tensor) -> Tensor:
        h = flatten(self._block(self.cls_conv, h))
        h = relu(fully_connected(h, self.fc_hidden.weight, self.fc_hidden.bias))
        return softmax(fully_connected(h, self.fc_out.weight, self.fc_out.bias))

    def __call__(self, batch) -> tuple[Tensor, Tensor]:
        return forward(self, batch)


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype), requires_grad=True)


def _conv_block(rng, cin: int, cout: int, dtype, with_bn: bool = True) -> ConvBlock:
    block = ConvBlock(
        weight=_he(rng, (cout, cin, 3, 3, 3), cin * 27, dtype),
        bias=Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
    )
    if with_bn:
        block.gamma = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
        block.beta = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        block.running_mean = np.zeros(cout, dtype=dtype)
        block.running_var = np.ones(cout, dtype=dtype)
    return block


def _channel_flow(cfg: NetworkConfig) -> tuple[list[int], int]:
    ins, saved, cin = [], [], 1
    for i, cout in enumerate(cfg.channels_per_stage, 1):
        ins.append(cin)
        cin = cout
        if i in cfg.pool_positions:
            saved.append(cout)
        if i in cfg.upsample_positions and cfg.skips:
            cin += saved.pop()
    return ins, cin


def trunk_input_channels(cfg: NetworkConfig) -> list[int]:
    return _channel_flow(cfg)[0]


def feature_channels(cfg: NetworkConfig) -> int:
    """Channels of the trunk output that both heads read."""
    return _channel_flow(cfg)[1]


def flat_features(cfg: NetworkConfig) -> int:
    z, y, x = cfg.input_shape
    return cfg.cls_conv_channels * z * y * x


def expected_parameter_count(cfg: NetworkConfig) -> int:
    """Closed-form parameter count, independent of :func:`build_network`."""
    ch = cfg.channels_per_stage
    # each upsample pairs with the most recent unmatched pool
    extra, open_pools = {}, []
    for layer in range(1, TRUNK_DEPTH + 1):
        if layer in cfg.pool_positions:
            open_pools.append(layer)
        if layer in cfg.upsample_positions and cfg.skips:
            extra[layer] = ch[open_pools.pop() - 1]
    total, cin = 0, 1
    for i, cout in enumerate(ch, 1):
        total += 27 * cin * cout + cout + 2 * cout
        cin = cout + extra.get(i, 0)
    cc = cfg.cls_conv_channels
    total += 27 * cin + 1
    total += 27 * cin * cc + cc + 2 * cc
    total += flat_features(cfg) * cfg.fc_hidden + cfg.fc_hidden
    total += cfg.fc_hidden * 2 + 2
    return total


def build_network(cfg: NetworkConfig) -> MultiTaskNet:
    cfg.validate()
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    trunk = []
    for cin, cout in zip(trunk_input_channels(cfg), cfg.channels_per_stage):
        trunk.append(_conv_block(rng, cin, cout, dtype))
    cin = feature_channels(cfg)
    seg_conv = _conv_block(rng, cin, 1, dtype, with_bn=False)
    cls_conv = _conv_block(rng, cin, cfg.cls_conv_channels, dtype)
    n_flat = flat_features(cfg)
    fc1 = Dense(_he(rng, (cfg.fc_hidden, n_flat), n_flat, dtype),
                Tensor(np.zeros(cfg.fc_hidden, dtype=dtype), requires_grad=True))
    fc2 = Dense(_he(rng, (2, cfg.fc_hidden), cfg.fc_hidden, dtype),
                Tensor(np.zeros(2, dtype=dtype), requires_grad=True))
    return MultiTaskNet(cfg, trunk, seg_conv, cls_conv, fc1, fc2)


def forward(net: MultiTaskNet, batch) -> tuple[Tensor, Tensor]:
    """One trunk pass feeding both heads: (class probabilities [b, 2], mask probabilities [b, 1, z, y, x])."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=net.cfg.dtype))
    if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != net.cfg.input_shape:
        raise ShapeError(f"expected batch [b, 1, {', '.join(map(str, net.cfg.input_shape))}], got {x.shape}")
    if x.data.dtype != np.dtype(net.cfg.dtype):
        x = Tensor(x.data.astype(net.cfg.dtype))
    h = net.features(x)
    return net.cls_head(h), net.seg_head(h)


def predict_batch(net: MultiTaskNet, patches: np.ndarray, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode probabilities for a stack of [n, z, y, x] (or [n, 1, z, y, x]) patches."""
    patches = np.asarray(patches)
    if patches.ndim == 4:
        patches = patches[:, None]
    was_training = net.training
    net.eval()
    probs, segs = [], []
    try:
        with no_grad():
            for i in range(0, len(patches), batch_size):
                c, s = forward(net, patches[i : i + batch_size])
                probs.append(c.data)
                segs.append(s.data)
    finally:
        net.training = was_training
    if not probs:
        z, y, x = net.cfg.input_shape
        return np.zeros((0, 2)), np.zeros((0, 1, z, y, x))
    return np.concatenate(probs), np.concatenate(segs)


def predict(net: MultiTaskNet, patch: np.ndarray, seg_threshold: float = 0.5) -> tuple[float, np.ndarray]:
    """Nodule probability and binary mask (``prob >= seg_threshold``) for one [z, y, x] patch."""
    if not 0.0 < seg_threshold < 1.0:
        raise ConfigError("seg_threshold must lie in (0, 1)")
    probs, segs = predict_batch(net, np.asarray(patch)[None])
    return float(probs[0, NODULE_CLASS]), (segs[0, 0] >= seg_threshold).astype(np.uint8)


# ---------------------------------------------------------------------------
# weights file: "NDLW" | u32 version | 32-byte config digest | u32 len + JSON signature
#               | u32 array count | arrays | 32-byte sha256 of the array section
# array: u16 len + utf8 name | u8 ndim | u32 dims | little-endian f64 row-major values

WEIGHTS_MAGIC = b"NDLW"
WEIGHTS_VERSION = 1


def _state_arrays(net: MultiTaskNet) -> list[tuple[str, np.ndarray]]:
    return [(n, t.data) for n, t in net.named_parameters()] + net.named_buffers()


def save_weights(net: MultiTaskNet, path) -> None:
    payload = bytearray()
    arrays = _state_arrays(net)
    for name, arr in arrays:
        raw = name.encode()
        payload += struct.pack("<H", len(raw)) + raw
        payload += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    sig = json.dumps(net.cfg.signature(), sort_keys=True).encode()
    header = (
        WEIGHTS_MAGIC
        + struct.pack("<I", WEIGHTS_VERSION)
        + net.cfg.digest()
        + struct.pack("<I", len(sig))
        + sig
        + struct.pack("<I", len(arrays))
    )
    Path(path).write_bytes(header + bytes(payload) + hashlib.sha256(payload).digest())


def load_weights(path, cfg: NetworkConfig) -> MultiTaskNet:
    blob = Path(path).read_bytes()
    if blob[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a weights file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{path}: unsupported weights version {version}")
    digest = blob[8:40]
    (sig_len,) = struct.unpack_from("<I", blob, 40)
    file_sig = blob[44 : 44 + sig_len].decode()
    if digest != cfg.digest():
        ours = json.dumps(cfg.signature(), sort_keys=True)
        raise FormatError(f"{path}: layer signature mismatch: file has {file_sig}, config has {ours}")
    off = 44 + sig_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    payload_start = off
    net = build_network(cfg)
    expected = _state_arrays(net)
    if count != len(expected):
        raise FormatError(f"{path}: expected {len(expected)} arrays, file has {count}")
    for name, target in expected:
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        got = blob[off : off + n].decode()
        off += n
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if got != name or tuple(shape) != target.shape:
            raise FormatError(f"{path}: array {got}{list(shape)} does not match {name}{list(target.shape)}")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        target[...] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape)
        off += nbytes
    if blob[off:] != hashlib.sha256(blob[payload_start:off]).digest():
        raise FormatError(f"{path}: checksum mismatch (file truncated or corrupted)")
    return net


def config_to_dict(cfg: NetworkConfig) -> dict:
    return asdict(cfg)
