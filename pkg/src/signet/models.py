"""Differentiable classifier graphs built on :mod:`signet.numerics`.

Architectures
-------------
``signet``
    S2M (trainable per-channel filters, N(0, 1) init) -> stem conv (optional
    2x2 max pool) -> residual stages -> global average pool -> dense.
``signet2``
    1D residual stages on the raw 2 x N signal -> per-feature-channel S2M ->
    the remaining 2D residual stages -> pool -> dense.
``cnn1d``
    Residual stacks of 1D convs with max pooling, then two dense layers.
``cnn2d_narrow``
    Two narrow 2D convs over the signal laid out as a 2 x N image.
``transform_cnn``
    A fixed, non-trainable transform (gram, gaf, mtf, constellation,
    reshape) feeding the same 2D backbone as ``signet``.

Model parameters live in plain float64 arrays owned by the graph; each
forward pass records them on a fresh :class:`~signet.numerics.Tape`.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import flatconf
from . import numerics as nx
from . import transforms
from .exceptions import ArchitectureMismatchError, BadMagicError, ChecksumError, ConfigError, ShapeError
from .exceptions import TruncatedError, VersionMismatchError
from .validation import check_iq_array

ARCHITECTURES = ("signet", "signet2", "cnn1d", "cnn2d_narrow", "transform_cnn")
FIXED_TRANSFORMS = ("gram", "gaf", "mtf", "constellation", "reshape")


@dataclass
class ModelConfig:
    architecture: str = "signet"
    num_classes: int = 4
    input_length: int = 128
    k: int = 3
    stride: int = 1
    widths: tuple = (16, 32, 64, 128)
    blocks: tuple = (1, 1, 1, 1)
    stem_kernel: int = 4
    stem_stride: int = 4
    stem_pool: bool = False
    frontend_stages: int = 2
    batch_norm: bool = True
    psd_filters: bool = False
    transform: str = "gram"
    gaf_variant: str = "summation"
    mtf_bins: int = 8
    constellation_grid: int = 32
    constellation_radius: float = 1.0
    cnn1d_stacks: int = 6
    cnn1d_width: int = 16
    narrow_widths: tuple = (32, 16)
    hidden: int = 64
    seed: int = 0

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.k < 2 or self.stride < 1:
            raise ConfigError("S2M window k must be >= 2 and stride >= 1")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be positive")
        if len(self.blocks) != len(self.widths) or any(b < 1 for b in self.blocks):
            raise ConfigError("blocks must give a positive count per stage")
        if self.architecture == "signet2" and not 0 <= self.frontend_stages < len(self.widths):
            raise ConfigError("frontend_stages must leave at least one 2D stage")
        if self.architecture == "transform_cnn" and self.transform not in FIXED_TRANSFORMS:
            raise ConfigError(f"unknown fixed transform {self.transform!r}")
        if self.architecture == "cnn1d" and self.input_length >> self.cnn1d_stacks < 1:
            raise ConfigError("too many cnn1d stacks for this input length")
        return self

    def arch_hash(self) -> str:
        """Digest of every field except the init seed."""
        items = {k: v for k, v in flatconf.to_flat(self).items() if k != "seed"}
        return hashlib.sha256(flatconf.dumps(items).encode()).hexdigest()


class _Pass:
    """Per-forward bookkeeping: parameter nodes and normalization mode."""

    def __init__(self, model, tape, mode):
        self.model = model
        self.tape = tape
        self.mode = mode
        self._nodes = {}

    def p(self, name):
        node = self._nodes.get(name)
        if node is None:
            m = self.model
            if name in m.params:
                node = self.tape.param(m.params[name], name)
            else:
                node = self.tape.constant(m.frozen[name], name)
            self._nodes[name] = node
        return node


class ModelGraph:
    """A classifier: parameter registry plus an architecture-specific forward."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self.params: dict[str, np.ndarray] = {}
        self.frozen: dict[str, np.ndarray] = {}  # non-trainable tensors (fixed filters)
        self.buffers: dict[str, np.ndarray] = {}  # batch-norm running statistics
        self._rng = np.random.default_rng(config.seed)
        self.feature_dim = None
        self._declare()
        del self._rng

    # -- declaration helpers -------------------------------------------------

    def _kaiming(self, name, shape, fan_in):
        self.params[name] = self._rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)

    def _conv(self, name, cin, cout, kshape, bias):
        fan_in = cin * int(np.prod(kshape))
        self._kaiming(name + ".w", (cout, cin) + tuple(kshape), fan_in)
        if bias:
            self.params[name + ".b"] = np.zeros(cout)

    def _bn(self, name, c):
        self.params[name + ".gamma"] = np.ones(c)
        self.params[name + ".beta"] = np.zeros(c)
        self.buffers[name + ".mean"] = np.zeros(c)
        self.buffers[name + ".var"] = np.ones(c)

    def _dense(self, name, nin, nout):
        self._kaiming(name + ".w", (nin, nout), nin)
        self.params[name + ".b"] = np.zeros(nout)

    def _conv_bn(self, name, cin, cout, kshape):
        bn = self.config.batch_norm
        self._conv(name, cin, cout, kshape, bias=not bn)
        if bn:
            self._bn(name + ".bn", cout)

    def _res_block(self, name, cin, cout, stride, ndim):
        ks = (3,) * ndim
        self._conv_bn(name + ".conv1", cin, cout, ks)
        self._conv_bn(name + ".conv2", cout, cout, ks)
        if stride != 1 or cin != cout:
            self._conv_bn(name + ".short", cin, cout, (1,) * ndim)

    def _s2m_filters(self, name, channels, k, trainable=True):
        if not trainable:
            self.frozen[name] = np.broadcast_to(np.eye(k), (channels, k, k)).copy()
        else:
            self.params[name] = self._rng.standard_normal((channels, k, k))

    def _stages(self, prefix, cin, widths, blocks, ndim):
        for s, (w, nb) in enumerate(zip(widths, blocks)):
            for b in range(nb):
                self._res_block(f"{prefix}{s}.{b}", cin, w, 2 if b == 0 else 1, ndim)
                cin = w
        return cin

    # -- forward helpers -------------------------------------------------------

    def _apply_conv_bn(self, ctx, name, x, stride, padding, ndim, relu=True):
        bn = self.config.batch_norm
        conv = nx.conv2d if ndim == 2 else nx.conv1d
        b = None if bn else ctx.p(name + ".b")
        y = conv(x, ctx.p(name + ".w"), b, stride=stride, padding=padding)
        if bn:
            y = nx.batch_norm(
                y, ctx.p(name + ".bn.gamma"), ctx.p(name + ".bn.beta"),
                self.buffers[name + ".bn.mean"], self.buffers[name + ".bn.var"], mode=ctx.mode,
            )
        return nx.relu(y) if relu else y

    def _apply_res_block(self, ctx, name, x, stride, ndim):
        y = self._apply_conv_bn(ctx, name + ".conv1", x, stride, 1, ndim)
        y = self._apply_conv_bn(ctx, name + ".conv2", y, 1, 1, ndim, relu=False)
        if name + ".short.w" in self.params:
            x = self._apply_conv_bn(ctx, name + ".short", x, stride, 0, ndim, relu=False)
        return nx.relu(nx.add(y, x))

    def _apply_stages(self, ctx, prefix, x, blocks, ndim):
        for s, nb in enumerate(blocks):
            for b in range(nb):
                x = self._apply_res_block(ctx, f"{prefix}{s}.{b}", x, 2 if b == 0 else 1, ndim)
        return x

    def _apply_s2m(self, ctx, name, x):
        F = ctx.p(name)
        if self.config.psd_filters and name in self.params:
            # F = G^T G keeps every feature matrix positive semi-definite
            F = nx.matmul(_transpose_last(F), F)
        return transforms.s2m(x, F, self.config.stride)

    # -- public API ------------------------------------------------------------

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @property
    def arch_hash(self) -> str:
        return self.config.arch_hash()

    def forward(self, X, mode="eval", tape=None, return_features=False):
        """Run a batch (B, 2, N) through the graph; returns logits node (and features node)."""
        X = check_iq_array(X)
        if X.shape[2] != self.config.input_length:
            raise ShapeError(f"model expects length {self.config.input_length}, got {X.shape[2]}")
        tape = nx.Tape() if tape is None else tape
        ctx = _Pass(self, tape, mode)
        feats = self._features(ctx, tape.constant(X, "input"))
        logits = nx.dense(feats, ctx.p("head.w"), ctx.p("head.b"))
        return (logits, feats) if return_features else logits

    def logits(self, X, batch_size=128):
        X = check_iq_array(X)
        out = [self.forward(X[i : i + batch_size]).value for i in range(0, len(X), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))

    def features(self, X, batch_size=128):
        X = check_iq_array(X)
        out = [
            self.forward(X[i : i + batch_size], return_features=True)[1].value
            for i in range(0, len(X), batch_size)
        ]
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim))

    def state_dict(self) -> dict:
        """Copy of every stored tensor, keyed ``param:``/``frozen:``/``buffer:`` + name."""
        out = {}
        for kind, store in (("param", self.params), ("frozen", self.frozen), ("buffer", self.buffers)):
            for name, v in store.items():
                out[f"{kind}:{name}"] = v.copy()
        return out

    def load_state_dict(self, state: dict):
        stores = {"param": self.params, "frozen": self.frozen, "buffer": self.buffers}
        expected = set(self.state_dict())
        if set(state) != expected:
            raise ArchitectureMismatchError("state tensors do not match the model registry")
        for key, v in state.items():
            kind, name = key.split(":", 1)
            if stores[kind][name].shape != v.shape:
                raise ArchitectureMismatchError(f"shape mismatch for {key}: {v.shape}")
            stores[kind][name][...] = v

    def _declare(self):
        raise NotImplementedError

    def _features(self, ctx, x):
        raise NotImplementedError


def _check_windows(length, k):
    if length < k:
        raise ConfigError(f"input length {length} shorter than S2M window {k}")


def _transpose_last(F):
    v = F.value
    return F.tape.record(np.swapaxes(v, -1, -2), "transpose", (F,), lambda g: (np.swapaxes(g, -1, -2),))


class _Backbone2D(ModelGraph):
    """Stem conv (optionally followed by a 2x2 max pool) -> stride-2 residual stages -> GAP."""

    in_channels = 2

    def _declare_backbone(self, cin):
        c = self.config
        self._conv_bn("stem", cin, c.widths[0], (c.stem_kernel, c.stem_kernel))
        last = self._stages("stage", c.widths[0], c.widths, c.blocks, 2)
        self._dense("head", last, c.num_classes)
        self.feature_dim = last

    def _apply_backbone(self, ctx, img):
        c = self.config
        y = self._apply_conv_bn(ctx, "stem", img, c.stem_stride, (c.stem_kernel - 1) // 2 if c.stem_stride == 1 else 0, 2)
        if c.stem_pool:
            y = nx.max_pool2d(y, 2)
        y = self._apply_stages(ctx, "stage", y, self.config.blocks, 2)
        return nx.global_avg_pool(y)


class SigNetMini(_Backbone2D):
    def _declare(self):
        c = self.config
        _check_windows(c.input_length, c.k)
        self._s2m_filters("s2m.F", 2, c.k)
        self._declare_backbone(2)

    def _features(self, ctx, x):
        return self._apply_backbone(ctx, self._apply_s2m(ctx, "s2m.F", x))


class SigNet2Mini(ModelGraph):
    def _declare(self):
        c = self.config
        nf = c.frontend_stages
        length = c.input_length
        for _ in range(nf):
            length = nx.conv_output_length(length, 3, 2, 1)
        if length < c.k:
            raise ConfigError(f"front-end output length {length} shorter than S2M window {c.k}")
        cin = self._stages("front", 2, c.widths[:nf], c.blocks[:nf], 1)
        self._s2m_filters("s2m.F", cin, c.k)
        last = self._stages("stage", cin, c.widths[nf:], c.blocks[nf:], 2)
        self._dense("head", last, c.num_classes)
        self.feature_dim = last

    def _features(self, ctx, x):
        c = self.config
        nf = c.frontend_stages
        y = self._apply_stages(ctx, "front", x, c.blocks[:nf], 1)
        y = self._apply_s2m(ctx, "s2m.F", y)
        y = self._apply_stages(ctx, "stage", y, c.blocks[nf:], 2)
        return nx.global_avg_pool(y)


class TransformCNN(_Backbone2D):
    def _declare(self):
        c = self.config
        if c.transform == "gram":
            _check_windows(c.input_length, c.k)
            self._s2m_filters("s2m.F", 2, c.k, trainable=False)
            cin = 2
        elif c.transform in ("gaf", "mtf"):
            cin = 2
        else:
            cin = 1
            if c.transform == "reshape":
                transforms.reshape_square(np.zeros((2, c.input_length)))
        self._declare_backbone(cin)

    def _image(self, X):
        c = self.config
        if c.transform == "gaf":
            return transforms.gaf(X, c.gaf_variant)
        if c.transform == "mtf":
            return np.stack([np.stack([transforms.mtf(ch, c.mtf_bins) for ch in s]) for s in X])
        if c.transform == "constellation":
            return np.stack(
                [transforms.constellation_density(s, c.constellation_grid, c.constellation_radius)[None] for s in X]
            )
        return np.stack([transforms.reshape_square(s)[None] for s in X])

    def _features(self, ctx, x):
        if self.config.transform == "gram":
            img = self._apply_s2m(ctx, "s2m.F", x)
        else:
            img = ctx.tape.constant(self._image(x.value))
        return self._apply_backbone(ctx, img)


class CNN1D(ModelGraph):
    """Residual stacks: 1x1 conv, two residual units of two k=3 convs, max pool 2."""

    def _declare(self):
        c = self.config
        cin, w = 2, c.cnn1d_width
        for s in range(c.cnn1d_stacks):
            self._conv_bn(f"stack{s}.in", cin, w, (1,))
            for u in range(2):
                self._conv_bn(f"stack{s}.unit{u}.conv1", w, w, (3,))
                self._conv_bn(f"stack{s}.unit{u}.conv2", w, w, (3,))
            cin = w
        flat = w * (c.input_length >> c.cnn1d_stacks)
        self._dense("fc", flat, c.hidden)
        self._dense("head", c.hidden, c.num_classes)
        self.feature_dim = c.hidden

    def _features(self, ctx, x):
        c = self.config
        y = x
        for s in range(c.cnn1d_stacks):
            y = self._apply_conv_bn(ctx, f"stack{s}.in", y, 1, 0, 1, relu=False)
            for u in range(2):
                name = f"stack{s}.unit{u}"
                z = self._apply_conv_bn(ctx, name + ".conv1", y, 1, 1, 1)
                z = self._apply_conv_bn(ctx, name + ".conv2", z, 1, 1, 1, relu=False)
                y = nx.relu(nx.add(z, y))
            y = nx.max_pool1d(y, 2)
        y = nx.reshape(y, (y.shape[0], -1))
        return nx.relu(nx.dense(y, ctx.p("fc.w"), ctx.p("fc.b")))


class NarrowCNN2D(ModelGraph):
    """Conv (1x3) -> ReLU -> Conv (2x3) -> ReLU -> dense -> ReLU, over a 1 x 2 x N image."""

    def _declare(self):
        c = self.config
        w1, w2 = c.narrow_widths
        self._conv("conv1", 1, w1, (1, 3), bias=True)
        self._conv("conv2", w1, w2, (2, 3), bias=True)
        self._dense("fc", w2 * c.input_length, c.hidden)
        self._dense("head", c.hidden, c.num_classes)
        self.feature_dim = c.hidden

    def _features(self, ctx, x):
        B = x.shape[0]
        y = nx.reshape(x, (B, 1, 2, x.shape[2]))
        y = nx.relu(nx.conv2d(y, ctx.p("conv1.w"), ctx.p("conv1.b"), padding=(0, 1)))
        y = nx.relu(nx.conv2d(y, ctx.p("conv2.w"), ctx.p("conv2.b"), padding=(0, 1)))
        y = nx.reshape(y, (B, -1))
        return nx.relu(nx.dense(y, ctx.p("fc.w"), ctx.p("fc.b")))


_CLASSES = {
    "signet": SigNetMini,
    "signet2": SigNet2Mini,
    "cnn1d": CNN1D,
    "cnn2d_narrow": NarrowCNN2D,
    "transform_cnn": TransformCNN,
}


def build_model(cfg: ModelConfig) -> ModelGraph:
    cfg.validate()
    return _CLASSES[cfg.architecture](cfg)


def build_signet_mini(cfg: ModelConfig) -> ModelGraph:
    return build_model(_with_arch(cfg, "signet"))


def build_signet2_mini(cfg: ModelConfig) -> ModelGraph:
    return build_model(_with_arch(cfg, "signet2"))


def build_baseline(cfg: ModelConfig, kind: str) -> ModelGraph:
    if kind not in ("cnn1d", "cnn2d_narrow", "transform_cnn"):
        raise ConfigError(f"unknown baseline kind {kind!r}")
    return build_model(_with_arch(cfg, kind))


def _with_arch(cfg, arch):
    values = flatconf.to_flat(cfg)
    values["architecture"] = arch
    return ModelConfig(**values)


# -- checkpoints -------------------------------------------------------------
#
# "SIGC" | version u16 | arch hash (64 ASCII hex) | config echo (u32 len + UTF-8)
# | tensor count u32 | per tensor: key (u16 len + UTF-8), ndim u8, dims u32*ndim,
# f64 payload | meta (u32 len + UTF-8 key=value) | CRC32 u32 of all preceding bytes

CKPT_MAGIC = b"SIGC"
CKPT_VERSION = 1


def checkpoint_bytes(state: dict, config: ModelConfig, meta: dict | None = None) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), config.arch_hash().encode("ascii")]
    echo = flatconf.dumps(flatconf.to_flat(config)).encode()
    parts.append(struct.pack("<I", len(echo)) + echo)
    parts.append(struct.pack("<I", len(state)))
    for key, arr in state.items():
        kb = key.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(kb)) + kb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())
    mb = flatconf.dumps(meta or {}).encode()
    parts.append(struct.pack("<I", len(mb)) + mb)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: ModelGraph, path, state: dict | None = None, meta: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model.state_dict() if state is None else state, model.config, meta))


def parse_checkpoint(buf: bytes):
    """Return ``(config, state, meta)`` from checkpoint bytes."""
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError("not a SIGC checkpoint")
    if len(buf) < 10 + 64 + 4:
        raise TruncatedError("checkpoint truncated")
    if zlib.crc32(buf[:-4]) != struct.unpack("<I", buf[-4:])[0]:
        raise ChecksumError("checkpoint CRC32 mismatch")
    pos = 4
    (version,) = struct.unpack_from("<H", buf, pos)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    pos += 2
    stored_hash = buf[pos : pos + 64].decode("ascii")
    pos += 64
    try:
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        config = flatconf.from_flat(ModelConfig, flatconf.loads(buf[pos : pos + n].decode()))
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (kl,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            key = buf[pos : pos + kl].decode()
            pos += kl
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            state[key] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
        (ml,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = flatconf.loads(buf[pos : pos + ml].decode())
    except (struct.error, ValueError) as exc:
        raise TruncatedError(f"malformed checkpoint: {exc}") from None
    if config.arch_hash() != stored_hash:
        raise ArchitectureMismatchError("config echo does not match stored architecture hash")
    return config, state, meta


def load_checkpoint(path, expected_hash: str | None = None):
    """Rebuild the model stored at ``path``; returns ``(model, meta)``."""
    with open(path, "rb") as fh:
        config, state, meta = parse_checkpoint(fh.read())
    if expected_hash is not None and config.arch_hash() != expected_hash:
        raise ArchitectureMismatchError("checkpoint architecture differs from the requested one")
    model = build_model(config)
    model.load_state_dict(state)
    return model, meta
