"""ConvCsiNet and ShuffleCsiNet graph assembly, encode/decode, weight files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from csilab import layers
from csilab.autodiff import ParameterStore, Tape
from csilab.tensor import FormatError, ShapeError

CONVCSINET = "convcsinet"
SHUFFLECSINET = "shufflecsinet"
_ARCH_IDS = {CONVCSINET: 1, SHUFFLECSINET: 2}
_ARCH_NAMES = {v: k for k, v in _ARCH_IDS.items()}

WEIGHTS_MAGIC = b"CSIW"
WEIGHTS_VERSION = 1


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = CONVCSINET
    cr_den: int = 16  # compression ratio 1/cr_den
    nc_prime: int = 32
    nt: int = 32
    groups: int = 8
    leaky_alpha: float = 0.3
    bn_eps: float = 1e-3
    bn_momentum: float = 0.99
    decoder_channels: tuple[int, int, int] = (512, 256, 128)

    def __post_init__(self):
        if self.architecture not in _ARCH_IDS:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if not (_is_pow2(self.nc_prime) and _is_pow2(self.nt) and self.nc_prime >= 16 and self.nt >= 16):
            raise ValueError("input dims must be powers of two >= 16")
        if self.codeword_len % 4 or self.codeword_len <= 0:
            raise ValueError(f"codeword length {self.codeword_len} must be a positive multiple of 4")

    @property
    def codeword_len(self) -> int:
        return (2 * self.nc_prime * self.nt) // self.cr_den

    @property
    def codeword_channels(self) -> int:
        return self.codeword_len // 4


class _Builder:
    """Appends parameterized layer blocks to a tape, registering parameters on first use."""

    def __init__(self, tape: Tape, spec: ModelSpec):
        self.tape = tape
        self.spec = spec
        self.store = tape.store
        if not hasattr(tape, "blocks"):
            tape.blocks = {}

    def _ensure(self, name, make, trainable=True):
        if name not in self.store:
            self.store.register(name, make(), trainable)
        return name

    def conv(self, x, name, ci, co, k=3, stride=1, init="he", block=None):
        rng, dt = self.store.rng, self.store.dtype
        fan_in = ci * k * k
        if init == "he":
            wname = self._ensure(f"{name}.w", lambda: layers.he_uniform(rng, (co, ci, k, k), fan_in, dt))
        else:
            wname = self._ensure(
                f"{name}.w", lambda: layers.glorot_uniform(rng, (co, ci, k, k), fan_in, co * k * k, dt)
            )
        bname = self._ensure(f"{name}.b", lambda: np.zeros(co, dtype=dt))
        return self.tape.add("conv2d", (x,), (wname, bname), stride=stride, name=name, block=block)

    def dwconv(self, x, name, c, k=3, stride=2, block=None):
        rng, dt = self.store.rng, self.store.dtype
        wname = self._ensure(f"{name}.w", lambda: layers.he_uniform(rng, (c, 1, k, k), k * k, dt))
        return self.tape.add("dwconv2d", (x,), (wname,), stride=stride, name=name, block=block)

    def bn(self, x, name, c, block=None):
        dt = self.store.dtype
        g = self._ensure(f"{name}.gamma", lambda: np.ones(c, dtype=dt))
        b = self._ensure(f"{name}.beta", lambda: np.zeros(c, dtype=dt))
        rm = self._ensure(f"{name}.running_mean", lambda: np.zeros(c, dtype=dt), trainable=False)
        rv = self._ensure(f"{name}.running_var", lambda: np.ones(c, dtype=dt), trainable=False)
        return self.tape.add(
            "batch_norm", (x,), (g, b, rm, rv),
            momentum=self.spec.bn_momentum, eps=self.spec.bn_eps, name=name, block=block,
        )

    def lrelu(self, x, name, block=None):
        return self.tape.add("leaky_relu", (x,), alpha=self.spec.leaky_alpha, name=name, block=block)

    def conv_bn_act(self, x, name, ci, co, k=3, stride=1, block=None):
        y = self.conv(x, name, ci, co, k=k, stride=stride, block=block)
        y = self.bn(y, f"{name}.bn", co, block=block)
        return self.lrelu(y, f"{name}.act", block=block)

    def ecn_unit(self, x, name, ci, co):
        """Average pooling then 3x3 conv + BN + LeakyReLU; halves space, sets channels."""
        y = self.tape.add("avg_pool2", (x,), name=f"{name}.pool", block=name)
        return self.conv_bn_act(y, f"{name}.conv", ci, co, block=name)

    def dn_unit(self, x, name, ci, co):
        """Bilinear upsample then 3x3 conv + BN + LeakyReLU; doubles space, sets channels."""
        y = self.tape.add("upsample2", (x,), name=f"{name}.up", block=name)
        return self.conv_bn_act(y, f"{name}.conv", ci, co, block=name)

    def refinenet_unit(self, x, name):
        """Residual 2->8->16->2 conv chain with identity skip."""
        y = self.conv_bn_act(x, f"{name}.conv1", 2, 8, block=name)
        y = self.conv_bn_act(y, f"{name}.conv2", 8, 16, block=name)
        y = self.conv(y, f"{name}.conv3", 16, 2, block=name)
        y = self.bn(y, f"{name}.conv3.bn", 2, block=name)
        y = self.tape.add("add", (x, y), name=f"{name}.add", block=name)
        return self.lrelu(y, f"{name}.act", block=name)

    def sn_unit(self, x, name, c):
        """Dual-branch depthwise downsampling unit with concat and channel shuffle.

        Both branches see the full C-channel input and keep width C, so the
        unit halves the spatial extents and doubles the channel count.
        """
        if c % self.spec.groups:
            raise ShapeError(f"SN unit width {c} not divisible by {self.spec.groups} shuffle groups")
        blk = name
        # branch 1: depthwise 3x3 stride 2 (BN), then 1x1 conv (BN, LeakyReLU)
        b1 = self.dwconv(x, f"{name}.b1.dw", c, block=blk)
        b1 = self.bn(b1, f"{name}.b1.dw.bn", c, block=blk)
        b1 = self.conv_bn_act(b1, f"{name}.b1.pw", c, c, k=1, block=blk)
        # branch 2: 1x1 conv (BN, LeakyReLU), depthwise 3x3 stride 2 (BN), 1x1 conv (BN, LeakyReLU)
        b2 = self.conv_bn_act(x, f"{name}.b2.pw1", c, c, k=1, block=blk)
        b2 = self.dwconv(b2, f"{name}.b2.dw", c, block=blk)
        b2 = self.bn(b2, f"{name}.b2.dw.bn", c, block=blk)
        b2 = self.conv_bn_act(b2, f"{name}.b2.pw2", c, c, k=1, block=blk)
        y = self.tape.add("concat", (b1, b2), name=f"{name}.concat", block=blk)
        y = self.tape.add("shuffle", (y,), groups=self.spec.groups, name=f"{name}.shuffle", block=blk)
        self.tape.blocks[blk] = {"kind": "sn", "width": c, "in_node": x, "out_node": y}
        return y


def _build_encoder(b: _Builder, x: int) -> int:
    spec = b.spec
    mc = spec.codeword_channels
    if spec.architecture == CONVCSINET:
        y = b.conv_bn_act(x, "enc.conv0", 2, 64)
        chain = [64, 128, 256, 512, mc]
        for i in range(4):
            y = b.ecn_unit(y, f"enc.ecn{i + 1}", chain[i], chain[i + 1])
        return y
    y = b.conv_bn_act(x, "enc.conv0", 2, 64)
    for i, c in enumerate((64, 128, 256)):
        y = b.sn_unit(y, f"enc.sn{i + 1}", c)
    y = b.tape.add("avg_pool2", (y,), name="enc.pool", block="enc.poolstruct")
    return b.conv_bn_act(y, "enc.poolconv", 512, mc, block="enc.poolstruct")


def _build_decoder(b: _Builder, s: int) -> int:
    spec = b.spec
    chain = [spec.codeword_channels, *spec.decoder_channels, 2]
    y = s
    for i in range(4):
        y = b.dn_unit(y, f"dec.dn{i + 1}", chain[i], chain[i + 1])
    y = b.refinenet_unit(y, "dec.refine1")
    y = b.refinenet_unit(y, "dec.refine2")
    y = b.conv(y, "dec.out", 2, 2, init="glorot")
    return b.tape.add("sigmoid", (y,), name="dec.out.act")


class ModelGraph:
    """An assembled autoencoder: encoder tape, decoder tape, shared parameters."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.store = ParameterStore(dtype=dtype, seed=seed)

        self.encoder = Tape(self.store)
        eb = _Builder(self.encoder, spec)
        x = self.encoder.input("x")
        _build_encoder(eb, x)

        self.decoder = Tape(self.store)
        db = _Builder(self.decoder, spec)
        s = self.decoder.input("codeword")
        _build_decoder(db, s)

        # end-to-end tape for training and full-model gradient checks
        self.trainer = Tape(self.store)
        tb = _Builder(self.trainer, spec)
        tx = self.trainer.input("x")
        code = _build_encoder(tb, tx)
        pred = _build_decoder(tb, code)
        target = self.trainer.input("target")
        self.trainer.add("mse_loss", (pred, target), name="loss")
        self.trainer_codeword_id = code
        self.trainer_pred_id = pred

    def _check_input(self, x):
        want = (2, self.spec.nc_prime, self.spec.nt)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"expected input (n, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")

    def encode(self, x: np.ndarray) -> np.ndarray:
        self._check_input(np.asarray(x))
        return self.encoder.forward({"x": x}, mode="infer")

    def decode(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s)
        want = (self.spec.codeword_channels, 2, 2)
        if s.ndim != 4 or s.shape[1:] != want:
            raise ShapeError(f"expected codeword (n, {want[0]}, {want[1]}, {want[2]}), got {s.shape}")
        return self.decoder.forward({"codeword": s}, mode="infer")

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(x))


# ---------------------------------------------------------------------------
# CSIW weight files

_W_HEADER = struct.Struct("<4sIIIIIIII")


def _shape4_of(a: np.ndarray) -> tuple[int, int, int, int]:
    s = a.shape
    if len(s) > 4:
        raise ShapeError(f"parameter rank {len(s)} > 4")
    return (1,) * (4 - len(s)) + tuple(s)


def save_weights(model: ModelGraph, path) -> None:
    spec, store = model.spec, model.store
    names = store.names()
    with open(path, "wb") as fh:
        fh.write(
            _W_HEADER.pack(
                WEIGHTS_MAGIC, WEIGHTS_VERSION, _ARCH_IDS[spec.architecture],
                1, spec.cr_den, spec.groups, spec.nc_prime, spec.nt,
                store.dtype.itemsize,
            )
        )
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            arr = store[name]
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<4I", *_shape4_of(arr)))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_weights(path, spec: ModelSpec | None = None, seed: int = 0) -> ModelGraph:
    with open(path, "rb") as fh:
        head = fh.read(_W_HEADER.size)
        if len(head) != _W_HEADER.size:
            raise FormatError("truncated CSIW header")
        magic, version, arch_id, crn, crd, groups, ncp, nt, width = _W_HEADER.unpack(head)
        if magic != WEIGHTS_MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != WEIGHTS_VERSION:
            raise FormatError(f"unsupported CSIW version {version}")
        if arch_id not in _ARCH_NAMES or crn != 1:
            raise FormatError("unrecognized architecture/compression fields")
        dtype = {4: np.float32, 8: np.float64}.get(width)
        if dtype is None:
            raise FormatError(f"unsupported scalar width {width}")
        file_spec = ModelSpec(architecture=_ARCH_NAMES[arch_id], cr_den=crd, nc_prime=ncp, nt=nt, groups=groups)
        if spec is not None and (
            spec.architecture != file_spec.architecture
            or spec.cr_den != file_spec.cr_den
            or spec.nc_prime != file_spec.nc_prime
            or spec.nt != file_spec.nt
            or spec.groups != file_spec.groups
        ):
            raise FormatError(
                f"weights are for {file_spec.architecture} CR 1/{file_spec.cr_den}, "
                f"requested {spec.architecture} CR 1/{spec.cr_den}"
            )
        model = ModelGraph(spec or file_spec, seed=seed, dtype=dtype)
        (count,) = struct.unpack("<I", fh.read(4))
        seen = set()
        for _ in range(count):
            raw = fh.read(4)
            if len(raw) != 4:
                raise FormatError("truncated entry header")
            (nlen,) = struct.unpack("<I", raw)
            name = fh.read(nlen).decode("utf-8")
            shape = struct.unpack("<4I", fh.read(16))
            nbytes = int(np.prod(shape)) * width
            payload = fh.read(nbytes)
            if len(payload) != nbytes:
                raise FormatError(f"truncated payload for parameter {name!r}")
            if name not in model.store:
                raise FormatError(f"unknown parameter {name!r} in weights file")
            arr = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<")).reshape(shape)
            live = model.store[name]
            model.store[name] = arr.reshape(live.shape).astype(dtype)
            seen.add(name)
        missing = set(model.store.names()) - seen
        if missing:
            raise FormatError(f"weights file is missing parameter {sorted(missing)[0]!r}")
    return model
