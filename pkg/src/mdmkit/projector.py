"""Two-branch image/text projector with manual reverse-mode gradients.

Each branch is a chain of affine layers with ``tanh`` (or identity) between
them and a row-wise unit normalization at the end.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, StateError
from .numerics import Rng, as_matrix
from .sphere import normalize_vjp, row_norms, unit_normalize

ACTIVATIONS = ("tanh", "identity")
BRANCHES = ("image", "text")

CKPT_MAGIC = b"MDMC"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    image_dims: tuple
    text_dims: tuple
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "image_dims", tuple(int(d) for d in self.image_dims))
        object.__setattr__(self, "text_dims", tuple(int(d) for d in self.text_dims))
        if len(self.image_dims) < 2 or len(self.text_dims) < 2:
            raise ConfigError("each branch needs at least one affine layer")
        if self.image_dims[-1] != self.text_dims[-1]:
            raise ConfigError("image and text branches must end at the same joint dimension")
        if any(d < 1 for d in self.image_dims + self.text_dims):
            raise ConfigError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")

    @property
    def joint_dim(self) -> int:
        return self.image_dims[-1]

    def dims(self, branch: str) -> tuple:
        return self.image_dims if branch == "image" else self.text_dims

    @property
    def label(self) -> str:
        img = "-".join(map(str, self.image_dims))
        txt = "-".join(map(str, self.text_dims))
        return f"img{img}_txt{txt}_{self.activation}"

    def to_dict(self) -> dict:
        return {"image_dims": list(self.image_dims), "text_dims": list(self.text_dims),
                "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        unknown = set(d) - {"image_dims", "text_dims", "activation"}
        if unknown:
            raise ConfigError(f"unknown arch keys: {sorted(unknown)}")
        return cls(d["image_dims"], d["text_dims"], d.get("activation", "tanh"))


@dataclass
class LayerParams:
    name: str
    weight: np.ndarray  # [out x in]
    bias: np.ndarray  # [1 x out]


@dataclass
class Projector:
    arch: ArchSpec
    image_layers: list
    text_layers: list

    def __post_init__(self):
        for branch in BRANCHES:
            dims = self.arch.dims(branch)
            layers = self.layers(branch)
            if len(layers) != len(dims) - 1:
                raise ShapeError(f"{branch}: expected {len(dims) - 1} layers, got {len(layers)}")
            for i, lp in enumerate(layers):
                if lp.weight.shape != (dims[i + 1], dims[i]) or lp.bias.shape != (1, dims[i + 1]):
                    raise ShapeError(f"{lp.name}: shape {lp.weight.shape}/{lp.bias.shape} "
                                     f"does not chain with {dims}")

    def layers(self, branch: str) -> list:
        return self.image_layers if branch == "image" else self.text_layers

    def tensors(self):
        """Yield ``(name, array)`` for every weight and bias tensor in a fixed order."""
        for branch in BRANCHES:
            for lp in self.layers(branch):
                yield f"{lp.name}.weight", lp.weight
                yield f"{lp.name}.bias", lp.bias

    def copy(self) -> "Projector":
        return Projector(
            self.arch,
            [LayerParams(lp.name, lp.weight.copy(), lp.bias.copy()) for lp in self.image_layers],
            [LayerParams(lp.name, lp.weight.copy(), lp.bias.copy()) for lp in self.text_layers],
        )

    def map_tensors(self, fn) -> "Projector":
        """New projector with ``fn(name, array)`` applied to every tensor."""
        out = {}
        for branch in BRANCHES:
            out[branch] = [LayerParams(lp.name, fn(f"{lp.name}.weight", lp.weight),
                                       fn(f"{lp.name}.bias", lp.bias))
                           for lp in self.layers(branch)]
        return Projector(self.arch, out["image"], out["text"])


@dataclass
class Checkpoint:
    expert_id: int
    epoch: int
    projector: Projector
    train_loss: float | None = None  # mean InfoNCE over the epoch, if trained


@dataclass
class Tape:
    projector: Projector
    inputs: dict = field(default_factory=dict)  # branch -> list of layer inputs
    pre: dict = field(default_factory=dict)  # branch -> list of pre-activations
    out_raw: dict = field(default_factory=dict)
    out_unit: dict = field(default_factory=dict)


def init_random(arch: ArchSpec, rng: Rng, scale: float = 1.0) -> Projector:
    """Gaussian weights with variance ``scale**2 / fan_in``, zero biases."""
    if not scale > 0:
        raise ConfigError("scale must be > 0")
    layers = {}
    for branch in BRANCHES:
        dims = arch.dims(branch)
        layers[branch] = []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            w = rng.normal((fan_out, fan_in)) * (scale / np.sqrt(fan_in))
            layers[branch].append(LayerParams(f"{branch}.{i}", w, np.zeros((1, fan_out))))
    return Projector(arch, layers["image"], layers["text"])


def _act(arch, x):
    return np.tanh(x) if arch.activation == "tanh" else x


def _branch_forward(p: Projector, branch: str, x: np.ndarray, tape: Tape):
    layers = p.layers(branch)
    ins, pres = [], []
    h = x
    for i, lp in enumerate(layers):
        ins.append(h)
        a = h @ lp.weight.T + lp.bias
        pres.append(a)
        h = _act(p.arch, a) if i < len(layers) - 1 else a
    tape.inputs[branch] = ins
    tape.pre[branch] = pres
    tape.out_raw[branch] = h
    z = unit_normalize(h)
    tape.out_unit[branch] = z
    return z


def forward(p: Projector, x_img, x_txt):
    """Encode both modalities. Returns ``(zv, zt, tape)``."""
    x_img = as_matrix(x_img)
    x_txt = as_matrix(x_txt)
    if x_img.shape[1] != p.arch.image_dims[0] or x_txt.shape[1] != p.arch.text_dims[0]:
        raise ShapeError(f"input widths {x_img.shape[1]}/{x_txt.shape[1]} do not match "
                         f"arch {p.arch.image_dims[0]}/{p.arch.text_dims[0]}")
    tape = Tape(p)
    zv = _branch_forward(p, "image", x_img, tape)
    zt = _branch_forward(p, "text", x_txt, tape)
    return zv, zt, tape


def encode(p: Projector, x_img, x_txt):
    zv, zt, _ = forward(p, x_img, x_txt)
    return zv, zt


@dataclass
class Gradients:
    params: dict | None  # tensor name -> gradient
    d_img: np.ndarray | None
    d_txt: np.ndarray | None


def backward(p: Projector, tape: Tape, d_zv, d_zt, wrt: str = "both") -> Gradients:
    """Reverse-mode pass through both branches, normalization included.

    ``wrt`` is one of ``"params"``, ``"inputs"``, ``"both"``.
    """
    if tape.projector is not p:
        raise StateError("tape was recorded with a different projector")
    if wrt not in ("params", "inputs", "both"):
        raise ValueError(f"bad wrt {wrt!r}")
    want_params = wrt in ("params", "both")
    grads = {} if want_params else None
    d_in = {}
    for branch, d_out in (("image", d_zv), ("text", d_zt)):
        d_out = as_matrix(d_out)
        h = tape.out_raw[branch]
        g = normalize_vjp(d_out, tape.out_unit[branch], row_norms(h))
        layers = p.layers(branch)
        for i in range(len(layers) - 1, -1, -1):
            lp = layers[i]
            if i < len(layers) - 1 and p.arch.activation == "tanh":
                g = g * (1.0 - np.tanh(tape.pre[branch][i]) ** 2)
            if want_params:
                grads[f"{lp.name}.weight"] = g.T @ tape.inputs[branch][i]
                grads[f"{lp.name}.bias"] = g.sum(axis=0, keepdims=True)
            g = g @ lp.weight
        d_in[branch] = g
    if wrt == "params":
        return Gradients(grads, None, None)
    return Gradients(grads, d_in["image"], d_in["text"])


# -- checkpoint files -------------------------------------------------------

def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    tensors = list(ckpt.projector.tensors())
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HIII", CKPT_VERSION, ckpt.expert_id, ckpt.epoch, len(tensors)))
    for name, arr in tensors:
        if name.endswith(".bias"):
            arr = arr.reshape(-1)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    _atomic_write(Path(path), checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes, activation: str = "tanh") -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic")
    version, expert_id, epoch, count = r.unpack("<HIII")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not UTF-8") from exc
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(dims)
        tensors[name] = arr
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint payload")
    layers = {b: [] for b in BRANCHES}
    dims = {b: [] for b in BRANCHES}
    for branch in BRANCHES:
        i = 0
        while f"{branch}.{i}.weight" in tensors:
            w = tensors.pop(f"{branch}.{i}.weight")
            b = tensors.pop(f"{branch}.{i}.bias", None)
            if w.ndim != 2 or b is None:
                raise FormatError(f"layer {branch}.{i} is malformed")
            if not dims[branch]:
                dims[branch].append(w.shape[1])
            elif dims[branch][-1] != w.shape[1]:
                raise FormatError(f"layer {branch}.{i} does not chain")
            dims[branch].append(w.shape[0])
            if b.size != w.shape[0]:
                raise FormatError(f"bias of {branch}.{i} has wrong size")
            layers[branch].append(LayerParams(f"{branch}.{i}", w, b.reshape(1, -1)))
            i += 1
    if tensors:
        raise FormatError(f"unexpected tensors: {sorted(tensors)}")
    try:
        arch = ArchSpec(dims["image"], dims["text"], activation)
        proj = Projector(arch, layers["image"], layers["text"])
    except (ConfigError, ShapeError) as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from exc
    return Checkpoint(expert_id, epoch, proj)


def load_checkpoint(path, activation: str = "tanh") -> Checkpoint:
    """Read a ``.mdmc`` file. The file does not record the activation."""
    return parse_checkpoint(Path(path).read_bytes(), activation)
