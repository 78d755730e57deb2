"""File formats and the toy paired-embedding generator.

Formats (all integers little-endian, floats IEEE-754 little-endian):

``.mdmx``  magic ``MDMX``, u16 version, u32 rows, u32 cols, f32 payload row-major.
``.mdms``  magic ``MDMS``, u16 version, u8 flags, u8 dtype code (4 = f32, 8 = f64),
           u32 K, u32 d_img, u32 d_txt, u32 iteration, then image and text
           parameters, then (flag bit 0) both velocity buffers, then (flag bit 1)
           u32 length + UTF-8 JSON generator state.

A pair set on disk is ``<stem>.mdmx`` holding ``[image | text]`` columns plus a
``<stem>.json`` manifest carrying the column split and an FNV-1a 64 fingerprint
of the payload bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .numerics import Rng, as_matrix
from .sphere import unit_normalize

MDMX_MAGIC = b"MDMX"
MDMS_MAGIC = b"MDMS"
FORMAT_VERSION = 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> str:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return f"{h:016x}"


def atomic_write_bytes(path, data: bytes) -> None:
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


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# -- raw matrices -----------------------------------------------------------

def matrix_payload(m: np.ndarray) -> bytes:
    return np.ascontiguousarray(m, dtype="<f4").tobytes()


def matrix_bytes(m) -> bytes:
    m = as_matrix(m)
    header = MDMX_MAGIC + struct.pack("<HII", FORMAT_VERSION, *m.shape)
    return header + matrix_payload(m)


def parse_matrix(data: bytes) -> np.ndarray:
    if len(data) < 14:
        raise FormatError("truncated matrix header")
    if data[:4] != MDMX_MAGIC:
        raise FormatError("bad matrix magic")
    version, rows, cols = struct.unpack("<HII", data[4:14])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported matrix version {version}")
    expected = 14 + 4 * rows * cols
    if len(data) != expected:
        raise FormatError(f"matrix payload is {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=14).astype(np.float64).reshape(rows, cols)


def save_matrix(path, m) -> None:
    atomic_write_bytes(path, matrix_bytes(m))


def load_matrix(path) -> np.ndarray:
    return parse_matrix(Path(path).read_bytes())


# -- pair sets --------------------------------------------------------------

@dataclass
class EmbeddingPairSet:
    image: np.ndarray
    text: np.ndarray
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.image = as_matrix(self.image)
        self.text = as_matrix(self.text)
        if self.image.shape[0] != self.text.shape[0]:
            raise DataError("image and text row counts differ")

    @property
    def n(self) -> int:
        return self.image.shape[0]

    @property
    def dims(self) -> tuple:
        return self.image.shape[1], self.text.shape[1]

    def subset(self, indices) -> "EmbeddingPairSet":
        idx = np.asarray(indices, dtype=np.int64)
        return EmbeddingPairSet(self.image[idx].copy(), self.text[idx].copy(),
                                {"name": f"{self.manifest.get('name', 'pairs')}-subset", "N": int(idx.size)})

    def fingerprint(self) -> str:
        return fnv1a64(matrix_payload(np.hstack([self.image, self.text])))


def _pair_paths(path):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".json", ".mdmx") else path
    return stem.with_suffix(".mdmx"), stem.with_suffix(".json")


def save_pairs(path, pairs: EmbeddingPairSet) -> dict:
    """Write ``<stem>.mdmx`` + ``<stem>.json``; returns the written manifest."""
    mat_path, man_path = _pair_paths(path)
    joined = np.hstack([pairs.image, pairs.text])
    manifest = dict(pairs.manifest)
    manifest.update({
        "N": pairs.n,
        "dims": {"image": pairs.dims[0], "text": pairs.dims[1]},
        "fingerprint": fnv1a64(matrix_payload(joined)),
        "matrix": mat_path.name,
    })
    save_matrix(mat_path, joined)
    atomic_write_text(man_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    pairs.manifest = manifest
    return manifest


def load_pairs(path) -> EmbeddingPairSet:
    mat_path, man_path = _pair_paths(path)
    try:
        manifest = json.loads(man_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {man_path} is not valid JSON") from exc
    data = mat_path.read_bytes()
    joined = parse_matrix(data)
    if manifest.get("fingerprint") != fnv1a64(data[14:]):
        raise FormatError(f"fingerprint mismatch for {mat_path}")
    try:
        n = int(manifest["N"])
        dv, dt = int(manifest["dims"]["image"]), int(manifest["dims"]["text"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest {man_path} is missing N/dims") from exc
    if n != joined.shape[0]:
        raise FormatError(f"manifest N={n} but payload has {joined.shape[0]} rows")
    if dv + dt != joined.shape[1]:
        raise FormatError("manifest dims do not match payload columns")
    return EmbeddingPairSet(joined[:, :dv].copy(), joined[:, dv:].copy(), manifest)


# -- synthetic sets ---------------------------------------------------------

@dataclass
class SyntheticSet:
    img_params: np.ndarray
    txt_params: np.ndarray
    vel_img: np.ndarray = None
    vel_txt: np.ndarray = None
    iteration: int = 0

    def __post_init__(self):
        self.img_params = as_matrix(self.img_params).copy()
        self.txt_params = as_matrix(self.txt_params).copy()
        if self.img_params.shape[0] != self.txt_params.shape[0]:
            raise DataError("synthetic image/text row counts differ")
        if self.vel_img is None:
            self.vel_img = np.zeros_like(self.img_params)
        if self.vel_txt is None:
            self.vel_txt = np.zeros_like(self.txt_params)

    @property
    def k(self) -> int:
        return self.img_params.shape[0]

    def copy(self) -> "SyntheticSet":
        return SyntheticSet(self.img_params, self.txt_params, self.vel_img.copy(),
                            self.vel_txt.copy(), self.iteration)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in
                   (self.img_params, self.txt_params, self.vel_img, self.vel_txt))


def synthetic_bytes(syn: SyntheticSet, include_state: bool = True,
                    rng_state: dict | None = None, precision: str = "f32") -> bytes:
    if precision not in ("f32", "f64"):
        raise ConfigError("precision must be 'f32' or 'f64'")
    dtype, code = ("<f4", 4) if precision == "f32" else ("<f8", 8)
    flags = (1 if include_state else 0) | (2 if rng_state is not None else 0)
    parts = [MDMS_MAGIC, struct.pack("<HBBIIII", FORMAT_VERSION, flags, code, syn.k,
                                     syn.img_params.shape[1], syn.txt_params.shape[1],
                                     syn.iteration)]
    arrays = [syn.img_params, syn.txt_params]
    if include_state:
        arrays += [syn.vel_img, syn.vel_txt]
    parts += [np.ascontiguousarray(a, dtype=dtype).tobytes() for a in arrays]
    if rng_state is not None:
        blob = json.dumps(rng_state, sort_keys=True).encode("utf-8")
        parts += [struct.pack("<I", len(blob)), blob]
    return b"".join(parts)


def parse_synthetic(data: bytes):
    """Returns ``(SyntheticSet, rng_state_or_None)``."""
    head = struct.calcsize("<HBBIIII")
    if len(data) < 4 + head:
        raise FormatError("truncated synthetic-set header")
    if data[:4] != MDMS_MAGIC:
        raise FormatError("bad synthetic-set magic")
    version, flags, code, k, dv, dt, iteration = struct.unpack("<HBBIIII", data[4:4 + head])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported synthetic-set version {version}")
    if code not in (4, 8) or flags & ~3:
        raise FormatError("corrupt synthetic-set header")
    dtype = "<f4" if code == 4 else "<f8"
    pos = 4 + head
    shapes = [(k, dv), (k, dt)] + ([(k, dv), (k, dt)] if flags & 1 else [])
    arrays = []
    for shape in shapes:
        nbytes = code * shape[0] * shape[1]
        if pos + nbytes > len(data):
            raise FormatError("truncated synthetic-set payload")
        arrays.append(np.frombuffer(data, dtype=dtype, count=shape[0] * shape[1], offset=pos)
                      .astype(np.float64).reshape(shape))
        pos += nbytes
    rng_state = None
    if flags & 2:
        if pos + 4 > len(data):
            raise FormatError("truncated generator state")
        (blen,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        if pos + blen > len(data):
            raise FormatError("truncated generator state")
        try:
            rng_state = json.loads(data[pos:pos + blen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError("corrupt generator state") from exc
        pos += blen
    if pos != len(data):
        raise FormatError("trailing bytes after synthetic-set payload")
    if flags & 1:
        syn = SyntheticSet(arrays[0], arrays[1], arrays[2].copy(), arrays[3].copy(), iteration)
    else:
        syn = SyntheticSet(arrays[0], arrays[1], iteration=iteration)
    return syn, rng_state


def save_synthetic(path, syn: SyntheticSet, include_state: bool = True,
                   rng_state: dict | None = None, precision: str = "f32") -> str:
    """Write a ``.mdms`` file and return the FNV-1a fingerprint of its bytes."""
    data = synthetic_bytes(syn, include_state, rng_state, precision)
    atomic_write_bytes(path, data)
    return fnv1a64(data)


def load_synthetic(path, with_rng: bool = False):
    syn, state = parse_synthetic(Path(path).read_bytes())
    return (syn, state) if with_rng else syn


# -- toy data ---------------------------------------------------------------

@dataclass
class ToySpec:
    """Clustered paired embeddings standing in for real image/text features.

    ``n_pairs`` is the training-split size; ``n_test`` defaults to a quarter
    of it (an 80/20 split of the total).
    """

    n_pairs: int = 1000
    n_clusters: int = 10
    d_v_raw: int = 32
    d_t_raw: int = 32
    intra_noise: float = 0.05
    cross_noise: float = 0.05
    seed: int = 0
    n_test: int | None = None

    def validate(self) -> None:
        if self.n_pairs < 1 or self.n_clusters < 1:
            raise ConfigError("n_pairs and n_clusters must be >= 1")
        if self.n_clusters > self.n_pairs:
            raise ConfigError(f"n_clusters={self.n_clusters} exceeds n_pairs={self.n_pairs}")
        if self.d_v_raw < 1 or self.d_t_raw < 1:
            raise ConfigError("dimensions must be >= 1")
        if self.intra_noise < 0 or self.cross_noise < 0:
            raise ConfigError("noise levels must be >= 0")
        if self.n_test is not None and self.n_test < 0:
            raise ConfigError("n_test must be >= 0")

    @property
    def test_size(self) -> int:
        return self.n_test if self.n_test is not None else max(1, round(self.n_pairs / 4))

    def to_dict(self) -> dict:
        return dict(self.__dict__, n_test=self.test_size)


def gen_toy(spec: ToySpec):
    """Generate ``(train, test)`` pair sets.

    Each cluster has a unit image-space center. A pair draws a cluster and
    an image latent ``center + intra_noise * gauss``; the text row is a fixed
    random linear map of that latent plus ``cross_noise * gauss``. Both rows
    are unit-normalized. With zero noise and one pair per cluster every pair
    sits exactly on its centers.
    """
    spec.validate()
    rng = Rng(spec.seed)
    centers = unit_normalize(rng.normal((spec.n_clusters, spec.d_v_raw)))
    coupling = rng.normal((spec.d_t_raw, spec.d_v_raw)) / np.sqrt(spec.d_v_raw)
    total = spec.n_pairs + spec.test_size
    if spec.n_clusters == spec.n_pairs:
        # one pair per cluster in train, test clusters drawn uniformly
        labels = np.concatenate([rng.permutation(spec.n_clusters),
                                 rng.integers(0, spec.n_clusters, spec.test_size)])
    else:
        labels = rng.integers(0, spec.n_clusters, total)
    latent = centers[labels] + spec.intra_noise * rng.normal((total, spec.d_v_raw))
    text_center = latent @ coupling.T
    text = text_center + spec.cross_noise * rng.normal((total, spec.d_t_raw))
    image = unit_normalize(latent)
    text = unit_normalize(text)
    params = spec.to_dict()
    out = []
    for split, sl in (("train", slice(0, spec.n_pairs)), ("test", slice(spec.n_pairs, total))):
        manifest = {
            "name": f"toy-{split}",
            "split": split,
            "generator": params,
            "labels": labels[sl].tolist(),
        }
        out.append(EmbeddingPairSet(image[sl].copy(), text[sl].copy(), manifest))
    return out[0], out[1]
