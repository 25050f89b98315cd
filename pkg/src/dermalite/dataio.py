"""NPY/NPZ container codec and the DermaMNIST split loader."""

from __future__ import annotations

import ast
import io
import struct
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from .errors import (
    BadMagic,
    DatasetError,
    FormatError,
    HeaderMalformed,
    LabelOutOfRange,
    MissingKey,
    NotAZip,
    PayloadTruncated,
    ShapeMismatch,
    UnsupportedCompression,
    UnsupportedDtype,
)

MAGIC = b"\x93NUMPY"
HEADER_ALIGN = 64

# descr <-> dtype name; only these are accepted in either direction.
DESCR_TO_DTYPE = {"|u1": "uint8", "<i4": "int32", "<f4": "float32", "<f8": "float64"}
DTYPE_TO_DESCR = {v: k for k, v in DESCR_TO_DTYPE.items()}

NUM_CLASSES = 7
IMAGE_SIZE = 28
SPLITS = ("train", "val", "test")


class ClassId(NamedTuple):
    index: int
    acronym: str
    name: str


CLASSES = (
    ClassId(0, "AK", "Actinic Keratoses"),
    ClassId(1, "BC", "Basal Cell Carcinoma"),
    ClassId(2, "BK", "Benign Keratosis-like Lesions"),
    ClassId(3, "DF", "Dermatofibroma"),
    ClassId(4, "ME", "Melanoma"),
    ClassId(5, "MN", "Melanocytic Nevi"),
    ClassId(6, "VL", "Vascular Lesions"),
)
MAJORITY_CLASS = 5
MINORITY_CLASSES = (3, 6)


@dataclass
class NdArray:
    """Decoded array: dtype name, shape, and a flat element buffer in file order."""

    dtype: str
    shape: tuple
    data: np.ndarray
    fortran_order: bool = False

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.dtype not in DTYPE_TO_DESCR:
            raise UnsupportedDtype(f"dtype {self.dtype!r} not supported")
        if any(s < 0 for s in self.shape):
            raise HeaderMalformed(f"negative extent in shape {self.shape}")
        if int(np.prod(self.shape, dtype=np.int64)) != self.data.size:
            raise ShapeMismatch(
                f"shape {self.shape} needs {int(np.prod(self.shape))} elements, "
                f"buffer has {self.data.size}")

    @classmethod
    def from_numpy(cls, arr) -> "NdArray":
        arr = np.asarray(arr)
        name = arr.dtype.name
        if name not in DTYPE_TO_DESCR or arr.dtype.byteorder == ">":
            raise UnsupportedDtype(f"dtype {arr.dtype.str!r} not supported")
        flat = np.ascontiguousarray(arr).reshape(-1).astype(arr.dtype.newbyteorder("<"), copy=False)
        return cls(name, arr.shape, flat, False)

    def to_numpy(self) -> np.ndarray:
        return self.data.reshape(self.shape, order="F" if self.fortran_order else "C")


def _header_literal(arr: NdArray) -> str:
    # Same layout np.save produces, so canonical files round-trip byte for byte.
    if len(arr.shape) == 1:
        shape = f"({arr.shape[0]},)"
    else:
        shape = "(" + ", ".join(str(s) for s in arr.shape) + ")"
    return (f"{{'descr': '{DTYPE_TO_DESCR[arr.dtype]}', "
            f"'fortran_order': False, 'shape': {shape}, }}")


def write_npy(arr: NdArray) -> bytes:
    """Serialize as NPY v1.0 with the header padded to a 64-byte multiple."""
    if arr.dtype not in DTYPE_TO_DESCR:
        raise UnsupportedDtype(f"dtype {arr.dtype!r} not supported")
    header = _header_literal(arr).encode("latin1")
    preamble = len(MAGIC) + 2 + 2
    pad = -(preamble + len(header) + 1) % HEADER_ALIGN
    header = header + b" " * pad + b"\n"
    if len(header) > 0xFFFF:
        raise HeaderMalformed("header too long for NPY v1.0")
    payload = arr.to_numpy().astype(np.dtype(DTYPE_TO_DESCR[arr.dtype]), copy=False)
    return MAGIC + b"\x01\x00" + struct.pack("<H", len(header)) + header + \
        np.ascontiguousarray(payload).tobytes()


def parse_npy(buf: bytes) -> NdArray:
    """Decode an NPY v1.0/v2.0 byte string."""
    buf = memoryview(buf).cast("B")
    if len(buf) < 8 or bytes(buf[:6]) != MAGIC:
        raise BadMagic("missing \\x93NUMPY magic")
    major, minor = buf[6], buf[7]
    if (major, minor) == (1, 0):
        if len(buf) < 10:
            raise HeaderMalformed("truncated header length")
        (hlen,) = struct.unpack("<H", buf[8:10])
        start = 10
    elif (major, minor) == (2, 0):
        if len(buf) < 12:
            raise HeaderMalformed("truncated header length")
        (hlen,) = struct.unpack("<I", buf[8:12])
        start = 12
    else:
        raise HeaderMalformed(f"unsupported format version {major}.{minor}")
    if len(buf) < start + hlen:
        raise HeaderMalformed("header extends past end of buffer")

    try:
        text = bytes(buf[start:start + hlen]).decode("latin1")
        header = ast.literal_eval(text)
    except (ValueError, SyntaxError, UnicodeDecodeError, MemoryError, RecursionError) as exc:
        raise HeaderMalformed(f"header is not a Python literal: {exc}") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise HeaderMalformed("header must be a dict with keys descr, fortran_order, shape")
    descr, fortran, shape = header["descr"], header["fortran_order"], header["shape"]
    if not isinstance(descr, str):
        raise UnsupportedDtype(f"descr {descr!r} not supported")
    if descr not in DESCR_TO_DTYPE:
        # numpy writes uint8 as '|u1' but some writers emit '<u1'
        if descr in ("<u1", ">u1", "u1"):
            descr = "|u1"
        else:
            raise UnsupportedDtype(f"descr {descr!r} not supported")
    if not isinstance(fortran, bool):
        raise HeaderMalformed("fortran_order must be a bool")
    if not isinstance(shape, tuple) or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape):
        raise HeaderMalformed(f"bad shape {shape!r}")

    dtype = np.dtype(descr)
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    need = count * dtype.itemsize
    payload = buf[start + hlen:]
    if len(payload) < need:
        raise PayloadTruncated(f"payload has {len(payload)} bytes, shape {shape} needs {need}")
    data = np.frombuffer(payload[:need], dtype=dtype).copy()
    return NdArray(DESCR_TO_DTYPE[descr], shape, data, fortran)


def parse_npz(buf: bytes) -> dict[str, NdArray]:
    """Decode every ``*.npy`` member of a zip archive; other members are ignored."""
    try:
        zf = zipfile.ZipFile(io.BytesIO(buf))
    except (zipfile.BadZipFile, ValueError) as exc:
        raise NotAZip(str(exc)) from None
    out = {}
    with zf:
        for info in zf.infolist():
            if not info.filename.endswith(".npy"):
                continue
            name = info.filename[:-4]
            if info.compress_type not in (zipfile.ZIP_STORED, zipfile.ZIP_DEFLATED):
                raise UnsupportedCompression(
                    f"compression method {info.compress_type}", entry=name)
            try:
                raw = zf.read(info)
            except (zipfile.BadZipFile, EOFError, OSError, ValueError) as exc:
                raise NotAZip(f"corrupt member: {exc}", entry=name) from None
            try:
                out[name] = parse_npy(raw)
            except FormatError as exc:
                raise type(exc)(str(exc), entry=name) from None
            except ShapeMismatch as exc:
                raise HeaderMalformed(str(exc), entry=name) from None
    return out


def write_npz(arrays: Mapping[str, NdArray], compress: bool = False) -> bytes:
    """Zip ``arrays`` as ``<name>.npy`` members in sorted-key order."""
    bio = io.BytesIO()
    method = zipfile.ZIP_DEFLATED if compress else zipfile.ZIP_STORED
    with zipfile.ZipFile(bio, "w", compression=method) as zf:
        for name in sorted(arrays):
            # fixed timestamp keeps output byte-identical across runs
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = method
            zf.writestr(info, write_npy(arrays[name]))
    return bio.getvalue()


@dataclass
class ImageSet:
    """One split: ``images`` is N x 28 x 28 x C uint8, ``labels`` is N class ids."""

    split: str
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        images, labels = self.images, np.asarray(self.labels)
        if images.dtype != np.uint8:
            raise ShapeMismatch(f"{self.split}: images must be uint8, got {images.dtype}")
        if images.ndim != 4 or images.shape[1:3] != (IMAGE_SIZE, IMAGE_SIZE) \
                or images.shape[3] not in (2, 3):
            raise ShapeMismatch(f"{self.split}: bad image array shape {images.shape}")
        if labels.ndim != 1 or len(labels) != len(images):
            raise ShapeMismatch(
                f"{self.split}: {len(images)} images but labels shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
            bad = labels[(labels < 0) | (labels >= NUM_CLASSES)][0]
            raise LabelOutOfRange(f"{self.split}: label {int(bad)} outside 0..6")
        self.labels = labels.astype(np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def channels(self) -> int:
        return self.images.shape[3]

    def subset(self, indices) -> "ImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageSet(self.split, self.images[indices], self.labels[indices])


def _as_labels(arr: NdArray, key: str) -> np.ndarray:
    if arr.dtype not in ("uint8", "int32"):
        raise ShapeMismatch(f"{key}: labels must be integers, got {arr.dtype}")
    if len(arr.shape) == 2 and arr.shape[1] == 1:
        return arr.to_numpy().reshape(-1).astype(np.int64)
    if len(arr.shape) == 1:
        return arr.to_numpy().astype(np.int64)
    raise ShapeMismatch(f"{key}: labels must be (N,) or (N, 1), got {arr.shape}")


def splits_from_arrays(arrays: Mapping[str, NdArray]) -> tuple[ImageSet, ImageSet, ImageSet]:
    sets = []
    for split in SPLITS:
        for suffix in ("images", "labels"):
            if f"{split}_{suffix}" not in arrays:
                raise MissingKey(f"{split}_{suffix}")
        img = arrays[f"{split}_images"]
        if img.dtype != "uint8" or len(img.shape) != 4 or img.shape[3] != 3:
            raise ShapeMismatch(f"{split}_images: expected N x H x W x 3 uint8, "
                                f"got {img.dtype} {img.shape}")
        labels = _as_labels(arrays[f"{split}_labels"], f"{split}_labels")
        sets.append(ImageSet(split, np.ascontiguousarray(img.to_numpy()), labels))
    return tuple(sets)


def load_dataset_bytes(buf: bytes) -> tuple[ImageSet, ImageSet, ImageSet]:
    return splits_from_arrays(parse_npz(buf))


def load_dataset(path) -> tuple[ImageSet, ImageSet, ImageSet]:
    """Read a MedMNIST-style ``.npz`` and return (train, val, test)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}") from None
    return load_dataset_bytes(buf)


def imageset_arrays(*sets: ImageSet) -> dict[str, NdArray]:
    out = {}
    for s in sets:
        out[f"{s.split}_images"] = NdArray.from_numpy(s.images)
        out[f"{s.split}_labels"] = NdArray.from_numpy(s.labels.astype(np.uint8).reshape(-1, 1))
    return out


def save_dataset(path, *sets: ImageSet) -> None:
    Path(path).write_bytes(write_npz(imageset_arrays(*sets)))
