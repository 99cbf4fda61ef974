"""Volume and checkpoint file formats.

rawvol
    A UTF-8 header of ``key value...`` lines, for example::

        dims 64 64 64
        spacing 1.0 1.0 1.0
        dtype f32
        role intensity

    terminated by an empty line, followed by little-endian voxel data in
    ``[D, H, W]`` row-major order.  ``dtype`` is one of ``u8``, ``i16``, ``f32``.

NIfTI-1 (read only)
    Single-file, uncompressed ``n+1`` images with uint8/int16/float32 data.
    Axis ``i`` of the returned array follows ``dim[1+i]``; qform/sform are
    ignored, only ``pixdim`` is used.

checkpoint
    ``b"HD3DCKPT"``, uint32 version, uint64 header length, a JSON header
    (sorted keys) describing the network spec and every blob, then the blobs
    themselves as contiguous little-endian float32.
"""
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (BadMagic, CompressedInput, CorruptBlob, LabelOutOfRange, MalformedHeader,
                     SizeMismatch, SpecMismatch, UnsupportedDtype)
from .netbuild import NetworkSpec, build

ROLES = ("intensity", "label")
RAW_DTYPES = {"u8": np.dtype("<u1"), "i16": np.dtype("<i2"), "f32": np.dtype("<f4")}
MAX_HEADER = 4096


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    role: str = "intensity"

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3:
            raise SizeMismatch(f"volumes are 3-D, got shape {self.data.shape}")
        if len(self.spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise MalformedHeader(f"spacing must be 3 positive values, got {self.spacing}")
        if self.role not in ROLES:
            raise MalformedHeader(f"unknown role {self.role!r}")
        if self.role == "label" and self.data.size:
            d = self.data
            if d.dtype.kind == "f" and not np.all(np.rint(d) == d):
                raise LabelOutOfRange("label volume holds non-integer values")
            if d.min() < 0 or d.max() > 3:
                raise LabelOutOfRange(f"label values must lie in 0..3, found "
                                      f"{d.min()}..{d.max()}")

    @property
    def dims(self):
        return tuple(self.data.shape)


@dataclass
class Subject:
    id: str
    modalities: list            # [t1, t2] Volumes
    label: Volume = None
    mask: np.ndarray = None     # bool [D, H, W]

    def __post_init__(self):
        dims = self.modalities[0].dims
        spacing = self.modalities[0].spacing
        for v in self.modalities[1:] + ([self.label] if self.label is not None else []):
            if v.dims != dims or v.spacing != spacing:
                raise SizeMismatch(f"subject {self.id}: volumes disagree on dims/spacing")
        if self.mask is not None and self.mask.shape != dims:
            raise SizeMismatch(f"subject {self.id}: mask dims differ")

    @property
    def dims(self):
        return self.modalities[0].dims

    @property
    def spacing(self):
        return self.modalities[0].spacing


def atomic_write(path, data: bytes):
    """Write to a temp file beside ``path`` and rename it into place."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- rawvol -------------------------------------------------------------------

def _dtype_name(dt):
    for k, v in RAW_DTYPES.items():
        if np.dtype(dt).newbyteorder("<") == v:
            return k
    raise UnsupportedDtype(f"rawvol cannot store dtype {dt}")


def rawvol_bytes(vol: Volume, dtype=None):
    dtype = dtype or _dtype_name(vol.data.dtype)
    if dtype not in RAW_DTYPES:
        raise UnsupportedDtype(f"unsupported rawvol dtype {dtype!r}")
    header = (f"dims {' '.join(str(d) for d in vol.dims)}\n"
              f"spacing {' '.join(repr(s) for s in vol.spacing)}\n"
              f"dtype {dtype}\nrole {vol.role}\n\n")
    return header.encode("utf-8") + np.ascontiguousarray(vol.data, RAW_DTYPES[dtype]).tobytes()


def write_rawvol(path, vol: Volume, dtype=None):
    atomic_write(path, rawvol_bytes(vol, dtype))


def parse_rawvol(buf: bytes) -> Volume:
    end = buf.find(b"\n\n", 0, MAX_HEADER)
    if end < 0:
        raise MalformedHeader("rawvol header not terminated by a blank line")
    try:
        lines = buf[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError:
        raise MalformedHeader("rawvol header is not UTF-8") from None
    fields = {}
    for line in lines:
        parts = line.split()
        if not parts or parts[0] in fields:
            raise MalformedHeader(f"bad header line {line!r}")
        fields[parts[0]] = parts[1:]
    if set(fields) != {"dims", "spacing", "dtype", "role"}:
        raise MalformedHeader(f"header keys {sorted(fields)} != dims/spacing/dtype/role")
    try:
        dims = tuple(int(v) for v in fields["dims"])
        spacing = tuple(float(v) for v in fields["spacing"])
    except ValueError:
        raise MalformedHeader("non-numeric dims or spacing") from None
    if len(dims) != 3 or min(dims) < 1:
        raise MalformedHeader(f"dims must be 3 positive integers, got {dims}")
    if len(fields["dtype"]) != 1 or fields["dtype"][0] not in RAW_DTYPES:
        raise UnsupportedDtype(f"unsupported rawvol dtype {fields['dtype']}")
    if len(fields["role"]) != 1:
        raise MalformedHeader("role must be a single word")
    dt = RAW_DTYPES[fields["dtype"][0]]
    payload = memoryview(buf)[end + 2:]
    n = dims[0] * dims[1] * dims[2]
    if len(payload) != n * dt.itemsize:
        raise SizeMismatch(f"expected {n * dt.itemsize} data bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return Volume(data, spacing, fields["role"][0])


def read_rawvol(path) -> Volume:
    with open(path, "rb") as fh:
        return parse_rawvol(fh.read())


# -- NIfTI-1 ----------------------------------------------------------------

NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}


def parse_nifti1(buf: bytes, role="intensity") -> Volume:
    if buf[:2] == b"\x1f\x8b":
        raise CompressedInput("gzip-compressed NIfTI; decompress it first (gunzip file.nii.gz)")
    if len(buf) < 348:
        raise MalformedHeader(f"file too short for a NIfTI-1 header ({len(buf)} bytes)")
    if struct.unpack("<i", buf[:4])[0] == 348:
        e = "<"
    elif struct.unpack(">i", buf[:4])[0] == 348:
        e = ">"
    else:
        raise MalformedHeader("sizeof_hdr is not 348 in either byte order")
    if buf[344:348] != b"n+1\x00":
        raise BadMagic(f"NIfTI magic {buf[344:348]!r} != b'n+1\\x00'")
    dim = struct.unpack(e + "8h", buf[40:56])
    datatype = struct.unpack(e + "h", buf[70:72])[0]
    pixdim = struct.unpack(e + "8f", buf[76:108])
    vox_offset = struct.unpack(e + "f", buf[108:112])[0]
    slope, inter = struct.unpack(e + "2f", buf[112:120])
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedDtype(f"NIfTI datatype code {datatype} not supported")
    ndim = dim[0]
    if not 3 <= ndim <= 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise MalformedHeader(f"only 3-D images are supported (dim={dim})")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) < 1:
        raise MalformedHeader(f"non-positive dims {dim[1:4]}")
    if not np.isfinite(vox_offset) or vox_offset < 348:
        raise MalformedHeader(f"bad vox_offset {vox_offset}")
    dt = np.dtype(e + NIFTI_DTYPES[datatype])
    off = int(vox_offset)
    n = nx * ny * nz
    if off + n * dt.itemsize > len(buf):
        raise SizeMismatch(f"data section needs {n * dt.itemsize} bytes at offset {off}, "
                           f"file has {len(buf)}")
    raw = np.frombuffer(buf, dtype=dt, count=n, offset=off)
    # x varies fastest on disk
    data = np.ascontiguousarray(raw.reshape(nz, ny, nx).transpose(2, 1, 0)).astype(dt.newbyteorder("="))
    if slope != 0 and np.isfinite(slope) and np.isfinite(inter) and (slope != 1 or inter != 0):
        data = (data.astype(np.float32) * np.float32(slope) + np.float32(inter))
    spacing = tuple(abs(p) if np.isfinite(p) and p != 0 else 1.0 for p in pixdim[1:4])
    return Volume(data, spacing, role)


def read_nifti1(path, role="intensity") -> Volume:
    with open(path, "rb") as fh:
        return parse_nifti1(fh.read(), role)


def read_volume(path, role=None):
    """Dispatch on extension: ``.nii`` -> NIfTI-1, anything else -> rawvol."""
    p = str(path)
    if p.endswith((".nii", ".nii.gz")):
        return read_nifti1(p, role or "intensity")
    return read_rawvol(p)


# -- subjects on disk -----------------------------------------------------------

SUBJECT_FILES = {"t1": "t1.rawvol", "t2": "t2.rawvol", "label": "label.rawvol",
                 "mask": "mask.rawvol"}


def write_subject(dirpath, subj: Subject):
    os.makedirs(dirpath, exist_ok=True)
    for vol, key in zip(subj.modalities, ("t1", "t2")):
        write_rawvol(os.path.join(dirpath, SUBJECT_FILES[key]), vol, "f32")
    if subj.label is not None:
        write_rawvol(os.path.join(dirpath, SUBJECT_FILES["label"]),
                     Volume(subj.label.data.astype(np.uint8), subj.spacing, "label"), "u8")
    if subj.mask is not None:
        write_rawvol(os.path.join(dirpath, SUBJECT_FILES["mask"]),
                     Volume(subj.mask.astype(np.uint8), subj.spacing, "label"), "u8")


def read_subject(dirpath, subject_id=None) -> Subject:
    mods = [read_rawvol(os.path.join(dirpath, SUBJECT_FILES[k])) for k in ("t1", "t2")]
    lab = mask = None
    p = os.path.join(dirpath, SUBJECT_FILES["label"])
    if os.path.exists(p):
        lab = read_rawvol(p)
        lab.role = "label"
    p = os.path.join(dirpath, SUBJECT_FILES["mask"])
    if os.path.exists(p):
        mask = read_rawvol(p).data.astype(bool)
    return Subject(subject_id or os.path.basename(os.path.normpath(dirpath)), mods, lab, mask)


def write_manifest(path, entries):
    """``entries``: iterable of ``(subject_id, directory)``."""
    text = "".join(f"{sid}\t{d}\n" for sid, d in entries)
    atomic_write(path, text.encode("utf-8"))


def read_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise MalformedHeader(f"manifest line {line!r} is not 'id<TAB>path'")
            sid, d = parts
            out.append((sid, d if os.path.isabs(d) else os.path.join(base, d)))
    return out


# -- checkpoints ----------------------------------------------------------------

CKPT_MAGIC = b"HD3DCKPT"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict
    buffers: dict
    optimizer: dict = None          # {"cache": {name: arr}, "velocity": {name: arr}}
    progress: dict = field(default_factory=dict)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def network(self, dtype=np.float32):
        """Rebuild the network and load these parameters into it."""
        net = build(self.spec, seed=self.seed, dtype=dtype)
        for k, v in self.params.items():
            net.graph.params[k][...] = v
        for k, v in self.buffers.items():
            net.graph.buffers[k][...] = v
        return net


def _blob_table(ckpt):
    items = [("param", k, v) for k, v in ckpt.params.items()]
    items += [("buffer", k, v) for k, v in ckpt.buffers.items()]
    if ckpt.optimizer:
        for kind in ("cache", "velocity"):
            items += [(kind, k, v) for k, v in ckpt.optimizer[kind].items()]
    return items


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blobs, table, offset = [], [], 0
    for kind, name, arr in _blob_table(ckpt):
        b = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"kind": kind, "name": name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = {"spec": ckpt.spec.to_text(), "blobs": table, "progress": ckpt.progress,
              "seed": ckpt.seed, "extra": ckpt.extra,
              "has_optimizer": bool(ckpt.optimizer), "data_bytes": offset}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hb)) + hb + b"".join(blobs)


def save_checkpoint(path, ckpt: Checkpoint):
    atomic_write(path, checkpoint_bytes(ckpt))


def _expected_shapes(spec):
    net = build(spec, seed=0, init=False)
    return ({k: v.shape for k, v in net.graph.params.items()},
            {k: v.shape for k, v in net.graph.buffers.items()})


def parse_checkpoint(buf: bytes, expected_spec=None) -> Checkpoint:
    if buf[:8] != CKPT_MAGIC:
        raise BadMagic("not a checkpoint file")
    if len(buf) < 20:
        raise CorruptBlob("truncated checkpoint header")
    version, hlen = struct.unpack("<IQ", buf[8:20])
    if version != CKPT_VERSION:
        raise CorruptBlob(f"unsupported checkpoint version {version}")
    if 20 + hlen > len(buf):
        raise CorruptBlob("checkpoint header runs past end of file")
    try:
        header = json.loads(buf[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptBlob("checkpoint header is not valid JSON") from None
    try:
        return _checkpoint_from(header, memoryview(buf)[20 + hlen:], expected_spec)
    except (KeyError, TypeError, AttributeError) as e:
        raise CorruptBlob(f"checkpoint header is missing or mistypes a field: {e}") from None


def _checkpoint_from(header, data, expected_spec):
    if not isinstance(header, dict):
        raise CorruptBlob("checkpoint header is not an object")
    spec = NetworkSpec.from_text(header["spec"])
    if expected_spec is not None and spec.to_text() != expected_spec.to_text():
        raise SpecMismatch("checkpoint was written for a different network spec")
    if len(data) != header["data_bytes"]:
        raise CorruptBlob(f"blob section is {len(data)} bytes, header declares "
                          f"{header['data_bytes']}")
    pshapes, bshapes = _expected_shapes(spec)
    params, buffers = {}, {}
    optim = {"cache": {}, "velocity": {}} if header["has_optimizer"] else None
    for entry in header["blobs"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 4
        off = entry["offset"]
        if entry["nbytes"] != n or off < 0 or off + n > len(data):
            raise CorruptBlob(f"blob {entry['name']} length inconsistent with its shape")
        arr = np.frombuffer(data[off:off + n], dtype="<f4").reshape(shape).astype(np.float32)
        kind, name = entry["kind"], entry["name"]
        if kind == "param":
            target = params
        elif kind == "buffer":
            target = buffers
        elif optim is not None and kind in optim:
            target = optim[kind]
        else:
            raise CorruptBlob(f"unknown blob kind {kind!r}")
        if name in target:
            raise CorruptBlob(f"duplicate blob {name}")
        target[name] = arr
    if {k: v.shape for k, v in params.items()} != pshapes or \
            {k: v.shape for k, v in buffers.items()} != bshapes:
        raise SpecMismatch("checkpoint parameters do not match the embedded network spec")
    if optim is not None:
        for kind in optim:
            if {k: v.shape for k, v in optim[kind].items()} != pshapes:
                raise SpecMismatch(f"optimizer {kind} does not mirror the parameters")
    return Checkpoint(spec, params, buffers, optim, header["progress"], header["seed"],
                      header["extra"])


def load_checkpoint(path, expected_spec=None) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), expected_spec)
