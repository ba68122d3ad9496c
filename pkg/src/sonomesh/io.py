"""Binary and text file formats.

All multi-byte binary fields are little-endian except the 16-bit PGM
payload, which the PGM format defines as big-endian.  Every writer goes
through :func:`atomic_write` (temp file in the target directory, then
rename), so a failed run never leaves a partial artifact behind.
"""

import json
import os
import struct
import tempfile
from collections import OrderedDict

import numpy as np
from scipy.io import wavfile

from .errors import FormatError
from .imaging import AcousticImage, ProfileMatrix
from .signal import ComplexBuffer, SampleBuffer

CHECKPOINT_VERSION = 1


def atomic_write(path, data):
    """Write bytes (or str, UTF-8) to ``path`` via a same-directory temp file."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def _take(blob, offset, n, what):
    if offset + n > len(blob):
        raise FormatError(f"truncated {what}: need {offset + n} bytes, file has {len(blob)}")
    return blob[offset: offset + n], offset + n


def _magic(blob, magic):
    if blob[:4] != magic:
        raise FormatError(f"bad magic {blob[:4]!r}; expected {magic!r}")


# -- CBUF ---------------------------------------------------------------------------

def encode_cbuf(buf):
    x = np.asarray(buf.samples, dtype=np.complex64)
    inter = np.empty(2 * x.size, dtype="<f4")
    inter[0::2], inter[1::2] = x.real, x.imag
    return b"CBUF" + struct.pack("<II", x.size, int(round(buf.f_s))) + inter.tobytes()


def decode_cbuf(blob):
    _magic(blob, b"CBUF")
    head, off = _take(blob, 4, 8, "CBUF header")
    n, fs = struct.unpack("<II", head)
    body, _ = _take(blob, off, 8 * n, "CBUF payload")
    inter = np.frombuffer(body, dtype="<f4").astype(float)
    return ComplexBuffer(inter[0::2] + 1j * inter[1::2], float(fs))


# -- PMTX ---------------------------------------------------------------------------

def encode_pmtx(m):
    data = np.asarray(m.data, dtype=np.complex64)
    M, N = data.shape
    payload = data.T.astype("<c8").tobytes()  # column-major
    return b"PMTX" + struct.pack("<IIId", M, N, int(round(m.f_s)), float(m.k)) + payload


def decode_pmtx(blob, **meta):
    """Read a profile matrix; ``meta`` supplies the fields the file omits."""
    _magic(blob, b"PMTX")
    head, off = _take(blob, 4, 20, "PMTX header")
    M, N, fs, k = struct.unpack("<IIId", head)
    body, _ = _take(blob, off, 8 * M * N, "PMTX payload")
    data = np.frombuffer(body, dtype="<c8").reshape(N, M).T.astype(complex)
    return ProfileMatrix(data=data, f_s=float(fs), k=k, **meta)


# -- AIMG ----------------------------------------------------------------------------

def encode_aimg(img):
    px = np.asarray(img.pixels, dtype="<f4")
    R, A = px.shape
    return b"AIMG" + struct.pack("<IIdd", R, A, float(img.range_bin_m), float(img.azimuth_bin)) + px.tobytes()


def decode_aimg(blob, **meta):
    _magic(blob, b"AIMG")
    head, off = _take(blob, 4, 24, "AIMG header")
    R, A, range_bin, az_bin = struct.unpack("<IIdd", head)
    body, _ = _take(blob, off, 4 * R * A, "AIMG payload")
    px = np.frombuffer(body, dtype="<f4").reshape(R, A).astype(float)
    return AcousticImage(pixels=px, range_bin_m=range_bin, azimuth_bin=az_bin, **meta)


def image_meta(img):
    """Geometry fields AIMG does not carry, for a JSON sidecar."""
    return {"schema_version": 1, "azimuth_bin_m": float(img.azimuth_bin_m), "pad": int(img.pad),
            "gate_range": float(img.gate_range), "center": [int(c) for c in img.center]}


# -- checkpoints -------------------------------------------------------------------------

def encode_checkpoint(tensors, magic):
    if len(magic) != 4:
        raise FormatError("checkpoint magic must be 4 bytes")
    parts = [magic, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for v in tensors.values():
        a = np.asarray(v, dtype="<f4")
        parts.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_checkpoint(blob, magic, names):
    """Tensors in file order, keyed by ``names`` (the architecture order)."""
    _magic(blob, magic)
    head, off = _take(blob, 4, 8, "checkpoint header")
    version, count = struct.unpack("<II", head)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint schema_version {version}")
    if count != len(names):
        raise FormatError(f"checkpoint holds {count} tensors; architecture expects {len(names)}")
    out = OrderedDict()
    for name in names:
        r, off = _take(blob, off, 1, "tensor rank")
        rank = r[0]
        d, off = _take(blob, off, 4 * rank, "tensor dims")
        dims = struct.unpack(f"<{rank}I", d)
        body, off = _take(blob, off, 4 * int(np.prod(dims, dtype=np.int64)), f"tensor {name}")
        out[name] = np.frombuffer(body, dtype="<f4").reshape(dims).astype(float)
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after the last tensor")
    return out


def save_reg_params(path, params):
    atomic_write(path, encode_checkpoint(params.tensors, b"REGP"))


def load_reg_params(path, channels=1):
    from .registration import RegParams, _shapes

    return RegParams(decode_checkpoint(_read(path), b"REGP", list(_shapes(channels))))


def save_fusion_params(path, params):
    atomic_write(path, encode_checkpoint(params.tensors, b"FUSP"))


def load_fusion_params(path):
    from .fusion import FusionParams, _shapes

    return FusionParams(decode_checkpoint(_read(path), b"FUSP", list(_shapes())))


# -- WAV and PGM ----------------------------------------------------------------------------

def encode_wav(buf):
    import io as _io

    out = _io.BytesIO()
    wavfile.write(out, int(round(buf.f_s)), np.asarray(buf.samples, dtype=np.float32))
    return out.getvalue()


def read_wav(path):
    fs, x = wavfile.read(path)
    if x.ndim != 1:
        raise FormatError(f"expected a mono WAV, got {x.shape[1]} channels")
    if x.dtype != np.float32:
        raise FormatError(f"expected 32-bit float samples, got {x.dtype}")
    return SampleBuffer(x.astype(float), float(fs))


def encode_pgm(pixels, marks=None):
    """16-bit binary PGM, max-normalized; ``marks`` are (x, y) drawn as 3x3 crosses."""
    px = np.asarray(pixels, dtype=float)
    peak = px.max() if px.size and px.max() > 0 else 1.0
    img = np.rint(np.clip(px / peak, 0, 1) * 65535).astype(">u2")
    if marks is not None:
        H, W = img.shape
        for x, y in np.rint(np.asarray(marks, dtype=float)).astype(int):
            for dx, dy in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
                if 0 <= y + dy < H and 0 <= x + dx < W:
                    img[y + dy, x + dx] = 65535
    H, W = img.shape
    return f"P5\n{W} {H}\n65535\n".encode("ascii") + img.tobytes()


def decode_pgm(blob):
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError("not a binary (P5) PGM")
    W, H, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 65535:
        raise FormatError(f"expected a 16-bit PGM, maxval {maxval}")
    body = parts[4]
    if len(body) < 2 * W * H:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(body[: 2 * W * H], dtype=">u2").reshape(H, W)


# -- text ------------------------------------------------------------------------------------

def dumps_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    atomic_write(path, dumps_json(obj))


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def jointset_dict(joints, units, names=None, flagged=None, vertices=None, **extra):
    """Generic joint-set document (2-D or 3-D), optionally with vertices."""
    from .skeleton import JOINT_NAMES

    joints = np.asarray(joints, dtype=float)
    names = names or JOINT_NAMES
    axes = "xyz"[: joints.shape[1]]
    entries = []
    for i, (n, p) in enumerate(zip(names, joints)):
        e = {"name": n, **{a: float(v) for a, v in zip(axes, p)}}
        if flagged is not None:
            e["flagged"] = bool(flagged[i])
        entries.append(e)
    d = {"schema_version": 1, "units": units, "joints": entries, **extra}
    if vertices is not None:
        d["vertices"] = np.asarray(vertices, dtype=float).tolist()
    return d


def read_jointset(path):
    """``(joints, vertices or None, doc)`` from a joint-set document."""
    d = read_json(path)
    if not isinstance(d, dict) or d.get("schema_version") != 1 or "joints" not in d:
        raise FormatError(f"{path}: not a schema_version 1 joint-set document")
    try:
        axes = "xyz" if all("z" in e for e in d["joints"]) else "xy"
        joints = np.array([[e[a] for a in axes] for e in d["joints"]], dtype=float)
        verts = np.array(d["vertices"], dtype=float) if "vertices" in d else None
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed joint set ({exc})") from exc
    return joints, verts, d
