"""Run artifacts: BMC1 checkpoints, CSV metric sinks and the run manifest.

Checkpoint layout (little-endian)::

    magic "BMC1" | u32 version | 32-byte config sha256 | u64 epoch | u64 seed
    | u32 n_arrays | n_arrays x (u16 name_len, name, u8 ndim, ndim x u64, f64 data)
    | 32-byte sha256 of everything above

Every random draw is a pure function of ``(seed, named counters)``, so the
seed and the epoch counter are the complete RNG state.
"""
import csv
import hashlib
import json
import os
import struct
import subprocess
from dataclasses import dataclass

import numpy as np

from . import __version__
from .errors import CorruptHeader, FormatError, TruncatedFile, VersionMismatch

CKPT_MAGIC = b"BMC1"
CKPT_VERSION = 1
_HEAD = struct.Struct("<4sI32sQQI")
_DIGEST = 32

# files whose content depends on wall-clock time; listed but never hashed
VOLATILE = ("timings.json",)


@dataclass
class Checkpoint:
    params: dict
    epoch: int
    seed: int
    config_hash: bytes = b"\0" * 32

    @property
    def rng_state(self):
        return {"seed": self.seed, "epoch": self.epoch}


def config_hash(cfg_dict):
    text = json.dumps(cfg_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).digest()


def checkpoint_bytes(ck):
    out = [_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, ck.config_hash, ck.epoch, ck.seed,
                      len(ck.params))]
    for name in sorted(ck.params):
        a = np.require(ck.params[name], dtype="<f8", requirements="C")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


def checkpoint_save(path, ck):
    data = checkpoint_bytes(ck)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def _take(buf, pos, n, path):
    if pos + n > len(buf):
        raise TruncatedFile(str(path), pos + n, len(buf))
    return buf[pos:pos + n], pos + n


def checkpoint_load(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != CKPT_MAGIC:
        raise CorruptHeader(f"{path}: bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}")
    head, pos = _take(buf, 0, _HEAD.size, path)
    _, version, chash, epoch, seed, n = _HEAD.unpack(head)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, reader supports "
                              f"{CKPT_VERSION}")
    params = {}
    for _ in range(n):
        raw, pos = _take(buf, pos, 2, path)
        key, pos = _take(buf, pos, struct.unpack("<H", raw)[0], path)
        raw, pos = _take(buf, pos, 1, path)
        ndim = raw[0]
        raw, pos = _take(buf, pos, 8 * ndim, path)
        shape = struct.unpack(f"<{ndim}Q", raw)
        raw, pos = _take(buf, pos, 8 * int(np.prod(shape, dtype=np.int64)), path)
        params[key.decode("utf-8")] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(
            np.float64)
    digest, end = _take(buf, pos, _DIGEST, path)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after checkpoint")
    if hashlib.sha256(buf[:pos]).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch")
    return Checkpoint(params, epoch, seed, chash)


# --------------------------------------------------------------------------
# metrics


def fmt(v):
    """Locale-independent shortest round-trip text for CSV cells."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class CsvSink:
    """CSV writer: header once, one flush per row.

    Columns are fixed by the first row. One writer per file. With
    ``append`` an existing file is continued (its header must match);
    otherwise it is replaced.
    """

    def __init__(self, path, columns=None, append=False):
        self.path = path
        self.columns = list(columns) if columns else None
        self._f = None
        self._w = None
        if append and os.path.exists(path) and os.path.getsize(path) > 0:
            with open(path, newline="") as f:
                header = next(csv.reader(f))
            if self.columns and header != self.columns:
                raise FormatError(f"{path}: existing header {header} != {self.columns}")
            self.columns = header
            self._open("a")

    def _open(self, mode):
        self._f = open(self.path, mode, newline="")
        self._w = csv.writer(self._f, lineterminator="\n")

    def __call__(self, row):
        if self._f is None:
            if self.columns is None:
                self.columns = list(row)
            self._open("w")
            self._w.writerow(self.columns)
        extra = set(row) - set(self.columns)
        if extra:
            raise FormatError(f"{self.path}: unexpected columns {sorted(extra)}")
        self._w.writerow([fmt(row.get(c, "")) for c in self.columns])
        self._f.flush()

    def close(self):
        if self._f is not None:
            self._f.close()
            self._f = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_csv(path, rows, columns=None):
    with CsvSink(path, columns) as s:
        for r in rows:
            s(r)


# --------------------------------------------------------------------------
# manifest


def version_string():
    """``git describe``-style version of the package source, or the static one."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, cfg_dict, seed):
    """Hash every output under ``out_dir`` (except volatile files) into manifest.json."""
    files = {}
    volatile = []
    for root, _, names in os.walk(out_dir):
        for n in sorted(names):
            rel = os.path.relpath(os.path.join(root, n), out_dir).replace(os.sep, "/")
            if rel == "manifest.json":
                continue
            if n in VOLATILE or n.endswith(".tmp"):
                volatile.append(rel)
                continue
            files[rel] = file_sha256(os.path.join(root, n))
    m = {
        "command": command,
        "config": cfg_dict,
        "seed": seed,
        "version": version_string(),
        "files": dict(sorted(files.items())),
        "volatile": sorted(volatile),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(m, f, indent=1, sort_keys=True)
        f.write("\n")
    return m
