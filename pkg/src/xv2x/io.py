"""Artifact persistence: atomic writes, binary tables, CSV files and checkpoints.

Binary table layout::

    b"XV2XTAB\\0" | <u4 version | <u4 header length | UTF-8 JSON header | row-major <f8 data

The JSON header holds ``columns``, ``n_rows``, ``dtype`` and optional ``meta``.
"""

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .nn import MLP

TABLE_MAGIC = b"XV2XTAB\x00"
TABLE_VERSION = 1


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text):
    return atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def write_json(path, obj):
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def table_bytes(data, columns, meta=None):
    data = np.ascontiguousarray(np.atleast_2d(np.asarray(data, dtype="<f8")))
    if data.shape[1] != len(columns):
        raise ValueError(f"{data.shape[1]} columns of data but {len(columns)} names")
    header = {"columns": list(columns), "n_rows": int(data.shape[0]), "dtype": "<f8", "order": "C"}
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    return TABLE_MAGIC + struct.pack("<II", TABLE_VERSION, len(blob)) + blob + data.tobytes()


def write_table(path, data, columns, meta=None):
    return atomic_write_bytes(path, table_bytes(data, columns, meta))


def read_table(path):
    """Returns (data, header)."""
    raw = Path(path).read_bytes()
    if raw[:8] != TABLE_MAGIC:
        raise ValueError(f"{path} is not a binary table")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != TABLE_VERSION:
        raise ValueError(f"unsupported table version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    cols = len(header["columns"])
    data = np.frombuffer(raw, "<f8", offset=16 + hlen)
    if data.size != header["n_rows"] * cols:
        raise ValueError(f"{path}: data size does not match header")
    return data.reshape(header["n_rows"], cols).copy(), header


def save_net(path, net, master_seed=None, extra=None):
    return atomic_write_bytes(path, net.to_bytes(master_seed, extra))


def load_net(path):
    return MLP.from_bytes(Path(path).read_bytes())
