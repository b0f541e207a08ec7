"""ZIP-of-NPY archive reader/writer.

The on-disk format is a plain zip archive whose members are NPY files
(format version 1.0, C-order, little-endian) plus an optional
``meta.json``.  Archives produced by ``numpy.savez`` (e.g. the MedMNIST
``.npz`` files) are readable with `read_arrays`.

Writes use a fixed zip timestamp so identical content always produces
byte-identical files; run manifests rely on this for content hashing.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

# Earliest timestamp representable in zip; pinned for reproducible bytes.
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

META_NAME = "meta.json"


class ContainerFormatError(Exception):
    """Archive is missing a required member or is not a zip-of-npy."""


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays (and optional JSON metadata) to a zip archive.

    Keys are written in sorted order and with a constant timestamp, so the
    output bytes depend only on the content.
    """
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(
                buf, np.ascontiguousarray(arrays[key]), version=(1, 0)
            )
            info = zipfile.ZipInfo(key + ".npy", date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())
        if meta is not None:
            info = zipfile.ZipInfo(META_NAME, date_time=_ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, json.dumps(meta, sort_keys=True, indent=2))


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Read every NPY member of the archive; returns (arrays, meta)."""
    arrays: dict[str, np.ndarray] = {}
    meta = None
    try:
        with zipfile.ZipFile(path, "r") as zf:
            for name in zf.namelist():
                if name == META_NAME:
                    meta = json.loads(zf.read(name))
                elif name.endswith(".npy"):
                    arrays[name[: -len(".npy")]] = np.lib.format.read_array(
                        io.BytesIO(zf.read(name)), allow_pickle=False
                    )
    except zipfile.BadZipFile as exc:
        raise ContainerFormatError(f"{path}: not a zip archive ({exc})") from exc
    return arrays, meta
