"""Versioned checkpoint container: magic, JSON header, then the weight payload."""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import torch

MAGIC = b"KWSCKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, header: dict, state_dict: dict) -> None:
    """Write a checkpoint whose JSON header can be read without torch."""
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    torch.save(state_dict, buf)
    with Path(path).open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(buf.getvalue())


def read_header(path: str | Path) -> dict:
    """Read only the embedded JSON header."""
    with Path(path).open("rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (n,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(n).decode("utf-8"))


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Return (header, state_dict)."""
    with Path(path).open("rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (n,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(n).decode("utf-8"))
        state_dict = torch.load(io.BytesIO(f.read()), map_location="cpu", weights_only=True)
    return header, state_dict
