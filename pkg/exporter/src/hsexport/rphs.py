"""RPHS binary writer.

Layout: magic "RPHS", uint32 version (1), uint32 L, uint32 d,
uint32 input_len, uint8 context flag (0 = input only, 1 = input plus
generated continuation), 3 reserved zero bytes, then L*d float32 values,
little-endian, row-major. Files are written to a temporary sibling path
and renamed into place so that readers never observe partial output.
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"RPHS"
VERSION = 1
CONTEXT_INPUT_ONLY = 0
CONTEXT_INPUT_PLUS_GEN = 1


def write_rphs(path, states, input_len, context):
    """Atomically write a (L, d) float array as an RPHS file."""
    states = np.ascontiguousarray(states, dtype="<f4")
    if states.ndim != 2:
        raise ValueError(f"states must be 2-D, got shape {states.shape}")
    l, d = states.shape
    if not 0 < input_len <= l:
        raise ValueError(f"input_len {input_len} out of range for L={l}")
    if context not in (CONTEXT_INPUT_ONLY, CONTEXT_INPUT_PLUS_GEN):
        raise ValueError(f"bad context flag {context}")
    if context == CONTEXT_INPUT_ONLY and input_len != l:
        raise ValueError("input-only files must have input_len == L")

    path = Path(path)
    header = MAGIC + struct.pack("<IIIIB3x", VERSION, l, d, input_len, context)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(states.tobytes())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
