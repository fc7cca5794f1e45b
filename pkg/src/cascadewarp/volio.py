"""Binary volume files, weight checkpoints, and the run-config text format.

Volume files ("CWV1"): little-endian header of D,H,W,C as u32 plus a u8
dtype tag (0 = float32 intensity, 1 = uint32 labels, which requires C==1),
followed by C*D*H*W 4-byte values, channel-major then D,H,W row-major.

Checkpoints ("CWK1"): versioned container of the serialized NetworkConfig
(JSON) and named float32 parameter entries.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ConfigError, DataFormatError
from .network import NetworkConfig
from .training import LossConfig

VOLUME_MAGIC = b"CWV1"
CHECKPOINT_MAGIC = b"CWK1"
CHECKPOINT_VERSION = 1

DTYPE_FLOAT = 0
DTYPE_LABEL = 1


def write_volume(path, array, dtype_tag=None):
    """Serialize a [C, D, H, W] float volume or a [D, H, W] label volume."""
    arr = np.asarray(array)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise DataFormatError(f"volume must be 3-D or 4-D, got shape {arr.shape}")
    if dtype_tag is None:
        dtype_tag = DTYPE_LABEL if np.issubdtype(arr.dtype, np.integer) else DTYPE_FLOAT
    c, d, h, w = arr.shape
    if dtype_tag == DTYPE_LABEL:
        if c != 1:
            raise DataFormatError(f"label volumes require C == 1, got C = {c}")
        payload = arr.astype("<u4").tobytes()
    elif dtype_tag == DTYPE_FLOAT:
        payload = arr.astype("<f4").tobytes()
    else:
        raise DataFormatError(f"unknown dtype tag {dtype_tag}")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<IIIIB", d, h, w, c, dtype_tag))
        fh.write(payload)


def read_volume(path):
    """Returns (array [C,D,H,W] or [D,H,W] for labels, dtype_tag)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != VOLUME_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
        header = fh.read(17)
        if len(header) != 17:
            raise DataFormatError(f"{path}: truncated header")
        d, h, w, c, tag = struct.unpack("<IIIIB", header)
        expected = c * d * h * w * 4
        payload = fh.read(expected + 1)
        if len(payload) != expected:
            raise DataFormatError(
                f"{path}: payload is {len(payload)} bytes, expected exactly {expected}"
            )
    if tag == DTYPE_LABEL:
        if c != 1:
            raise DataFormatError(f"{path}: label volume with C = {c}")
        arr = np.frombuffer(payload, dtype="<u4").reshape(d, h, w).astype(np.int32)
    elif tag == DTYPE_FLOAT:
        arr = np.frombuffer(payload, dtype="<f4").reshape(c, d, h, w).astype(np.float32)
    else:
        raise DataFormatError(f"{path}: unknown dtype tag {tag}")
    return arr, tag


def save_checkpoint(path, config: NetworkConfig, state):
    """Write named float32 parameters plus the network config."""
    cfg_bytes = json.dumps(config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            arr = np.asarray(state[name], dtype="<f4")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Returns (NetworkConfig, {name: float32 array}); validates structure."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{path}: not a checkpoint file")
        version, cfg_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        config = NetworkConfig.from_dict(json.loads(fh.read(cfg_len).decode()))
        (count,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            nbytes = int(np.prod(shape)) * 4
            payload = fh.read(nbytes)
            if len(payload) != nbytes:
                raise DataFormatError(f"{path}: truncated parameter '{name}'")
            state[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return config, state


_NETWORK_KEYS = {
    "levels": int,
    "encoder_channels": "int_list",
    "search_range": int,
    "estimator_widths": "int_list",
    "ablation": str,
    "leaky_slope": float,
}
_LOSS_KEYS = {"lambda": float, "nlcc_windows": "int_list"}
_TRAIN_KEYS = {"learning_rate": float, "checkpoint_every": int}


def parse_run_config(text):
    """Parse 'key = value' lines into network/loss/training settings.

    Unknown keys are rejected outright so typos fail fast. Defaults match
    the published hyperparameters (lambda 1, d 1, lr 1e-4) at desk scale.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        values[key] = val

    known = {**_NETWORK_KEYS, **_LOSS_KEYS, **_TRAIN_KEYS}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def convert(key, raw):
        kind = known[key]
        try:
            if kind == "int_list":
                return tuple(int(x) for x in raw.replace(",", " ").split())
            return kind(raw)
        except ValueError as exc:
            raise ConfigError(f"config key '{key}': cannot parse {raw!r}") from exc

    parsed = {k: convert(k, v) for k, v in values.items()}
    net_kwargs = {k: parsed[k] for k in _NETWORK_KEYS if k in parsed}
    network = NetworkConfig(**net_kwargs)
    loss_kwargs = {}
    if "lambda" in parsed:
        loss_kwargs["lam"] = parsed["lambda"]
    if "nlcc_windows" in parsed:
        loss_kwargs["nlcc_windows"] = parsed["nlcc_windows"]
    if "nlcc_windows" not in loss_kwargs:
        # default schedule: largest window at the finest level, down to 3
        loss_kwargs["nlcc_windows"] = tuple(
            max(3, 9 - 4 * i) if network.levels == 3 else max(3, 9 - 2 * i)
            for i in range(network.levels)
        )
    loss = LossConfig(**loss_kwargs)
    train_opts = {
        "learning_rate": parsed.get("learning_rate", 1e-4),
        "checkpoint_every": parsed.get("checkpoint_every", 100),
    }
    return network, loss, train_opts
