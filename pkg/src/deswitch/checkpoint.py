"""Versioned binary checkpoints: header with a config digest, then named
parameter entries (name, shape, row-major float64 data). Round-trips are
bit-exact; loading verifies the digest when an expected config is given.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import ModelConfig, config_digest_text

MAGIC = b"DSWC"
FORMAT_VERSION = 1


def config_digest(cfg: ModelConfig) -> str:
    return hashlib.sha256(config_digest_text(cfg).encode()).hexdigest()


def params_digest(params: dict[str, Tensor], names=None) -> str:
    """SHA-256 over sorted (name, shape, raw bytes); used by freeze checks."""
    h = hashlib.sha256()
    for name in sorted(names if names is not None else params):
        t = params[name]
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _write_checkpoint(path: Path, params: dict[str, Tensor], digest: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    db = digest.encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", FORMAT_VERSION, len(db)))
        fh.write(db)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f8")
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())
    return path


def save_checkpoint(path: str | Path, params: dict[str, Tensor], cfg: ModelConfig) -> Path:
    return _write_checkpoint(Path(path), params, config_digest(cfg))


def load_checkpoint(path: str | Path, expected_cfg: ModelConfig | None = None
                    ) -> tuple[dict[str, Tensor], str]:
    """Load (params, config digest); params require gradients."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, dlen = struct.unpack_from("<HH", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    digest = raw[off:off + dlen].decode()
    off += dlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        params[name] = Tensor(data.copy(), requires_grad=True)
    if expected_cfg is not None and digest != config_digest(expected_cfg):
        raise ValueError(f"{path}: checkpoint config digest does not match the "
                         "provided configuration")
    return params, digest


def average_checkpoints(paths: list[str | Path], out_path: str | Path) -> Path:
    """Arithmetic per-parameter mean of checkpoints with identical layouts."""
    if not paths:
        raise ValueError("average_checkpoints: no inputs")
    loaded = [load_checkpoint(p) for p in paths]
    digests = {d for _, d in loaded}
    if len(digests) > 1:
        raise ValueError("average_checkpoints: inputs built from different configs")
    base, _ = loaded[0]
    layout = {name: base[name].shape for name in base}
    for (params, _), p in zip(loaded[1:], paths[1:]):
        offenders = sorted(set(layout) ^ set(params))
        offenders += sorted(name for name in layout
                            if name in params and params[name].shape != layout[name])
        if offenders:
            raise ValueError(f"average_checkpoints: {p} disagrees on parameters: "
                             f"{', '.join(offenders)}")
    k = len(loaded)
    mean = {}
    for name in base:
        acc = loaded[0][0][name].data.copy()
        for params, _ in loaded[1:]:
            acc += params[name].data
        mean[name] = Tensor(acc / k, requires_grad=True)
    return _write_checkpoint(Path(out_path), mean, next(iter(digests)))
