"""Binary checkpoint persistence.

File layout (all integers little-endian u32 unless noted):

    magic   8 bytes  b"SLMICL01"
    version u32      = 1
    conflen u32, config JSON bytes (LmConfig)
    tensors repeated until EOF:
        name_len u32, name UTF-8 bytes
        rank u32, dims[rank] u32
        data   prod(dims) float32 little-endian

Tensor names cover the model tree, "codebook.centroids", and, when a
prompt bank is attached, "prompt.layer{i}.key"/"prompt.layer{i}.value" and
"embed.sep". Tensors are written in sorted name order so identical bundles
produce identical bytes. On-disk precision is float32; for f32 models the
round trip is bitwise lossless.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lm import LmConfig, ModelParams, PromptBank, model_tensor_names
from .tasks import Codebook

MAGIC = b"SLMICL01"
VERSION = 1


class CheckpointError(ValueError):
    """Base class for checkpoint read failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


@dataclass
class CheckpointBundle:
    model: ModelParams
    codebook: Codebook | None
    prompts: PromptBank | None


def save_checkpoint(
    model: ModelParams,
    codebook: Codebook | None,
    prompts: PromptBank | None,
    config: LmConfig,
    path: str | Path,
) -> None:
    if config != model.config:
        raise ValueError("config does not match model.config")
    if prompts is not None and prompts.sep_token != config.sep_token:
        raise ValueError("prompt bank separator id does not match the model vocabulary layout")

    tensors: dict[str, np.ndarray] = dict(model.tensors)
    if codebook is not None:
        tensors["codebook.centroids"] = codebook.centroids
    if prompts is not None:
        tensors.update(prompts.tensors)

    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg_bytes = config.to_json().encode("utf-8")
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<I", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"truncated file: needed {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise CheckpointMagicError(f"bad magic: expected {MAGIC!r}")
    r.pos = len(MAGIC)
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    cfg_len = r.u32()
    try:
        config = LmConfig.from_json(r.take(cfg_len).decode("utf-8"))
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointFormatError(f"invalid config block: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    while not r.exhausted:
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        if rank > 8:
            raise CheckpointFormatError(f"implausible tensor rank {rank} for {name!r}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(4 * count)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(config.np_dtype)

    expected = set(model_tensor_names(config))
    missing = expected - tensors.keys()
    if missing:
        raise CheckpointFormatError(f"missing model tensors: {sorted(missing)[:4]}...")
    model = ModelParams(config=config, tensors={k: tensors[k] for k in model_tensor_names(config)})

    codebook = None
    if "codebook.centroids" in tensors:
        cents = tensors["codebook.centroids"].astype(np.float64)
        codebook = Codebook(centroids=cents, k=cents.shape[0])

    prompts = None
    prompt_names = sorted(k for k in tensors if k.startswith("prompt."))
    if prompt_names or "embed.sep" in tensors:
        if "embed.sep" not in tensors:
            raise CheckpointFormatError("prompt tensors present but embed.sep missing")
        if len(prompt_names) != 2 * config.n_layers:
            raise CheckpointFormatError(
                f"expected {2 * config.n_layers} prompt tensors, found {len(prompt_names)}"
            )
        plen = tensors[prompt_names[0]].shape[0] if tensors[prompt_names[0]].ndim == 2 else 0
        bank_tensors = {k: tensors[k] for k in prompt_names}
        bank_tensors["embed.sep"] = tensors["embed.sep"]
        prompts = PromptBank(prompt_len=plen, sep_token=config.sep_token, tensors=bank_tensors)

    return CheckpointBundle(model=model, codebook=codebook, prompts=prompts)
