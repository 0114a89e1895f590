"""Binary checkpoint format and portable-pixmap image interchange.

Checkpoint layout (all integers little-endian):

    magic  b"LWMK"
    u16    format version (currently 1)
    u32    section count
    per section:
        u16  name length, then utf-8 name
        u8   kind: 0 = float32 tensor, 1 = utf-8 json metadata
        tensor: u8 ndim, u32 per dim, then raw float32 data
        json:   u32 byte length, then the payload
    u32    crc32 of everything after the magic

Round-trips are bit-identical and every load verifies the checksum, so a
truncated or corrupted file fails loudly instead of producing garbage.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

MAGIC = b"LWMK"
VERSION = 1
_KIND_TENSOR = 0
_KIND_JSON = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, sections: dict[str, np.ndarray | dict]) -> None:
    """Write named float32 tensors and json-able metadata dicts."""
    body = bytearray()
    body += struct.pack("<H", VERSION)
    body += struct.pack("<I", len(sections))
    for name, value in sections.items():
        encoded = name.encode("utf-8")
        body += struct.pack("<H", len(encoded)) + encoded
        if isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value, dtype=np.float32)
            body += struct.pack("<B", _KIND_TENSOR)
            body += struct.pack("<B", arr.ndim)
            for dim in arr.shape:
                body += struct.pack("<I", dim)
            body += arr.tobytes()
        else:
            blob = json.dumps(value, sort_keys=True).encode("utf-8")
            body += struct.pack("<B", _KIND_JSON)
            body += struct.pack("<I", len(blob)) + blob
    payload = bytes(body)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + payload + struct.pack("<I", crc))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray | dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 10 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    payload, (crc,) = raw[len(MAGIC) : -4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file corrupted")
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, payload, off)
        off += size
        return values if len(values) > 1 else values[0]

    version = take("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version} unsupported")
    count = take("<I")
    sections: dict[str, np.ndarray | dict] = {}
    for _ in range(count):
        name_len = take("<H")
        name = payload[off : off + name_len].decode("utf-8")
        off += name_len
        kind = take("<B")
        if kind == _KIND_TENSOR:
            ndim = take("<B")
            shape = tuple(take("<I") for _ in range(ndim))
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if ndim else 4
            arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off)
            off += nbytes
            sections[name] = arr.reshape(shape).copy()
        elif kind == _KIND_JSON:
            blob_len = take("<I")
            sections[name] = json.loads(payload[off : off + blob_len].decode("utf-8"))
            off += blob_len
        else:
            raise CheckpointError(f"{path}: unknown section kind {kind}")
    return sections


# --- model <-> section adapters -------------------------------------------


def decoder_sections(decoder) -> dict:
    out: dict[str, np.ndarray | dict] = {"decoder.meta": asdict(decoder.config)}
    for name, arr in decoder.named_arrays().items():
        out[f"decoder.{name}"] = arr
    return out


def decoder_from_sections(sections: dict):
    from .decoder_net import ToyDecoder, ToyDecoderConfig

    meta = sections.get("decoder.meta")
    if meta is None:
        raise CheckpointError("checkpoint has no decoder")
    decoder = ToyDecoder(ToyDecoderConfig(**meta))
    for name, arr in decoder.named_arrays().items():
        key = f"decoder.{name}"
        if key not in sections:
            raise CheckpointError(f"checkpoint missing tensor {key}")
        if sections[key].shape != arr.shape:
            raise CheckpointError(
                f"{key}: shape {sections[key].shape} does not match {arr.shape}"
            )
        arr[...] = sections[key]
    return decoder


def codec_sections(codec) -> dict:
    out: dict[str, np.ndarray | dict] = {
        "codec.meta": {
            "n": codec.n,
            "image_hw": codec.image_hw,
            "widths": list(codec.widths),
        }
    }
    for name, arr in codec.named_arrays().items():
        out[f"codec.{name}"] = arr
    return out


def codec_from_sections(sections: dict, frozen: bool = True):
    from .codec import WatermarkDecoder

    meta = sections.get("codec.meta")
    if meta is None:
        raise CheckpointError("checkpoint has no extractor")
    codec = WatermarkDecoder(meta["n"], meta["image_hw"], widths=tuple(meta["widths"]))
    for name, arr in codec.named_arrays().items():
        key = f"codec.{name}"
        if key not in sections:
            raise CheckpointError(f"checkpoint missing tensor {key}")
        arr[...] = sections[key]
    if frozen:
        codec.freeze()
    return codec


def adapter_sections(adapters: dict) -> dict:
    from . import lora

    out: dict[str, np.ndarray | dict] = {
        "adapters.meta": {"targets": sorted(adapters)}
    }
    for name, ad in adapters.items():
        prefix = f"adapter.{name}"
        out[f"{prefix}.meta"] = {
            "variant": ad.variant,
            "rank": ad.rank,
            "alpha": ad.alpha,
            "alpha_over_r": ad.alpha_over_r,
            "target_id": ad.target_id,
        }
        out[f"{prefix}.a"] = ad.a
        out[f"{prefix}.b"] = ad.b
        if ad.variant == lora.LOHA:
            out[f"{prefix}.a2"] = ad.a2
            out[f"{prefix}.b2"] = ad.b2
        if ad.variant == lora.PISSA:
            out[f"{prefix}.residual_base"] = ad.residual_base
    return out


def adapters_from_sections(sections: dict) -> dict:
    from . import lora

    meta = sections.get("adapters.meta")
    if meta is None:
        return {}
    adapters = {}
    for name in meta["targets"]:
        prefix = f"adapter.{name}"
        info = sections[f"{prefix}.meta"]
        adapters[name] = lora.LoraAdapter(
            variant=info["variant"],
            rank=info["rank"],
            alpha=info["alpha"],
            a=sections[f"{prefix}.a"],
            b=sections[f"{prefix}.b"],
            a2=sections.get(f"{prefix}.a2"),
            b2=sections.get(f"{prefix}.b2"),
            residual_base=sections.get(f"{prefix}.residual_base"),
            target_id=info["target_id"],
            alpha_over_r=info["alpha_over_r"],
        )
    return adapters


# --- 8-bit binary portable pixmap (P6) -------------------------------------


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Store one (3, H, W) image in [0, 1] as a binary P6 pixmap."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    h, w = image.shape[1], image.shape[2]
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.transpose(1, 2, 0).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary P6 pixmap")
    fields, off = [], 2
    while len(fields) < 3:
        while off < len(raw) and raw[off : off + 1].isspace():
            off += 1
        if raw[off : off + 1] == b"#":  # comment line
            off = raw.index(b"\n", off) + 1
            continue
        start = off
        while off < len(raw) and not raw[off : off + 1].isspace():
            off += 1
        fields.append(int(raw[start:off]))
    off += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit pixmaps supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=off)
    return (data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)) / 255.0
