"""Seeded default pretrained models shipped with the package.

Both checkpoints are fully reproducible: ``python -m lowmark.assets``
regenerates them in place from the fixed seeds below, and the pretraining
code paths are deterministic, so the bytes come out identical.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .checkpoint import (
    codec_from_sections,
    codec_sections,
    decoder_from_sections,
    decoder_sections,
    load_checkpoint,
    save_checkpoint,
)

DECODER_ASSET = "decoder_default.ckpt"
CODEC_ASSET = "codec_default_n16.ckpt"


def _asset_dir() -> Path:
    return Path(str(resources.files("lowmark"))) / "assets"


def _asset_path(name: str) -> Path:
    return _asset_dir() / name


def default_decoder():
    """The shipped clean decoder (non-degenerate textured outputs)."""
    return decoder_from_sections(load_checkpoint(_asset_path(DECODER_ASSET)))


def default_codec():
    """The shipped frozen 16-bit extractor, noise-layer pretrained."""
    return codec_from_sections(load_checkpoint(_asset_path(CODEC_ASSET)), frozen=True)


def regenerate(out_dir: str | Path | None = None) -> tuple[Path, Path]:
    from .codec import PretrainCodecConfig, pretrain_codec
    from .decoder_net import DecoderPretrainConfig, pretrain_decoder
    from .kernels import Rng

    out = Path(out_dir) if out_dir else _asset_dir()
    out.mkdir(parents=True, exist_ok=True)

    dec_cfg = DecoderPretrainConfig()
    decoder = pretrain_decoder(dec_cfg, Rng(dec_cfg.seed))
    dec_path = out / DECODER_ASSET
    save_checkpoint(dec_path, decoder_sections(decoder))

    codec_cfg = PretrainCodecConfig()
    codec, report = pretrain_codec(codec_cfg, Rng(codec_cfg.seed))
    codec_path = out / CODEC_ASSET
    save_checkpoint(codec_path, codec_sections(codec))
    print(
        f"wrote {dec_path} and {codec_path} "
        f"(extractor clean acc {report.clean_accuracy:.4f}, "
        f"noisy acc {report.noisy_accuracy:.4f})"
    )
    return dec_path, codec_path


if __name__ == "__main__":
    regenerate()
