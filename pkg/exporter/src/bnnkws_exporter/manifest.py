"""Export manifest: which checkpoint layers become which inference layers.

JSON schema:

    {
      "checkpoint": "model.keras",        // optional, CLI flag overrides
      "feature_dim": 12,
      "layers": [
        {"name": "conv_in",  "kind": "conv_fp",  "stride": 2, "pad": 0},
        {"name": "bn1",      "kind": "batch_norm"},
        {"name": "conv_mid", "kind": "conv_bin", "stride": 1},
        {"name": "bn2",      "kind": "batch_norm"},
        {"name": "conv_out", "kind": "conv_fp"},
        {"name": "bn3",      "kind": "batch_norm"},
        {"kind": "relu"},
        {"kind": "global_avg_pool"}
      ]
    }

"name" addresses a layer in the checkpoint and is required for kinds that
carry weights (convolutions, batch norm); relu and global_avg_pool are
stateless. Exactly the first and last convolutions must be full precision
(conv_fp); every convolution in between must be conv_bin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

VALID_KINDS = ("conv_fp", "conv_bin", "batch_norm", "relu", "global_avg_pool")
WEIGHTED_KINDS = ("conv_fp", "conv_bin", "batch_norm")


class ManifestError(ValueError):
    """Manifest file is malformed or violates the export invariants."""


@dataclass(frozen=True)
class LayerEntry:
    kind: str
    name: str | None = None
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class ExportManifest:
    layers: tuple[LayerEntry, ...]
    feature_dim: int
    checkpoint: str | None = None

    def __post_init__(self) -> None:
        if not self.layers:
            raise ManifestError("manifest lists no layers")
        if self.feature_dim < 1:
            raise ManifestError("feature_dim must be >= 1")
        conv_kinds = [e.kind for e in self.layers if e.kind.startswith("conv")]
        if conv_kinds:
            if conv_kinds[0] != "conv_fp" or conv_kinds[-1] != "conv_fp":
                raise ManifestError(
                    "the first and last convolutions must be full precision"
                )
            if any(k != "conv_bin" for k in conv_kinds[1:-1]):
                raise ManifestError(
                    "every convolution between the first and last must be "
                    "binarized (conv_bin)"
                )
        if self.layers[-1].kind != "global_avg_pool":
            raise ManifestError("the layer list must end in global_avg_pool")


def _parse_entry(raw: dict, position: int) -> LayerEntry:
    if not isinstance(raw, dict):
        raise ManifestError(f"layer {position}: expected an object")
    kind = raw.get("kind")
    if kind not in VALID_KINDS:
        raise ManifestError(
            f"layer {position}: kind must be one of {', '.join(VALID_KINDS)}"
        )
    name = raw.get("name")
    if kind in WEIGHTED_KINDS and not name:
        raise ManifestError(f"layer {position}: {kind} requires a checkpoint name")
    unknown = set(raw) - {"kind", "name", "stride", "pad"}
    if unknown:
        raise ManifestError(f"layer {position}: unknown keys {sorted(unknown)}")
    stride = int(raw.get("stride", 1))
    pad = int(raw.get("pad", 0))
    if stride < 1:
        raise ManifestError(f"layer {position}: stride must be >= 1")
    if pad != 0 and kind == "conv_bin":
        raise ManifestError(
            f"layer {position}: binarized convolutions cannot be padded"
        )
    return LayerEntry(kind=kind, name=name, stride=stride, pad=pad)


def load_manifest(path: str | Path) -> ExportManifest:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON: {e}") from None
    if not isinstance(data, dict) or "layers" not in data:
        raise ManifestError(f"{path}: expected an object with a 'layers' list")
    unknown = set(data) - {"layers", "feature_dim", "checkpoint"}
    if unknown:
        raise ManifestError(f"{path}: unknown keys {sorted(unknown)}")
    entries = tuple(
        _parse_entry(raw, i) for i, raw in enumerate(data["layers"])
    )
    if "feature_dim" not in data:
        raise ManifestError(f"{path}: feature_dim is required")
    return ExportManifest(
        layers=entries,
        feature_dim=int(data["feature_dim"]),
        checkpoint=data.get("checkpoint"),
    )
