"""Export CLI: bnnkws-export --checkpoint model.keras --manifest m.json --out w.bnn"""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, export
from .manifest import ManifestError, load_manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bnnkws-export",
        description="Convert a Keras checkpoint into a BNNKWS01 weights file",
    )
    parser.add_argument("--checkpoint", help="Keras model file (.keras or .h5)")
    parser.add_argument("--manifest", required=True, help="export manifest JSON")
    parser.add_argument("--out", required=True, help="output weights file")
    args = parser.parse_args(argv)

    try:
        manifest = load_manifest(args.manifest)
        path = export(manifest, args.out, checkpoint_path=args.checkpoint)
    except (ManifestError, ExportError, FileNotFoundError) as e:
        print(f"export failed: {e}", file=sys.stderr)
        return 1
    print(f"weights -> {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
