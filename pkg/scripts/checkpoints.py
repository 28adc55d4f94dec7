#!/usr/bin/env python3
"""
Checkpoint Manager - save, load and inspect model checkpoints

Format: a NumPy .npz archive with one array per parameter or buffer, keyed by
its module path (e.g. "backbone.blocks.0.conv.weight"), plus "__meta__", a 0-d
unicode array holding JSON {format_version, num_classes, feature_dim, config}.
No pickled objects are stored, so archives load with allow_pickle=False.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import torch

from errors import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_KEY = "__meta__"

try:
    from rich.console import Console
    from rich.table import Table
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False


def save_checkpoint(path: str, state_dict: Dict[str, torch.Tensor], meta: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: tensor.detach().cpu().numpy() for name, tensor in state_dict.items()}
    meta = dict(meta, format_version=FORMAT_VERSION)
    arrays[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.debug(f"Saved {len(arrays) - 1} arrays to {path}")
    return path


def load_checkpoint(path: str) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if META_KEY not in archive.files:
            raise CheckpointError(f"{path} has no {META_KEY} entry")
        meta = json.loads(str(archive[META_KEY]))
        state = {name: torch.from_numpy(archive[name].copy()) for name in archive.files if name != META_KEY}
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format_version')}")
    logger.debug(f"Loaded {len(state)} arrays from {path}")
    return state, meta


def show_checkpoint_stats(path: str):
    """Show parameter names, shapes and metadata of a checkpoint"""
    state, meta = load_checkpoint(path)
    total = sum(int(t.numel()) for t in state.values())

    if RICH_AVAILABLE:
        console = Console()
        table = Table(show_header=True, header_style="bold magenta")
        table.add_column("Array")
        table.add_column("Shape", no_wrap=True)
        table.add_column("Elements", justify="right")
        for name, tensor in state.items():
            table.add_row(name, str(tuple(tensor.shape)), f"{tensor.numel():,}")
        console.print(f"💾 Checkpoint: {path}")
        console.print(f"Classes: {meta.get('num_classes')} | Feature dim: {meta.get('feature_dim')} | "
                      f"Elements: {total:,}")
        console.print(table)
    else:
        print(f"Checkpoint: {path}")
        print(f"Classes: {meta.get('num_classes')} | Feature dim: {meta.get('feature_dim')} | Elements: {total:,}")
        for name, tensor in state.items():
            print(f"  {name:<45} {str(tuple(tensor.shape)):<20} {tensor.numel():>10,}")


def main():
    """Main function"""
    if len(sys.argv) < 3:
        print("Checkpoint Manager")
        print("=" * 20)
        print("Usage:")
        print("  python checkpoints.py stats PATH   - Show arrays and metadata")
        print("  python checkpoints.py meta PATH    - Print the metadata JSON")
        return 1

    command, path = sys.argv[1].lower(), sys.argv[2]
    try:
        if command == "stats":
            show_checkpoint_stats(path)
        elif command == "meta":
            _, meta = load_checkpoint(path)
            print(json.dumps(meta, indent=2, sort_keys=True))
        else:
            print(f"Unknown command: {command}")
            print("Use: stats or meta")
            return 1
    except CheckpointError as e:
        print(f"Error reading checkpoint: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
