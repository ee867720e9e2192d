#!/usr/bin/env python3
"""
clip-ada runner.

Thin wrapper around the package CLI so a checkout can be used without
installing it:

    python run_clip_ada.py train --config presets/mvtec --dataset-root /data/mvtec
    python run_clip_ada.py eval --checkpoint outputs/checkpoint.pt
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from src.clip_ada.main import main  # noqa: E402

if __name__ == "__main__":
    main()
