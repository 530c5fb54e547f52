#!/usr/bin/env python3
"""
Command-line entry point for the nowcasting toolkit.

    python run_nowcast.py gen-data --out data --seed 0 --preset desk
    python run_nowcast.py train --data data --out ckpt --epochs 30
    python run_nowcast.py predict --ckpt ckpt --data data/val --out preds
    python run_nowcast.py score --pred preds --truth data/val
"""

import os
import sys

sys.path.append(os.path.dirname(__file__))

from nowcast.cli import main


if __name__ == "__main__":
    sys.exit(main())
