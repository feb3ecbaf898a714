#!/usr/bin/env python3
"""
VoxMark Entry Point

Runs the VoxMark command-line application from the project root.

Author: VoxMark Team
Version: 1.0

Usage:
    python voxmark.py embed input.wav --out marked/ --checkpoint checkpoints/latest.pt
    python voxmark.py fpr --k 16 --tau 12
    python voxmark.py --help
"""

import os
import sys

# Add src directory to Python path
src_path = os.path.join(os.path.dirname(__file__), 'src')
sys.path.insert(0, src_path)

from voxmark.main import main

if __name__ == '__main__':
    main()
