"""
VoxMark - Localized Audio Watermarking

Generator/detector watermarking for speech with sample-level localization
and multi-bit attribution.
"""

__version__ = "1.0.0"
__author__ = "VoxMark Team"
