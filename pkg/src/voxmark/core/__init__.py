"""Core VoxMark modules"""
