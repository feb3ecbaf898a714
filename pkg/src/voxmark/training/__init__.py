"""Joint generator/detector training"""
