"""Adversarial watermark removal and forging"""
