"""Evaluation protocols producing CSV reports"""
