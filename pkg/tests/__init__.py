"""
Test package for dispose-guidance.
"""
