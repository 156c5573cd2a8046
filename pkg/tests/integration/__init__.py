"""
Integration tests for dispose-guidance.
"""
