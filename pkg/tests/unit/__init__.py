"""
Unit tests for dispose-guidance.
"""
