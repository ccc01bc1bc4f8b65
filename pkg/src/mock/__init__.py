"""
Mock package for testing.
Contains tiny experiment configurations, hand-built samples and test helpers.
"""
