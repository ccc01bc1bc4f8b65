"""Test helpers: temporary directories, config files and singleton reset."""
