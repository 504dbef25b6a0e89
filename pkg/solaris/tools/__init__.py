"""Shared helpers: JSON lines, hashing."""
