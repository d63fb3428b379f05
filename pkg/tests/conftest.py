"""Shared pytest configuration; keeps the tests directory importable so test
modules can use the oracle helpers in oracles.py."""
