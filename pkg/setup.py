#!/usr/bin/env python3
"""Shim for tools without PEP 517 support; the build is configured in pyproject.toml."""

from setuptools import setup

# kept in sync with pyproject.toml and pydpcflow/__init__.py by check_quality.sh
VERSION = "0.1.0"

if __name__ == "__main__":
    setup(version=VERSION)
