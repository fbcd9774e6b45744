"""Execution harness: loads kernel modules, generates spec-driven inputs,
times on device, and compares outputs — served over wire protocol v1.

This package is the trusted measurement path. It never sees optimizer
internals; everything arrives through line-delimited JSON requests
(see PROTOCOL.md at the repository root).
"""

__version__ = "0.1.0"

PROTOCOL_VERSION = 1
