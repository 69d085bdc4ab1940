"""Gateway for a slurmrestd-style scheduler REST API.

Kept import-light: the mock upstream is spawned once per request and
imports this package.
"""

__version__ = "0.1.0"
