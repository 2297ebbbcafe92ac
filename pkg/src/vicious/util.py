"""Shared helpers: stable seed derivation, RNG construction, logging, timing."""

import hashlib
import logging
import os
import time

import numpy as np

LOG_ENV = "VICIOUS_LOG"


def derive_seed(*parts) -> int:
    """Fold a tuple of ints/strings into a stable 63-bit seed.

    Unlike builtin hash(), the result does not depend on interpreter salting,
    so seeds derived from (master_seed, target, repeat) are reproducible
    across processes and machines.
    """
    payload = "\x1f".join(str(p) for p in parts).encode()
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def rng_for(*parts) -> np.random.Generator:
    """Generator seeded by derive_seed(*parts)."""
    return np.random.default_rng(derive_seed(*parts))


def configure_logging() -> None:
    """Set up root logging from the VICIOUS_LOG environment variable.

    Accepts standard level names (DEBUG, INFO, ...); unset or unknown values
    fall back to WARNING.
    """
    name = os.environ.get(LOG_ENV, "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


class Stopwatch:
    """Context manager measuring wall-clock milliseconds."""

    def __enter__(self):
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.ms = (time.perf_counter() - self._start) * 1000.0
        return False
