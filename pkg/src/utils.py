"""
NP-FKGC - Utility Functions
Logging setup, seeded random streams and small file helpers shared by the engine.
"""

import json
import logging
import zlib
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Named rng streams derived from the single run seed
STREAMS = ("init", "tasks", "latent", "neighbors", "synth", "eval", "entropy")


def configure_logging(level: Union[int, str] = logging.INFO, log_file: Optional[Union[str, Path]] = None) -> None:
    """
    Install one stream handler (and optionally a file handler) on the root logger.

    Args:
        level: Logging level name or number
        log_file: Optional path that receives the same records
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    formatter = logging.Formatter(LOG_FORMAT)
    stream = logging.StreamHandler()
    stream.setFormatter(formatter)
    root.addHandler(stream)
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(log_file, encoding="utf-8")
        fh.setFormatter(formatter)
        root.addHandler(fh)
    root.setLevel(level if isinstance(level, int) else level.upper())


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """
    Independent generator for one named purpose.

    The stream key is a CRC of the name so it does not depend on Python's
    per-process string hashing.

    Args:
        seed: Run seed
        name: Stream name, e.g. 'init' or 'tasks'

    Returns:
        numpy Generator seeded from SeedSequence(seed, spawn_key=(crc(name),))
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def set_seed(seed: int = 42) -> Dict[str, np.random.Generator]:
    """Build every named stream for a run."""
    return {name: rng_stream(seed, name) for name in STREAMS}


def write_json(payload: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_tsv(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Write a DataFrame as tab-separated text, full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, sep="\t", index=False, float_format="%.10g")
    logger.info("Wrote %d rows to %s", len(df), path)
    return path
