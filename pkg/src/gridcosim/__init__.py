"""Desk-scale transmission and distribution co-simulation with DER grid services."""

__version__ = "0.1.0"

import pathlib

DATA_DIR = pathlib.Path(__file__).parent / "data"
SCENARIO_DIR = pathlib.Path(__file__).parent / "scenarios"


def data_path(name: str) -> pathlib.Path:
    return DATA_DIR / name
