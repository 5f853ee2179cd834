"""Image metrics and the line-delimited metrics file."""
from __future__ import annotations

import json
import math

import numpy as np


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]. Exact match gives inf."""
    mse = float(np.mean((np.asarray(image, float) - np.asarray(reference, float)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


class MetricsWriter:
    """One JSON record per line; append mode supports run resumption."""

    def __init__(self, path, append: bool = False):
        self.path = path
        self._fh = open(path, "a" if append else "w")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
