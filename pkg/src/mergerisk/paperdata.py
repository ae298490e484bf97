"""Access to the bundled reference data used for regression tests and reports.

paper_deltas.json holds ASR-difference samples recovered from a published
full-scale study's plotted data, the study's reported test statistics for
cross-checking, and two reference ASR matrix rows exercising the
relative-transfer computation (including its above-100% branch).
"""
from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .evaluation import AsrMatrix

_FIXTURE = "paper_deltas.json"


def load_fixture() -> dict:
    ref = resources.files("mergerisk").joinpath("fixtures").joinpath(_FIXTURE)
    return json.loads(ref.read_text())


def delta_samples() -> dict[str, np.ndarray]:
    fx = load_fixture()
    return {k: np.asarray(v, dtype=np.float64) for k, v in fx["delta_samples"].items()}


def reported_stats() -> dict[str, dict]:
    return load_fixture()["reported_stats"]


def reference_matrices() -> list[tuple[AsrMatrix, str, list[str], float]]:
    """(matrix, surrogate row, surrogate pool, reported transfer %) tuples.

    Each reference row is packed into a one-row AsrMatrix over the full target
    grid; the surrogate pool names both surrogate columns so the transfer mean
    runs over the eight merged targets only.
    """
    fx = load_fixture()
    out = []
    for row in fx["reference_asr_rows"]:
        values = np.array([row["asr_percent"]]) / 100.0
        matrix = AsrMatrix(
            task=0, attack=row["attack"],
            surrogate_ids=[row["surrogate"]],
            target_ids=list(row["target_order"]),
            values=values)
        out.append((matrix, row["surrogate"], ["theta0", "theta_t"],
                    row["reported_mean_relative_transfer_percent"]))
    return out
