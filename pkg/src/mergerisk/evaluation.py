"""Attack-success-rate measurement over surrogate x target grids.

ASR = fraction of attack-half inputs whose top-1 prediction changes
(untargeted) or hits the chosen label (targeted). One ASR matrix per
(task, attack): rows are surrogates, columns are targets; the same adversarial
batch, generated once per surrogate, is evaluated on every target.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class AsrMatrix:
    task: int
    attack: str
    surrogate_ids: list[str]
    target_ids: list[str]
    values: np.ndarray  # (n_surrogates, n_targets) in [0, 1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.surrogate_ids), len(self.target_ids)):
            raise ValueError("ASR matrix shape does not match id lists")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("ASR entries must lie in [0, 1]")

    def entry(self, surrogate: str, target: str) -> float:
        return float(self.values[self.surrogate_ids.index(surrogate),
                                 self.target_ids.index(target)])


@dataclass
class RelativeTransferAsr:
    task: int
    attack: str
    surrogate: str
    value: float | None  # None marks the undefined case (white-box ASR of 0)

    @property
    def defined(self) -> bool:
        return self.value is not None


def asr_from_predictions(clean_pred: np.ndarray, adv_pred: np.ndarray,
                         target_labels: np.ndarray | None = None) -> float:
    clean_pred, adv_pred = np.asarray(clean_pred), np.asarray(adv_pred)
    if clean_pred.shape != adv_pred.shape:
        raise ValueError(
            f"prediction lengths differ: {clean_pred.shape} vs {adv_pred.shape}")
    if target_labels is not None:
        return float(np.mean(adv_pred == np.asarray(target_labels)))
    return float(np.mean(adv_pred != clean_pred))


def asr(predict_fn, x: np.ndarray, x_adv: np.ndarray,
        target_labels: np.ndarray | None = None) -> float:
    """ASR of one target model given aligned clean/adversarial inputs."""
    if len(x) != len(x_adv):
        raise ValueError(f"input lengths differ: {len(x)} vs {len(x_adv)}")
    return asr_from_predictions(predict_fn(x), predict_fn(x_adv), target_labels)


def build_asr_matrix(task: int, attack: str, adv_batches: dict[str, "AdvBatch"],
                     target_predict_fns: dict[str, callable]) -> AsrMatrix:
    """Evaluate each surrogate's adversarial batch on every target.

    adv_batches: surrogate id -> AdvBatch (generated once, reused across targets).
    target_predict_fns: target id -> batch predictor.
    """
    surrogate_ids = list(adv_batches)
    target_ids = list(target_predict_fns)
    values = np.zeros((len(surrogate_ids), len(target_ids)))
    for i, sid in enumerate(surrogate_ids):
        batch = adv_batches[sid]
        for j, tid in enumerate(target_ids):
            values[i, j] = asr(target_predict_fns[tid], batch.x_clean, batch.x_adv,
                               batch.target_labels)
    return AsrMatrix(task=task, attack=attack, surrogate_ids=surrogate_ids,
                     target_ids=target_ids, values=values)


def relative_transfer_asr(matrix: AsrMatrix, surrogate: str,
                          surrogate_pool: list[str] | None = None) -> RelativeTransferAsr:
    """Mean over non-surrogate targets of ASR normalized by white-box ASR.

    surrogate_pool names the target columns excluded from the transfer mean;
    it defaults to the matrix's own surrogate rows.
    """
    white_box = matrix.entry(surrogate, surrogate)
    pool = matrix.surrogate_ids if surrogate_pool is None else surrogate_pool
    transfer_cols = [t for t in matrix.target_ids if t not in pool]
    if not transfer_cols:
        raise ValueError("matrix has no transfer targets")
    if white_box == 0.0:
        return RelativeTransferAsr(matrix.task, matrix.attack, surrogate, None)
    row = matrix.values[matrix.surrogate_ids.index(surrogate)]
    cols = [matrix.target_ids.index(t) for t in transfer_cols]
    value = float(np.mean([row[c] / white_box for c in cols]))
    return RelativeTransferAsr(matrix.task, matrix.attack, surrogate, value)


# -- serialization ---------------------------------------------------------------

def matrix_to_csv(matrix: AsrMatrix, path: str | Path) -> None:
    """One CSV per (task, attack): rows = surrogates, trailing column = R-bar."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["surrogate"] + matrix.target_ids + ["mean_relative_transfer"])
        for sid in matrix.surrogate_ids:
            rel = relative_transfer_asr(matrix, sid)
            row = matrix.values[matrix.surrogate_ids.index(sid)]
            writer.writerow([sid] + [repr(float(v)) for v in row]
                            + [repr(rel.value) if rel.defined else "undefined"])


def matrices_to_json(matrices: list[AsrMatrix], path: str | Path,
                     meta: dict | None = None) -> None:
    bundle = {"meta": meta or {}, "matrices": []}
    for m in matrices:
        bundle["matrices"].append({
            "task": m.task, "attack": m.attack,
            "surrogates": m.surrogate_ids, "targets": m.target_ids,
            "values": m.values.tolist(),
        })
    Path(path).write_text(json.dumps(bundle, indent=1))


def matrices_from_json(path: str | Path) -> list[AsrMatrix]:
    bundle = json.loads(Path(path).read_text())
    return [AsrMatrix(task=m["task"], attack=m["attack"], surrogate_ids=m["surrogates"],
                      target_ids=m["targets"], values=np.array(m["values"]))
            for m in bundle["matrices"]]
