"""Builds paired ASR-difference samples from ASR matrices, runs the
statistical procedure per hypothesis, and performs the gradient-geometry
analysis (center score, surrogate-target alignment, maximizing-direction
check).

Hypothesis specifications are plain data committed to the experiment manifest
before any results exist; the runner refuses specs whose hash is not
registered (a guard against after-the-fact hypothesis edits).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .evaluation import AsrMatrix
from .nets import Network, ParameterVector
from .stats import DeltaSample, StatTestResult, mann_whitney_u, run_procedure

BASE_TAGS = ("wa", "ta", "tm", "am")
SURROGATE_TAGS = ("theta0", "theta_t")


@dataclass(frozen=True)
class Comparison:
    minuend: str          # target column tag, e.g. "am"
    subtrahend: str       # e.g. "ta"
    surrogates: tuple[str, ...]  # subset of SURROGATE_TAGS


@dataclass(frozen=True)
class HypothesisSpec:
    hypothesis_id: str
    description: str
    comparisons: tuple[Comparison, ...]
    per_attack: bool = True      # also emit one sample per attack method
    pooled: bool = True          # emit the pooled-over-attacks sample
    pooled_excluding: tuple[str, ...] = ()  # extra pooled sample minus these attacks
    pool_comparisons: bool = False  # one sample across comparisons (per attack)
    group: str = "default"       # BH correction group key

    def spec_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


class UnregisteredHypothesisError(RuntimeError):
    """Spec hash missing from the experiment manifest."""


def default_hypothesis_specs() -> list[HypothesisSpec]:
    """The four pre-registered hypotheses over the merge-method grid."""
    specs = []
    for stratum, suffix in (("no_rs", ""), ("rs", "_rs")):
        specs.append(HypothesisSpec(
            hypothesis_id=f"H1_{stratum}",
            description="adaptively merged targets are more attackable than "
                        "task-arithmetic and trim-merge targets",
            comparisons=tuple(
                Comparison(f"am{suffix}", f"{m}{suffix}", SURROGATE_TAGS)
                for m in ("ta", "tm")),
            group=f"h1_{stratum}"))
    specs.append(HypothesisSpec(
        hypothesis_id="H2a",
        description="feature-repair adapters reduce transfer from a pretrained surrogate",
        comparisons=tuple(
            Comparison(m, f"{m}_rs", ("theta0",)) for m in BASE_TAGS),
        pool_comparisons=True,
        group="h2a"))
    specs.append(HypothesisSpec(
        hypothesis_id="H2b",
        description="feature-repair adapters increase transfer from fine-tuned surrogates",
        comparisons=tuple(
            Comparison(f"{m}_rs", m, ("theta_t",)) for m in BASE_TAGS),
        pooled_excluding=("fgsm", "tifgsm"),
        pool_comparisons=True,
        group="h2b"))
    for stratum, suffix in (("no_rs", ""), ("rs", "_rs")):
        specs.append(HypothesisSpec(
            hypothesis_id=f"H3_{stratum}",
            description="plain weight averaging is the most attackable merge",
            comparisons=tuple(
                Comparison(f"wa{suffix}", f"{m}{suffix}", SURROGATE_TAGS)
                for m in ("ta", "tm", "am")),
            group=f"h3_{stratum}"))
    return specs


class MissingCellError(KeyError):
    pass


def _collect(matrices: list[AsrMatrix], comparison: Comparison,
             attacks: tuple[str, ...] | None) -> list[float]:
    """Paired differences over every (task, attack, surrogate) cell in scope."""
    values = []
    for m in sorted(matrices, key=lambda m: (m.attack, m.task)):
        if attacks is not None and m.attack not in attacks:
            continue
        for s in comparison.surrogates:
            try:
                values.append(m.entry(s, comparison.minuend)
                              - m.entry(s, comparison.subtrahend))
            except ValueError as exc:
                raise MissingCellError(
                    f"matrix (task={m.task}, attack={m.attack}) lacks a cell for "
                    f"surrogate {s!r}, targets {comparison.minuend!r}/"
                    f"{comparison.subtrahend!r}") from exc
    return values


def build_deltas(matrices: list[AsrMatrix], spec: HypothesisSpec) -> list[DeltaSample]:
    """DeltaSamples in percent points, shaped per the spec's granularity.

    With pool_comparisons the samples run across all comparisons: one per
    attack, one pooled over everything ("all"), and optionally a pooled sample
    excluding named attacks ("sig"). Otherwise each comparison yields its own
    pooled-over-attacks sample plus per-attack slices.
    """
    attacks = sorted({m.attack for m in matrices})
    samples = []
    if spec.pool_comparisons:
        def across(attack_subset):
            vals = []
            for comp in spec.comparisons:
                vals.extend(_collect(matrices, comp, attack_subset))
            return 100.0 * np.array(vals)

        if spec.per_attack:
            for g in attacks:
                samples.append(DeltaSample(label=f"{spec.hypothesis_id}@{g}",
                                           values=across((g,))))
        if spec.pooled:
            samples.append(DeltaSample(label=f"{spec.hypothesis_id}-all",
                                       values=across(None)))
        if spec.pooled_excluding:
            keep = tuple(g for g in attacks if g not in spec.pooled_excluding)
            samples.append(DeltaSample(label=f"{spec.hypothesis_id}-sig",
                                       values=across(keep)))
        return samples
    for comp in spec.comparisons:
        name = f"{comp.minuend}-{comp.subtrahend}"
        if spec.pooled:
            vals = _collect(matrices, comp, None)
            samples.append(DeltaSample(label=name, values=100.0 * np.array(vals)))
        if spec.per_attack:
            for g in attacks:
                vals = _collect(matrices, comp, (g,))
                samples.append(DeltaSample(label=f"{name}@{g}",
                                           values=100.0 * np.array(vals)))
    return samples


def run_hypotheses(matrices: list[AsrMatrix], specs: list[HypothesisSpec],
                   alpha: float = 0.05, fdr: float = 0.05,
                   registered_hashes: set[str] | None = None,
                   ) -> dict[str, list[StatTestResult]]:
    """Run the three-step procedure per hypothesis, BH-corrected within groups.

    If registered_hashes is given, every spec must have been committed there.
    """
    out: dict[str, list[StatTestResult]] = {}
    for spec in specs:
        if registered_hashes is not None and spec.spec_hash() not in registered_hashes:
            raise UnregisteredHypothesisError(
                f"hypothesis {spec.hypothesis_id!r} is not registered in the manifest; "
                "commit its hash at init time before running statistics")
        samples = build_deltas(matrices, spec)
        results = []
        if spec.pool_comparisons:
            # one BH family spanning per-attack, "all" and "sig" samples
            results.extend(run_procedure(samples, alpha=alpha, fdr=fdr))
        else:
            # pooled samples share one family; each comparison's per-attack
            # samples form their own (mirrors how the grid is reported)
            pooled = [s for s in samples if "@" not in s.label]
            per_attack = [s for s in samples if "@" in s.label]
            if pooled:
                results.extend(run_procedure(pooled, alpha=alpha, fdr=fdr))
            by_comp: dict[str, list[DeltaSample]] = {}
            for s in per_attack:
                by_comp.setdefault(s.label.split("@")[0], []).append(s)
            for comp_samples in by_comp.values():
                results.extend(run_procedure(comp_samples, alpha=alpha, fdr=fdr))
        out[spec.hypothesis_id] = results
    return out


# -- gradient geometry ------------------------------------------------------------


@dataclass
class GradientReport:
    center_scores: dict[str, np.ndarray]    # model tag -> per-probe center score
    alignments: dict[str, np.ndarray]       # model tag -> per-probe mean surrogate cosine
    center_p_wa_vs_rest: float | None
    alignment_p_wa_vs_rest: float | None
    skipped_probes: int

    def mean_center(self, tag: str) -> float:
        return float(self.center_scores[tag].mean())

    def mean_alignment(self, tag: str) -> float:
        return float(self.alignments[tag].mean())


def _unit_rows(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    ok = norms[:, 0] > 0
    out = np.divide(g, norms, out=np.zeros_like(g), where=norms > 0)
    return out, ok


def center_score(net: Network, merged: dict[str, ParameterVector],
                 finetuned: list[ParameterVector], probe_x: np.ndarray,
                 probe_labels: np.ndarray, task: int) -> GradientReport:
    """Per-probe centrality of each merged model's input gradient.

    For every probe, the fine-tuned models' input gradients are normalized and
    averaged; a model's center score is the cosine between its own unit
    gradient and that mean direction. Alignment is the mean cosine between a
    model's gradient and each fine-tuned surrogate's. Probes where any
    gradient vanishes are skipped and counted. A single fine-tuned model is
    the degenerate case where the mean direction is that model's own gradient.
    """
    if len(finetuned) < 1:
        raise ValueError("need at least one fine-tuned model")
    unit_ft = []
    valid = np.ones(len(probe_x), dtype=bool)
    for theta in finetuned:
        g = net.input_gradient(theta, probe_x, probe_labels, task)
        u, ok = _unit_rows(g)
        unit_ft.append(u)
        valid &= ok
    mean_dir = np.mean(unit_ft, axis=0)
    mean_unit, ok = _unit_rows(mean_dir)
    valid &= ok

    centers: dict[str, np.ndarray] = {}
    aligns: dict[str, np.ndarray] = {}
    for tag, params in merged.items():
        g = net.input_gradient(params, probe_x, probe_labels, task)
        u, ok = _unit_rows(g)
        keep = valid & ok
        centers[tag] = np.sum(u * mean_unit, axis=1)[keep]
        aligns[tag] = np.mean(
            [np.sum(u * uf, axis=1) for uf in unit_ft], axis=0)[keep]
    skipped = int(len(probe_x) - valid.sum())

    center_p = align_p = None
    rest = [t for t in merged if t != "wa"]
    if "wa" in merged and rest:
        pooled_c = np.concatenate([centers[t] for t in rest])
        pooled_a = np.concatenate([aligns[t] for t in rest])
        if len(centers["wa"]) and len(pooled_c):
            center_p = mann_whitney_u(centers["wa"], pooled_c).one_tailed_p
            align_p = mann_whitney_u(aligns["wa"], pooled_a).one_tailed_p
    return GradientReport(center_scores=centers, alignments=aligns,
                          center_p_wa_vs_rest=center_p,
                          alignment_p_wa_vs_rest=align_p,
                          skipped_probes=skipped)


@dataclass
class LemmaReport:
    configs: int
    probes_per_config: int
    violations: int
    max_gap: float      # worst F(probe) - F(mean direction) observed (<= tol passes)

    @property
    def passed(self) -> bool:
        return self.violations == 0


def check_cosine_family(v: np.ndarray, probes: np.ndarray,
                        tol: float = 1e-12) -> tuple[int, float]:
    """Check one vector family against random probes; returns (violations, gap).

    F(x) = mean_t cos(x, v_t) must be maximized, with value equal to the norm
    of the averaged unit directions; when that average vanishes F is zero
    everywhere.
    """
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("family vectors must be nonzero")
    w = v / norms
    w_bar = w.mean(axis=0)
    w_norm = float(np.linalg.norm(w_bar))
    probes = probes[np.linalg.norm(probes, axis=1) > 0]
    fvals = (probes / np.linalg.norm(probes, axis=1, keepdims=True)) @ w_bar
    if w_norm == 0.0:
        worst = float(np.abs(fvals).max()) if len(fvals) else 0.0
        return (1 if worst > tol else 0), worst
    best = float(np.mean(w @ (w_bar / w_norm)))
    gap = float(fvals.max() - best) if len(fvals) else -np.inf
    violated = gap > tol or abs(best - w_norm) > tol
    return (1 if violated else 0), gap


def verify_cosine_lemma(seed: int, dims: tuple[int, ...] = (2, 3, 4, 8, 16, 32, 64),
                        team_sizes: tuple[int, ...] = (2, 3, 5, 8),
                        probes: int = 1000, configs: int = 50,
                        tol: float = 1e-12) -> LemmaReport:
    """Numerical witness that the mean of unit vectors maximizes average cosine.

    For random nonzero vector families, the averaged-unit-direction value
    F(w-bar) must dominate F at every random probe and equal its norm.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    violations = 0
    max_gap = -np.inf
    for _ in range(configs):
        d = int(rng.choice(dims))
        t = int(rng.choice(team_sizes))
        v = rng.normal(size=(t, d))
        while np.any(np.linalg.norm(v, axis=1) == 0):  # probability-zero resample
            v = rng.normal(size=(t, d))
        bad, gap = check_cosine_family(v, rng.normal(size=(probes, d)), tol)
        violations += bad
        max_gap = max(max_gap, gap)
    return LemmaReport(configs=configs, probes_per_config=probes,
                       violations=violations, max_gap=max_gap)
