"""Experiment orchestration: staged artifact store with a content-hash manifest.

Stages run in dependency order (pretrain -> finetune -> merge -> attack ->
eval -> stats, with defend/grad-analysis branching off) and are idempotent:
a completed stage whose artifacts still hash-match is skipped unless forced.
Adversarial batches are cached under a key derived from the attack spec, the
surrogate checkpoint hash and the data-split hash, since attacks dominate
runtime. Hypothesis specifications are hash-registered at init; the stats
stage refuses unregistered specs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import (AdvBatch, AttackSpec, GRADIENT_METHODS, cache_key, generate,
                      load_advbatch, make_loss_scorer, save_advbatch, square_attack)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import TaskDataset, generate_tasks, load_idx_images
from .defenses import DefenseSpec, defend_predict
from .evaluation import (AsrMatrix, asr_from_predictions, build_asr_matrix,
                         matrices_from_json, matrices_to_json, matrix_to_csv,
                         relative_transfer_asr)
from .hypotheses import (GradientReport, center_score, default_hypothesis_specs,
                         run_hypotheses)
from .merging import (Adapter, MergedModel, MergeSpec, forward_merged, merge,
                      train_surgery)
from .nets import ModelSpec, Network, ParameterVector
from .stats import results_to_csv_rows
from .training import evaluate_accuracy, finetune, pretrain

STAGES = ("pretrain", "finetune", "merge", "attack", "eval", "stats",
          "defend", "grad-analysis", "report")
_DEPS = {
    "pretrain": (),
    "finetune": ("pretrain",),
    "merge": ("finetune",),
    "attack": ("merge",),
    "eval": ("attack",),
    "stats": ("eval",),
    "defend": ("attack",),
    "grad-analysis": ("merge",),
    "report": ("stats", "defend", "grad-analysis"),
}

MERGED_TAGS = ("wa", "ta", "tm", "am", "wa_rs", "ta_rs", "tm_rs", "am_rs")


class StageDependencyError(RuntimeError):
    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage {stage!r} requires completed stage {missing!r}")
        self.missing = missing


class ManifestCorruptionError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Pipeline:
    def __init__(self, config: ExperimentConfig, out_dir: str | Path | None = None,
                 workers: int = 1, log=print):
        self.cfg = config
        self.out = Path(out_dir if out_dir is not None else config.out_dir)
        self.workers = max(1, workers)
        self.log = log
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.json"
        self.manifest = self._load_manifest()
        self._tasks: list[TaskDataset] | None = None
        self._net: Network | None = None

    # -- manifest -------------------------------------------------------------
    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            manifest = json.loads(self.manifest_path.read_text())
            if manifest.get("config_hash") != self.cfg.config_hash():
                # config changed: start a fresh manifest, keep nothing
                manifest = self._fresh_manifest()
        else:
            manifest = self._fresh_manifest()
        return manifest

    def _fresh_manifest(self) -> dict:
        return {
            "config_hash": self.cfg.config_hash(),
            "toolkit_version": __version__,
            "seed": self.cfg.seed,
            "stages": {},
            "hypothesis_hashes": [h.spec_hash() for h in default_hypothesis_specs()],
            "adv_cache": {},
        }

    def _save_manifest(self):
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1, sort_keys=True))

    def init(self):
        """Record config hash and pre-register hypothesis spec hashes."""
        self._save_manifest()
        return self.manifest

    def _stage_done(self, stage: str) -> bool:
        entry = self.manifest["stages"].get(stage)
        if not entry or not entry.get("completed"):
            return False
        for rel, digest in entry.get("artifacts", {}).items():
            p = self.out / rel
            if not p.exists():
                return False
            if _sha256(p) != digest:
                raise ManifestCorruptionError(
                    f"artifact {rel} does not match its manifest hash; "
                    "refusing to reuse a corrupted store")
        return True

    def _require(self, stage: str):
        for dep in _DEPS[stage]:
            if not self._stage_done(dep):
                raise StageDependencyError(stage, dep)

    def _finish(self, stage: str, paths: list[Path]):
        self.manifest["stages"][stage] = {
            "completed": True,
            "artifacts": {str(p.relative_to(self.out)): _sha256(p) for p in paths},
        }
        self._save_manifest()

    def _meta_line(self) -> str:
        return (f"# config={self.cfg.config_hash()} "
                f"version=mergerisk-{__version__} seed={self.cfg.seed}")

    def _write_csv(self, path: Path, rows: list[list[str]]):
        with open(path, "w", newline="") as fh:
            fh.write(self._meta_line() + "\n")
            csv.writer(fh).writerows(rows)

    # -- shared state -----------------------------------------------------------
    @property
    def net(self) -> Network:
        if self._net is None:
            t = self.tasks[0]
            spec = ModelSpec(
                arch=self.cfg.model.arch, input_dim=t.input_dim,
                image_shape=t.image_shape, num_tasks=len(self.tasks),
                classes_per_task=t.n_classes, hidden=tuple(self.cfg.model.hidden),
                conv_channels=self.cfg.model.conv_channels)
            self._net = Network(spec)
        return self._net

    @property
    def tasks(self) -> list[TaskDataset]:
        if self._tasks is None:
            tc = self.cfg.tasks
            if tc.kind == "synthetic":
                self._tasks = generate_tasks(
                    seed=self.cfg.seed, num_tasks=tc.num_tasks, input_dim=tc.input_dim,
                    classes_per_task=tc.classes_per_task, n_train=tc.n_train,
                    n_test=tc.n_test, center_low=tc.center_low,
                    center_high=tc.center_high, noise_sigma=tc.noise_sigma)
            elif tc.kind == "idx":
                base = load_idx_images(tc.images_path, tc.labels_path or None)
                self._tasks = [base]
                raise NotImplementedError(
                    "idx datasets feed single-task studies; the full pipeline "
                    "needs kind = 'synthetic'")
            else:
                raise ValueError(f"unknown task kind {tc.kind!r}")
        return self._tasks

    def split_hash(self) -> str:
        h = hashlib.sha256()
        for t in self.tasks:
            h.update(t.x_test.tobytes())
            h.update(t.attack_idx.tobytes())
        return h.hexdigest()

    # -- checkpoints -------------------------------------------------------------
    def _ckpt_path(self, name: str) -> Path:
        d = self.out / "checkpoints"
        d.mkdir(exist_ok=True)
        return d / f"{name}.mxb"

    def _merged_path(self, tag: str) -> Path:
        d = self.out / "merged"
        d.mkdir(exist_ok=True)
        return d / f"{tag}.mxb"

    def _sidecar(self, provenance: str) -> dict:
        return {"architecture": self.cfg.model.arch, "seed": self.cfg.seed,
                "config_hash": self.cfg.config_hash(), "provenance": provenance,
                "toolkit_version": __version__}

    def load_theta(self, name: str) -> ParameterVector:
        params, _ = load_checkpoint(self._ckpt_path(name))
        return params

    def load_merged(self, tag: str) -> MergedModel:
        params, sidecar = load_checkpoint(self._merged_path(tag))
        adapters = None
        base_entries = [e for e in params.layout if not e[0].startswith("rs.adapter.")]
        if len(base_entries) != len(params.layout):
            arrays = params.unflatten()
            adapters = {}
            t = 0
            while f"rs.adapter.{t}.u" in arrays:
                adapters[t] = Adapter(v=arrays[f"rs.adapter.{t}.v"].copy(),
                                      u=arrays[f"rs.adapter.{t}.u"].copy())
                t += 1
            params = ParameterVector.flatten(
                {k: arrays[k] for k, _ in base_entries}, tuple(base_entries))
        return MergedModel(params=params, method=sidecar["method"] if sidecar else tag,
                           adapters=adapters)

    def _save_merged(self, tag: str, model: MergedModel) -> Path:
        path = self._merged_path(tag)
        if model.adapters is None:
            save_checkpoint(path, model.params, {**self._sidecar("merge"),
                                                 "method": model.method})
            return path
        arrays = dict(model.params.unflatten())
        layout = list(model.params.layout)
        for t, adapter in sorted(model.adapters.items()):
            arrays[f"rs.adapter.{t}.v"] = adapter.v
            arrays[f"rs.adapter.{t}.u"] = adapter.u
            layout.append((f"rs.adapter.{t}.v", adapter.v.shape))
            layout.append((f"rs.adapter.{t}.u", adapter.u.shape))
        pv = ParameterVector.flatten(arrays, tuple(layout))
        save_checkpoint(path, pv, {**self._sidecar("merge"), "method": model.method})
        return path

    # -- stages -------------------------------------------------------------------
    def stage_pretrain(self, force: bool = False):
        if self._stage_done("pretrain") and not force:
            self.log("pretrain: cached")
            return
        t0 = time.time()
        theta0 = pretrain(self.net, self.tasks, epochs=self.cfg.training.pretrain_epochs,
                          lr=self.cfg.training.pretrain_lr, seed=self.cfg.seed,
                          batch_size=self.cfg.training.batch_size,
                          head_scale=self.cfg.training.head_scale,
                          label_noise=self.cfg.training.pretrain_label_noise,
                          subsample=self.cfg.training.pretrain_subsample)
        path = self._ckpt_path("theta0")
        save_checkpoint(path, theta0, self._sidecar("pretrain"))
        self._finish("pretrain", [path])
        self.log(f"pretrain: done in {time.time() - t0:.1f}s")

    def stage_finetune(self, force: bool = False):
        self._require("finetune")
        if self._stage_done("finetune") and not force:
            self.log("finetune: cached")
            return
        t0 = time.time()
        theta0 = self.load_theta("theta0")
        paths = []
        for task in self.tasks:
            theta_t = finetune(self.net, theta0, task,
                               epochs=self.cfg.training.finetune_epochs,
                               lr=self.cfg.training.finetune_lr,
                               seed=self.cfg.seed + 100 + task.task_id,
                               batch_size=self.cfg.training.batch_size)
            p = self._ckpt_path(f"theta{task.task_id + 1}")
            save_checkpoint(p, theta_t, self._sidecar(f"finetune task {task.task_id}"))
            paths.append(p)
        self._finish("finetune", paths)
        self.log(f"finetune: done in {time.time() - t0:.1f}s")

    def stage_merge(self, force: bool = False):
        self._require("merge")
        if self._stage_done("merge") and not force:
            self.log("merge: cached")
            return
        t0 = time.time()
        theta0 = self.load_theta("theta0")
        models = [self.load_theta(f"theta{t.task_id + 1}") for t in self.tasks]
        eval_inputs = [t.x_eval for t in self.tasks]
        mc = self.cfg.merging
        specs = {
            "wa": MergeSpec(method="wa"),
            "ta": MergeSpec(method="ta", scale=mc.ta_scale),
            "tm": MergeSpec(method="tm", scale=mc.tm_scale,
                            trim_fraction=mc.tm_trim_fraction),
            "am": MergeSpec(method="am", am=mc.am),
        }
        paths = []
        for tag, spec in specs.items():
            base = merge(self.net, theta0, models, spec, eval_inputs)
            paths.append(self._save_merged(tag, base))
            rs_cfg = mc.rs
            with_rs = train_surgery(self.net, base, models, eval_inputs, rs_cfg)
            paths.append(self._save_merged(f"{tag}_rs", with_rs))
        self._finish("merge", paths)
        self.log(f"merge: done in {time.time() - t0:.1f}s")

    # attack helpers
    def _surrogates_for(self, task: TaskDataset) -> dict[str, ParameterVector]:
        return {"theta0": self.load_theta("theta0"),
                "theta_t": self.load_theta(f"theta{task.task_id + 1}")}

    def _attack_subset(self, task: TaskDataset) -> np.ndarray:
        n = min(self.cfg.attacks.n_attack_samples, len(task.x_attack))
        return task.x_attack[:n]

    def _attack_spec(self, method: str, seed_offset: int = 0) -> AttackSpec:
        ac = self.cfg.attacks
        return AttackSpec(method=method, epsilon=ac.epsilon, step_size=ac.step_size,
                          iterations=ac.iterations, momentum_decay=ac.momentum_decay,
                          kernel_size=ac.kernel_size, square_budget=ac.square_budget,
                          square_p=ac.square_p, seed=self.cfg.seed + seed_offset)

    def stage_attack(self, force: bool = False):
        self._require("attack")
        if self._stage_done("attack") and not force:
            self.log("attack: cached")
            return
        t0 = time.time()
        adv_dir = self.out / "adv"
        adv_dir.mkdir(exist_ok=True)
        split = self.split_hash()
        methods = [m for m in self.cfg.attacks.methods if m in GRADIENT_METHODS]
        jobs = []
        for task in self.tasks:
            for sid, params in self._surrogates_for(task).items():
                ckpt_hash = _sha256(self._ckpt_path(
                    "theta0" if sid == "theta0" else f"theta{task.task_id + 1}"))
                for method in methods:
                    spec = self._attack_spec(method, seed_offset=task.task_id)
                    key = cache_key(spec, ckpt_hash, split)
                    jobs.append((task, sid, params, spec, key))
        paths = []

        def run(job):
            task, sid, params, spec, key = job
            path = adv_dir / f"t{task.task_id}_{spec.method}_{sid}.adv"
            cached = self.manifest["adv_cache"].get(str(path.name))
            if path.exists() and cached == key and not force:
                return path
            batch = generate(self.net, params, task, self._attack_subset(task),
                             spec, surrogate_id=sid)
            save_advbatch(path, batch, key)
            return path

        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                paths = list(pool.map(run, jobs))
        else:
            paths = [run(j) for j in jobs]
        for (task, sid, params, spec, key), p in zip(jobs, paths):
            self.manifest["adv_cache"][str(p.name)] = key
        self._finish("attack", paths)
        self.log(f"attack: {len(paths)} batches in {time.time() - t0:.1f}s")

    def _target_predictors(self, task: TaskDataset) -> dict:
        """All target models' batch predictors for one task."""
        predictors = {}
        theta0 = self.load_theta("theta0")
        theta_t = self.load_theta(f"theta{task.task_id + 1}")
        predictors["theta0"] = lambda x, p=theta0: self.net.predict_np(p, x, task.task_id)
        predictors["theta_t"] = lambda x, p=theta_t: self.net.predict_np(p, x, task.task_id)
        for tag in MERGED_TAGS:
            model = self.load_merged(tag)
            predictors[tag] = (lambda x, m=model:
                               np.argmax(forward_merged(self.net, m, x, task.task_id), axis=1))
        return predictors

    def stage_eval(self, force: bool = False):
        self._require("eval")
        if self._stage_done("eval") and not force:
            self.log("eval: cached")
            return
        t0 = time.time()
        mat_dir = self.out / "matrices"
        mat_dir.mkdir(exist_ok=True)
        methods = [m for m in self.cfg.attacks.methods if m in GRADIENT_METHODS]
        matrices = []
        paths = []
        for task in self.tasks:
            predictors = self._target_predictors(task)
            for method in methods:
                batches = {}
                for sid in ("theta0", "theta_t"):
                    batch, _ = load_advbatch(self.out / "adv" /
                                             f"t{task.task_id}_{method}_{sid}.adv")
                    batches[sid] = batch
                matrices.append(build_asr_matrix(task.task_id, method, batches, predictors))
        for matrix in matrices:
            p = mat_dir / f"matrix_t{matrix.task}_{matrix.attack}.csv"
            tmp = mat_dir / "_tmp.csv"
            matrix_to_csv(matrix, tmp)
            body = tmp.read_text()
            tmp.unlink()
            p.write_text(self._meta_line() + "\n" + body)
            paths.append(p)
        bundle = mat_dir / "matrices.json"
        matrices_to_json(matrices, bundle,
                         meta={"config_hash": self.cfg.config_hash(),
                               "toolkit_version": __version__, "seed": self.cfg.seed})
        paths.append(bundle)
        # query-based attack: direct per-target square search
        if "square" in self.cfg.attacks.methods:
            rows = [["task", "target", "asr", "queries"]]
            for task in self.tasks:
                predictors = self._target_predictors(task)
                x = self._attack_subset(task)
                for tag, predict in predictors.items():
                    asr_val, queries = self._square_on_target(task, tag, x)
                    rows.append([str(task.task_id), tag, repr(asr_val), str(queries)])
            p = mat_dir / "square_asr.csv"
            self._write_csv(p, rows)
            paths.append(p)
        self._finish("eval", paths)
        self.log(f"eval: {len(matrices)} matrices in {time.time() - t0:.1f}s")

    def _square_on_target(self, task: TaskDataset, tag: str, x: np.ndarray,
                          ) -> tuple[float, int]:
        spec = self._attack_spec("square", seed_offset=task.task_id)
        if tag in ("theta0", "theta_t"):
            params = self._surrogates_for(task)[tag]
            predict = lambda xb: self.net.predict_np(params, xb, task.task_id)
            labels = predict(x)
            scorer = make_loss_scorer(self.net, params, task.task_id, labels, False)
        else:
            model = self.load_merged(tag)
            predict = (lambda xb:
                       np.argmax(forward_merged(self.net, model, xb, task.task_id), axis=1))
            labels = predict(x)
            scorer = self._merged_loss_scorer(model, task.task_id, labels)
        x_adv, queries = square_attack(scorer, x, spec, task.image_shape)
        return asr_from_predictions(labels, predict(x_adv)), queries

    def _merged_loss_scorer(self, model: MergedModel, task: int, labels: np.ndarray):
        onehot_rows = np.zeros((len(labels), self.net.spec.classes_per_task))
        onehot_rows[np.arange(len(labels)), labels] = 1.0

        def scorer(xb):
            scorer.queries += 1
            probs = forward_merged(self.net, model, xb, task)
            return -np.log(np.maximum((probs * onehot_rows).sum(axis=1), 1e-300))

        scorer.queries = 0
        return scorer

    def stage_stats(self, force: bool = False):
        self._require("stats")
        if self._stage_done("stats") and not force:
            self.log("stats: cached")
            return
        t0 = time.time()
        stats_dir = self.out / "stats"
        stats_dir.mkdir(exist_ok=True)
        matrices = matrices_from_json(self.out / "matrices" / "matrices.json")
        specs = default_hypothesis_specs()
        registered = set(self.manifest["hypothesis_hashes"])
        results = run_hypotheses(matrices, specs, alpha=self.cfg.statistics.alpha,
                                 fdr=self.cfg.statistics.fdr,
                                 registered_hashes=registered)
        paths = []
        md = ["# Hypothesis test results", ""]
        for hid, res in results.items():
            p = stats_dir / f"{hid.lower()}.csv"
            self._write_csv(p, results_to_csv_rows(res))
            paths.append(p)
            md.append(f"## {hid}")
            md.append("")
            md.append("| sample | n | shapiro p | test | statistic | one-tailed p "
                      "| BH p | effect | magnitude |")
            md.append("|---|---|---|---|---|---|---|---|---|")
            for r in res:
                md.append(f"| {r.label} | {r.n} | {r.shapiro_p:.3g} | {r.test_used} "
                          f"| {r.statistic:.4g} | {r.one_tailed_p:.3g} "
                          f"| {r.bh_adjusted_p:.3g} | {r.effect_size:.3f} "
                          f"| {r.magnitude} |")
            md.append("")
        p = stats_dir / "stats_report.md"
        p.write_text(self._meta_line() + "\n" + "\n".join(md))
        paths.append(p)
        self._finish("stats", paths)
        self.log(f"stats: done in {time.time() - t0:.1f}s")

    def stage_defend(self, force: bool = False):
        self._require("defend")
        if self._stage_done("defend") and not force:
            self.log("defend: cached")
            return
        t0 = time.time()
        d_dir = self.out / "defense"
        d_dir.mkdir(exist_ok=True)
        dc = self.cfg.defenses
        task = self.tasks[dc.task]
        x = self._attack_subset(task)
        y = task.y_attack[:len(x)]
        specs = [None,
                 DefenseSpec(kind="CROP_ENSEMBLE", crops=dc.crops,
                             crop_fraction=dc.crop_fraction, seed=self.cfg.seed),
                 DefenseSpec(kind="BIT_DEPTH", bits=dc.bits, seed=self.cfg.seed),
                 DefenseSpec(kind="LOSSY_DCT", quality=dc.quality, seed=self.cfg.seed),
                 DefenseSpec(kind="SND", noise_sigma=dc.noise_sigma, seed=self.cfg.seed)]
        rows = [["defense", "params", "surrogate", "asr", "clean_acc"]]
        for sid in ("theta0", "theta_t"):
            batch, _ = load_advbatch(self.out / "adv" / f"t{task.task_id}_nifgsm_{sid}.adv")
            for spec in specs:
                asr_vals, acc_vals = [], []
                for tag in MERGED_TAGS:
                    model = self.load_merged(tag)
                    proba = (lambda xb, m=model:
                             forward_merged(self.net, m, xb, task.task_id))
                    if spec is None:
                        clean_p = proba(batch.x_clean)
                        adv_p = proba(batch.x_adv)
                    else:
                        rng = np.random.default_rng(np.random.PCG64(spec.seed))
                        clean_p = defend_predict(proba, batch.x_clean, spec,
                                                 task.image_shape, rng)
                        adv_p = defend_predict(proba, batch.x_adv, spec,
                                               task.image_shape, rng)
                    clean_pred = np.argmax(clean_p, axis=1)
                    adv_pred = np.argmax(adv_p, axis=1)
                    asr_vals.append(asr_from_predictions(clean_pred, adv_pred))
                    acc_vals.append(float(np.mean(clean_pred == y)))
                name = spec.kind if spec else "UNDEFENDED"
                params = spec.params_str() if spec else ""
                surrogate_label = "theta0" if sid == "theta0" else f"theta_{task.task_id + 1}"
                rows.append([name, params, surrogate_label,
                             repr(float(np.mean(asr_vals))),
                             repr(float(np.mean(acc_vals)))])
        p = d_dir / "defense_report.csv"
        self._write_csv(p, rows)
        self._finish("defend", [p])
        self.log(f"defend: done in {time.time() - t0:.1f}s")

    def stage_grad_analysis(self, force: bool = False):
        self._require("grad-analysis")
        if self._stage_done("grad-analysis") and not force:
            self.log("grad-analysis: cached")
            return
        t0 = time.time()
        g_dir = self.out / "grad"
        g_dir.mkdir(exist_ok=True)
        gc = self.cfg.gradient
        task = self.tasks[gc.task]
        probes = task.x_attack[:gc.probes]
        finetuned = [self.load_theta(f"theta{t.task_id + 1}") for t in self.tasks]
        # probe labels: the probe task's own fine-tuned model's clean predictions
        labels = self.net.predict_np(finetuned[gc.task], probes, task.task_id)
        merged = {tag: self.load_merged(tag).params for tag in ("wa", "ta", "tm", "am")}
        report = center_score(self.net, merged, finetuned, probes, labels, task.task_id)
        payload = {
            "mean_center": {t: report.mean_center(t) for t in merged},
            "mean_alignment": {t: report.mean_alignment(t) for t in merged},
            "center_p_wa_vs_rest": report.center_p_wa_vs_rest,
            "alignment_p_wa_vs_rest": report.alignment_p_wa_vs_rest,
            "skipped_probes": report.skipped_probes,
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.seed,
        }
        p = g_dir / "gradient_report.json"
        p.write_text(json.dumps(payload, indent=1, sort_keys=True))
        rows = [["model", "mean_center_score", "mean_surrogate_alignment"]]
        for tag in merged:
            rows.append([tag, repr(report.mean_center(tag)), repr(report.mean_alignment(tag))])
        p2 = g_dir / "gradient_report.csv"
        self._write_csv(p2, rows)
        self._finish("grad-analysis", [p, p2])
        self.log(f"grad-analysis: done in {time.time() - t0:.1f}s")

    def stage_report(self, force: bool = False):
        self._require("report")
        if self._stage_done("report") and not force:
            self.log("report: cached")
            return
        r_dir = self.out / "report"
        r_dir.mkdir(exist_ok=True)
        # accuracy table over all models and tasks
        theta0 = self.load_theta("theta0")
        rows = [["model"] + [f"task{t.task_id}" for t in self.tasks] + ["avg"]]

        def acc_row(name, fn):
            accs = [fn(t) for t in self.tasks]
            rows.append([name] + [repr(a) for a in accs] + [repr(float(np.mean(accs)))])

        acc_row("theta0", lambda t: evaluate_accuracy(
            self.net, theta0, t.task_id, t.x_eval, t.y_eval))
        finetuned = {t.task_id: self.load_theta(f"theta{t.task_id + 1}")
                     for t in self.tasks}
        acc_row("individual", lambda t: evaluate_accuracy(
            self.net, finetuned[t.task_id], t.task_id, t.x_eval, t.y_eval))
        for tag in MERGED_TAGS:
            model = self.load_merged(tag)
            acc_row(tag, lambda t, m=model: float(np.mean(
                np.argmax(forward_merged(self.net, m, t.x_eval, t.task_id), axis=1)
                == t.y_eval)))
        p = r_dir / "accuracy.csv"
        self._write_csv(p, rows)
        # relative transfer summary
        matrices = matrices_from_json(self.out / "matrices" / "matrices.json")
        rel_rows = [["task", "attack", "surrogate", "mean_relative_transfer"]]
        for m in matrices:
            for sid in m.surrogate_ids:
                rel = relative_transfer_asr(m, sid)
                rel_rows.append([str(m.task), m.attack, sid,
                                 repr(rel.value) if rel.defined else "undefined"])
        p2 = r_dir / "relative_transfer.csv"
        self._write_csv(p2, rel_rows)
        summary = r_dir / "report.md"
        summary.write_text(self._meta_line() + "\n" + self._summary_md())
        self._finish("report", [p, p2, summary])
        self.log("report: done")

    def _summary_md(self) -> str:
        lines = ["# Experiment summary", "",
                 f"- config hash: `{self.cfg.config_hash()}`",
                 f"- seed: {self.cfg.seed}",
                 "", "Artifacts: accuracy.csv, relative_transfer.csv, "
                 "../matrices/, ../stats/, ../defense/, ../grad/."]
        return "\n".join(lines)

    # -- driver ---------------------------------------------------------------
    def run_stage(self, stage: str, force: bool = False):
        fn = {
            "pretrain": self.stage_pretrain,
            "finetune": self.stage_finetune,
            "merge": self.stage_merge,
            "attack": self.stage_attack,
            "eval": self.stage_eval,
            "stats": self.stage_stats,
            "defend": self.stage_defend,
            "grad-analysis": self.stage_grad_analysis,
            "report": self.stage_report,
        }[stage]
        fn(force=force)

    def run_all(self, force: bool = False, until: str | None = None):
        self.init()
        for stage in STAGES:
            self.run_stage(stage, force=force)
            if until is not None and stage == until:
                break
