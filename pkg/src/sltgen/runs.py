"""Experiment drivers.

Each `run_*` function executes one experiment end to end: build the
pieces from an `ExperimentConfig`, loop its training/search steps, emit
metric rows on the eval cadence, and leave three kinds of artifact in
`out_dir`:

    run.csv         fixed-column metric rows (one per eval point)
    loss.csv        per-step loss trace (training/search runs)
    checkpoint/     manifest + raw tensors (see checkpoint module)
    samples.csv / samples.pgm   final sample dump

Determinism contract: identical config and seeds give byte-identical
artifacts.  The wallclock_s column is part of the fixed CSV schema but
is always written as 0.0 precisely for that reason; timing is printed
to the console instead.

Seed layout: weights/scores/data/eval are four independent streams.
Training latents derive from (data, 1), the eval latents from eval, and
the held-out eval set from (eval, 1), so paired runs that share seeds
see identical data on every path.
"""

from __future__ import annotations

from dataclasses import replace
import hashlib
import itertools
import json
import os
import time

import numpy as np

from .checkpoint import (
    Checkpoint,
    CheckpointError,
    generator_state,
    load_checkpoint,
    restore_masks,
    restore_moments,
    restore_scores,
    restore_weights,
    save_checkpoint,
)
from .config import ExperimentConfig
from .data import (
    make_dataset,
    render_blob_images,
    to_uint8,
    write_idx,
    write_pgm_grid,
    write_points_csv,
)
from .metrics import MetricsReport, evaluate, generate_array
from .mmd import MomentBank, mixture_kernel_from_data
from .nets import build_feature_extractor, build_generator
from .optim import AdamState, CosineSchedule, cosine_lr
from .prune import (
    NumericalAbort,
    finetune_step,
    init_all_scores,
    select_mask,
    score_state_hash,
    slt_search_step,
    weight_state_hash,
)

CSV_COLUMNS = ("step", "k_percent", "scope", "init_scheme", "channel_multiplier",
               "loss", "mmd2_eval", "fd", "precision", "recall", "density",
               "coverage", "wallclock_s", "config_hash")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: str, rows: list[dict]) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in CSV_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_run_csv(path: str) -> list[dict]:
    """Parse a run.csv back into typed rows (floats where they parse)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        if not line:
            continue
        row = {}
        for key, cell in zip(header, line.split(",")):
            try:
                row[key] = float(cell)
            except ValueError:
                row[key] = cell
        rows.append(row)
    return rows


def masked_weight_hash(params) -> str:
    """Hash of the pruned-away weight entries only."""
    digest = hashlib.sha256()
    for p in params:
        digest.update(p.theta[p.mask == 0].tobytes())
    return digest.hexdigest()


class _Run:
    """Shared plumbing for one experiment execution."""

    def __init__(self, config: ExperimentConfig):
        if not config.out_dir:
            raise ValueError("run: config.out_dir is required")
        self.config = config
        self.out_dir = config.out_dir
        os.makedirs(self.out_dir, exist_ok=True)
        self.config_hash = config.config_hash()

        self.generator = build_generator(config.generator, config.init_scheme,
                                         config.seeds.weights)
        self.extractor = build_feature_extractor(config.extractor)
        self.eval_extractor = build_feature_extractor(config.eval_extractor)
        self.sampler = make_dataset(config.dataset, config.seeds.data)
        self.latent_rng = np.random.default_rng(
            np.random.SeedSequence((config.seeds.data, 1)))

        widths = self.extractor.tap_widths(self.sampler.sample_shape)
        self.bank = MomentBank(widths, beta1=config.ema.beta1,
                               beta2=config.ema.beta2, ema_lr=config.ema.lr)
        first = self.sampler.sample(config.batch_size)
        first_taps = [t.data for t in self.extractor.extract(first)]
        self.bank.warm_start(first_taps)
        self.train_bandwidths = None
        if config.loss == "kernel_mmd":
            concat = np.concatenate(first_taps, axis=1)
            self.train_bandwidths = mixture_kernel_from_data(concat).bandwidths

        eval_sampler = make_dataset(config.dataset, (config.seeds.eval, 1))
        self.eval_real = eval_sampler.sample(config.eval_samples)
        real_feats = [t.data for t in self.eval_extractor.extract(self.eval_real)]
        concat = real_feats[0] if len(real_feats) == 1 \
            else np.concatenate(real_feats, axis=1)
        self.eval_kernel = mixture_kernel_from_data(concat)

        total = max(config.total_steps, 1)
        self.schedule = CosineSchedule(lr0=config.optimizer.lr, total_steps=total,
                                       lr_min=config.optimizer.lr_min)
        self.rows: list[dict] = []
        self.loss_trace: list[tuple[int, float]] = []
        self.started = time.monotonic()

    # -- per-step ------------------------------------------------------------

    def lr_at(self, step: int) -> float:
        if not self.config.optimizer.cosine:
            return self.config.optimizer.lr
        return cosine_lr(self.schedule, step)

    def batches(self):
        config = self.config
        real = self.sampler.sample(config.batch_size)
        latent = self.latent_rng.standard_normal(
            (config.batch_size, config.generator.latent_dim))
        return real, latent

    def adam_states(self, include_bn: bool) -> dict[str, AdamState]:
        opt = self.config.optimizer
        states = {p.layer_id: AdamState.zeros(p.theta.shape, opt.beta1, opt.beta2)
                  for p in self.generator.params}
        if include_bn:
            for bn in self.generator.bn_params:
                states[bn.name + ".gamma"] = AdamState.zeros(bn.gamma.shape,
                                                             opt.beta1, opt.beta2)
                states[bn.name + ".beta"] = AdamState.zeros(bn.beta.shape,
                                                            opt.beta1, opt.beta2)
        return states

    # -- evaluation and artifacts ---------------------------------------------

    def evaluate_now(self) -> MetricsReport:
        config = self.config
        return evaluate(self.generator, self.eval_extractor, self.eval_real,
                        n_samples=config.eval_samples,
                        latent_seed=config.seeds.eval, knn_k=config.knn_k,
                        kernel=self.eval_kernel, batch_size=config.batch_size)

    def add_row(self, step: int, loss_value: float, report: MetricsReport) -> dict:
        config = self.config
        row = {
            "step": step,
            "k_percent": float(config.mask.k_percent),
            "scope": config.mask.scope,
            "init_scheme": config.init_scheme,
            "channel_multiplier": float(config.generator.channel_multiplier),
            "loss": float(loss_value),
            "mmd2_eval": report.mmd2_eval,
            "fd": report.fd,
            "precision": report.precision,
            "recall": report.recall,
            "density": report.density,
            "coverage": report.coverage,
            "wallclock_s": 0.0,  # fixed: rows must be byte-identical across runs
            "config_hash": self.config_hash,
        }
        self.rows.append(row)
        _write_csv(os.path.join(self.out_dir, "run.csv"), self.rows)
        elapsed = time.monotonic() - self.started
        print(f"[{self.config.experiment}] step {step}: loss={loss_value:.6g} "
              f"mmd2={report.mmd2_eval:.6g} fd={report.fd:.6g} ({elapsed:.1f}s)")
        return row

    def write_loss_trace(self) -> None:
        if not self.loss_trace:
            return
        lines = ["step,loss"]
        lines += [f"{s},{_fmt(v)}" for s, v in self.loss_trace]
        with open(os.path.join(self.out_dir, "loss.csv"), "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def save(self, step: int, include_scores: bool) -> str:
        path = os.path.join(self.out_dir, "checkpoint")
        tensors = generator_state(self.generator, self.bank,
                                  include_scores=include_scores)
        save_checkpoint(path, step=step, config_hash=self.config_hash,
                        config=self.config.canonical_dict(), tensors=tensors,
                        moment_steps=self.bank.step_counts())
        return path

    def dump_samples(self) -> str:
        config = self.config
        rng = np.random.default_rng(np.random.SeedSequence((config.seeds.eval, 2)))
        samples = generate_array(self.generator, config.sample_count, rng,
                                 config.batch_size)
        return dump_sample_file(self.out_dir, samples)

    def is_eval_step(self, step: int) -> bool:
        return step == self.config.total_steps or step % self.config.eval_every == 0


def dump_sample_file(out_dir: str, samples: np.ndarray) -> str:
    if samples.ndim == 2:
        path = os.path.join(out_dir, "samples.csv")
        write_points_csv(path, samples)
    else:
        path = os.path.join(out_dir, "samples.pgm")
        write_pgm_grid(path, to_uint8(samples[:, 0]))
    return path


def _load_input_checkpoint(config: ExperimentConfig) -> Checkpoint:
    ckpt = load_checkpoint(config.checkpoint_in)
    stored = ckpt.config.get("generator")
    if stored is not None:
        current = config.canonical_dict()["generator"]
        if stored != current:
            raise CheckpointError(
                "checkpoint architecture does not match the configured generator: "
                f"{stored} vs {current}")
    return ckpt


# -- experiment drivers -------------------------------------------------------


def run_train_dense(config: ExperimentConfig) -> dict:
    """Dense weight training with the moment-matching loss."""
    run = _Run(config)
    # masks are born all-ones; dense training never selects
    states = run.adam_states(include_bn=config.train_bn)

    report = run.evaluate_now()
    run.add_row(0, float("nan"), report)
    run.save(0, include_scores=False)
    step = 0
    try:
        for step in range(1, config.total_steps + 1):
            real, latent = run.batches()
            value = finetune_step(run.generator, run.extractor, run.bank, states,
                                  run.lr_at(step - 1), real, latent,
                                  loss_kind=config.loss,
                                  kernel_bandwidths=run.train_bandwidths,
                                  train_bn=config.train_bn)
            run.loss_trace.append((step, value))
            if run.is_eval_step(step):
                report = run.evaluate_now()
                run.add_row(step, value, report)
                run.save(step, include_scores=False)
    except NumericalAbort:
        run.save(step - 1, include_scores=False)  # state before the bad step
        raise
    finally:
        run.write_loss_trace()
    run.dump_samples()
    return {"out_dir": run.out_dir, "rows": run.rows, "final": run.rows[-1],
            "checkpoint": os.path.join(run.out_dir, "checkpoint")}


def _run_mask_search(config: ExperimentConfig, source: Checkpoint | None) -> dict:
    """Shared loop of find_slt and prune_pretrained."""
    run = _Run(config)
    if source is not None:
        restore_weights(run.generator, source)
        restore_moments(run.bank, source)
    init_all_scores(run.generator.params, config.seeds.scores)
    states = {p.layer_id: AdamState.zeros(p.theta.shape, config.optimizer.beta1,
                                          config.optimizer.beta2)
              for p in run.generator.params}
    weights_before = weight_state_hash(run.generator.params, run.generator.bn_params)

    select_mask(run.generator.params, config.mask)
    report = run.evaluate_now()
    run.add_row(0, float("nan"), report)
    run.save(0, include_scores=True)
    step = 0
    try:
        for step in range(1, config.total_steps + 1):
            real, latent = run.batches()
            value = slt_search_step(run.generator, run.extractor, run.bank,
                                    config.mask, states, run.lr_at(step - 1),
                                    real, latent, loss_kind=config.loss,
                                    kernel_bandwidths=run.train_bandwidths)
            run.loss_trace.append((step, value))
            if run.is_eval_step(step):
                now = weight_state_hash(run.generator.params, run.generator.bn_params)
                if now != weights_before:
                    raise RuntimeError("mask search modified frozen weights")
                select_mask(run.generator.params, config.mask)
                report = run.evaluate_now()
                run.add_row(step, value, report)
                run.save(step, include_scores=True)
    except NumericalAbort:
        select_mask(run.generator.params, config.mask)
        run.save(step - 1, include_scores=True)  # state before the bad step
        raise
    finally:
        run.write_loss_trace()
    run.dump_samples()
    return {"out_dir": run.out_dir, "rows": run.rows, "final": run.rows[-1],
            "checkpoint": os.path.join(run.out_dir, "checkpoint"),
            "weight_hash_unchanged": True}


def run_find_slt(config: ExperimentConfig) -> dict:
    """Score-driven mask search over freshly initialized frozen weights."""
    return _run_mask_search(config, None)


def run_prune_pretrained(config: ExperimentConfig) -> dict:
    """Mask search over the weights of a trained dense checkpoint."""
    return _run_mask_search(config, _load_input_checkpoint(config))


def run_finetune(config: ExperimentConfig) -> dict:
    """Train the surviving weights of a ticket under its fixed mask."""
    source = _load_input_checkpoint(config)
    run = _Run(config)
    restore_weights(run.generator, source)
    restore_masks(run.generator, source)
    if not restore_moments(run.bank, source):
        pass  # fresh bank already warm-started from the data stream
    states = run.adam_states(include_bn=config.train_bn)

    frozen_state = score_state_hash(run.generator.params)
    masked_state = masked_weight_hash(run.generator.params)

    before = run.evaluate_now()
    run.add_row(0, float("nan"), before)
    run.save(0, include_scores=False)
    after = before
    step = 0
    try:
        for step in range(1, config.total_steps + 1):
            real, latent = run.batches()
            value = finetune_step(run.generator, run.extractor, run.bank, states,
                                  run.lr_at(step - 1), real, latent,
                                  loss_kind=config.loss,
                                  kernel_bandwidths=run.train_bandwidths,
                                  train_bn=config.train_bn)
            run.loss_trace.append((step, value))
            if run.is_eval_step(step):
                if score_state_hash(run.generator.params) != frozen_state:
                    raise RuntimeError("fine-tuning modified scores or masks")
                if masked_weight_hash(run.generator.params) != masked_state:
                    raise RuntimeError("fine-tuning modified masked-out weights")
                after = run.evaluate_now()
                run.add_row(step, value, after)
                run.save(step, include_scores=False)
    except NumericalAbort:
        run.save(step - 1, include_scores=False)  # state before the bad step
        raise
    finally:
        run.write_loss_trace()
    run.dump_samples()

    summary = {"before": before.as_dict(), "after": after.as_dict(),
               "mmd2_delta": after.mmd2_eval - before.mmd2_eval}
    with open(os.path.join(run.out_dir, "finetune_summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return {"out_dir": run.out_dir, "rows": run.rows, "final": run.rows[-1],
            "checkpoint": os.path.join(run.out_dir, "checkpoint"),
            "summary": summary}


def run_eval(config: ExperimentConfig) -> dict:
    """Metrics of a stored checkpoint (optionally with a swapped-in mask)."""
    source = _load_input_checkpoint(config)
    run = _Run(config)
    restore_weights(run.generator, source)
    if any(p.layer_id + ".mask" in source.tensors for p in run.generator.params):
        restore_masks(run.generator, source)
    if config.mask_in:
        restore_masks(run.generator, load_checkpoint(config.mask_in))
    report = run.evaluate_now()
    row = run.add_row(source.step, float("nan"), report)
    with open(os.path.join(run.out_dir, "metrics.json"), "w") as fh:
        json.dump(report.as_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return {"out_dir": run.out_dir, "rows": run.rows, "final": row,
            "report": report}


def run_generate(config: ExperimentConfig) -> dict:
    """Sample dump from stored weights, with mask swapping support."""
    source = load_checkpoint(config.checkpoint_in)
    generator = build_generator(config.generator, config.init_scheme,
                                config.seeds.weights)
    stored = source.config.get("generator")
    if stored is not None and stored != config.canonical_dict()["generator"]:
        raise CheckpointError(
            "checkpoint architecture does not match the configured generator")
    restore_weights(generator, source)
    if any(p.layer_id + ".mask" in source.tensors for p in generator.params):
        restore_masks(generator, source)
    if config.mask_in:
        restore_masks(generator, load_checkpoint(config.mask_in))
    os.makedirs(config.out_dir, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(config.seeds.eval))
    samples = generate_array(generator, config.sample_count, rng,
                             config.batch_size)
    path = dump_sample_file(config.out_dir, samples)
    return {"out_dir": config.out_dir, "samples": path, "count": len(samples)}


def run_gen_data(config: ExperimentConfig) -> dict:
    """Materialize dataset samples as files (points, IDX images, preview)."""
    os.makedirs(config.out_dir, exist_ok=True)
    sampler = make_dataset(config.dataset, config.seeds.data)
    samples = sampler.sample(config.sample_count)
    written = {}
    if samples.ndim == 2:
        path = os.path.join(config.out_dir, "points.csv")
        write_points_csv(path, samples)
        written["points"] = path
        if config.render_size > 0:
            images = render_blob_images(samples, config.render_size)
            idx_path = os.path.join(config.out_dir, "images.idx")
            write_idx(idx_path, images)
            written["images"] = idx_path
            preview = os.path.join(config.out_dir, "preview.pgm")
            write_pgm_grid(preview, images[:64])
            written["preview"] = preview
    else:
        images = to_uint8(samples[:, 0])
        idx_path = os.path.join(config.out_dir, "images.idx")
        write_idx(idx_path, images)
        written["images"] = idx_path
        preview = os.path.join(config.out_dir, "preview.pgm")
        write_pgm_grid(preview, images[:64])
        written["preview"] = preview
    return {"out_dir": config.out_dir, **written}


# -- sweeps -------------------------------------------------------------------


def sweep_cells(config: ExperimentConfig) -> list[ExperimentConfig]:
    """Expand the grid: k_percent x init_scheme x channel_multiplier.

    Cells keep the base seeds (paired-seed comparisons are the point of
    the sweep); isolation comes from each cell owning its generators.
    """
    axes = config.sweep or {}
    ks = axes.get("k_percent") or [config.mask.k_percent]
    schemes = axes.get("init_scheme") or [config.init_scheme]
    mults = axes.get("channel_multiplier") or [config.generator.channel_multiplier]
    cells = []
    for i, (k, scheme, mult) in enumerate(itertools.product(ks, schemes, mults)):
        name = f"cell_{i:03d}_k{k:g}_{scheme}_n{mult:g}"
        cells.append(replace(
            config,
            experiment="find_slt",
            mask=replace(config.mask, k_percent=float(k)),
            init_scheme=scheme,
            generator=replace(config.generator, channel_multiplier=float(mult)),
            sweep=None,
            out_dir=os.path.join(config.out_dir, name),
        ))
    return cells


def _run_cell(cell: ExperimentConfig) -> dict:
    return run_find_slt(cell)


def run_sweep(config: ExperimentConfig) -> dict:
    """Run every grid cell, then aggregate final rows in grid order."""
    if not config.out_dir:
        raise ValueError("run: config.out_dir is required")
    cells = sweep_cells(config)
    workers = int(os.environ.get("SLTGEN_WORKERS", "1"))
    results: list[dict | None] = [None] * len(cells)
    failures: list[tuple[int, str]] = []

    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_cell, cell) for cell in cells]
            for i, future in enumerate(futures):
                try:
                    results[i] = future.result()
                except Exception as err:  # noqa: BLE001 - cell isolation
                    failures.append((i, f"{type(err).__name__}: {err}"))
    else:
        for i, cell in enumerate(cells):
            try:
                results[i] = _run_cell(cell)
            except Exception as err:  # noqa: BLE001 - cell isolation
                failures.append((i, f"{type(err).__name__}: {err}"))

    rows = [r["final"] for r in results if r is not None]
    _write_csv(os.path.join(config.out_dir, "sweep.csv"), rows)
    if failures:
        lines = ["cell,error"]
        lines += [f"{i},{msg.replace(',', ';')}" for i, msg in failures]
        with open(os.path.join(config.out_dir, "failures.csv"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    return {"out_dir": config.out_dir, "cells": [c.out_dir for c in cells],
            "rows": rows, "failures": failures,
            "csv": os.path.join(config.out_dir, "sweep.csv")}


RUNNERS = {
    "train_dense": run_train_dense,
    "find_slt": run_find_slt,
    "prune_pretrained": run_prune_pretrained,
    "finetune": run_finetune,
    "eval": run_eval,
    "generate": run_generate,
    "gen_data": run_gen_data,
    "sweep": run_sweep,
}


def run_experiment(config: ExperimentConfig) -> dict:
    return RUNNERS[config.experiment](config)
