"""Experiment configuration.

A config file is one YAML mapping.  Parsing is strict: unknown keys at
any level are errors, so typos cannot silently fall back to defaults.
`--override a.b=value` edits the tree before type checking, and
`--seed S` expands to the four explicit streams (weights S, scores S+1,
data S+2, eval S+3).  Every run records the sha256 of its canonical
JSON form (out_dir excluded, so moving a run does not change identity).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import json

import yaml

from .data import DatasetSpec
from .nets import FeatureExtractorSpec, GeneratorSpec, INIT_SCHEMES
from .prune import MaskPolicy


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


EXPERIMENTS = ("train_dense", "find_slt", "prune_pretrained", "finetune",
               "sweep", "eval", "generate", "gen_data")
_NEEDS_CHECKPOINT = ("prune_pretrained", "finetune", "eval", "generate")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 5e-5
    beta1: float = 0.5
    beta2: float = 0.999
    lr_min: float = 0.0
    cosine: bool = True

    def __post_init__(self):
        # YAML reads bare scientific notation (5e-5) as a string; coerce
        for name in ("lr", "beta1", "beta2", "lr_min"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.lr <= 0 or self.lr_min < 0 or self.lr < self.lr_min:
            raise ConfigError(f"optimizer: bad lr range ({self.lr}, {self.lr_min})")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("optimizer: betas must lie in [0, 1)")


@dataclass(frozen=True)
class EmaConfig:
    beta1: float = 1e-5
    beta2: float = 0.999
    lr: float = 1e-3

    def __post_init__(self):
        for name in ("beta1", "beta2", "lr"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.lr <= 0:
            raise ConfigError("ema: lr must be positive")


@dataclass(frozen=True)
class Seeds:
    weights: int
    scores: int
    data: int
    eval: int


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    generator: GeneratorSpec
    dataset: DatasetSpec
    extractor: FeatureExtractorSpec
    eval_extractor: FeatureExtractorSpec
    mask: MaskPolicy
    seeds: Seeds
    init_scheme: str
    loss: str = "feature_matching"
    optimizer: OptimizerConfig = OptimizerConfig()
    ema: EmaConfig = EmaConfig()
    batch_size: int = 64
    total_steps: int = 0
    eval_every: int = 1000
    eval_samples: int = 2048
    knn_k: int = 3
    sample_count: int = 256
    render_size: int = 0
    train_bn: bool = False
    checkpoint_in: str | None = None
    mask_in: str | None = None
    sweep: dict | None = None
    out_dir: str | None = None

    def canonical_dict(self) -> dict:
        """Plain nested dict of everything that defines the run's identity."""
        gen = self.generator
        ext = self.extractor
        eext = self.eval_extractor
        ds = self.dataset
        mask = self.mask
        return {
            "experiment": self.experiment,
            "generator": {
                "kind": gen.kind, "latent_dim": gen.latent_dim,
                "output_shape": list(gen.output_shape),
                "channel_multiplier": gen.channel_multiplier,
                "hidden_layers": gen.hidden_layers, "base_width": gen.base_width,
                "base_channels": gen.base_channels,
                "base_resolution": gen.base_resolution,
            },
            "extractor": _extractor_dict(ext),
            "eval_extractor": _extractor_dict(eext),
            "dataset": {
                "kind": ds.kind, "modes": ds.modes, "scale": ds.scale,
                "idx_path": ds.idx_path, "normalize": ds.normalize,
            },
            "mask": {
                "k_percent": mask.k_percent, "scope": mask.scope, "mode": mask.mode,
                "frozen_layers": sorted(mask.frozen_layers), "seed": mask.seed,
            },
            "seeds": {"weights": self.seeds.weights, "scores": self.seeds.scores,
                      "data": self.seeds.data, "eval": self.seeds.eval},
            "init_scheme": self.init_scheme,
            "loss": self.loss,
            "optimizer": {"lr": self.optimizer.lr, "beta1": self.optimizer.beta1,
                          "beta2": self.optimizer.beta2, "lr_min": self.optimizer.lr_min,
                          "cosine": self.optimizer.cosine},
            "ema": {"beta1": self.ema.beta1, "beta2": self.ema.beta2, "lr": self.ema.lr},
            "batch_size": self.batch_size,
            "total_steps": self.total_steps,
            "eval_every": self.eval_every,
            "eval_samples": self.eval_samples,
            "knn_k": self.knn_k,
            "sample_count": self.sample_count,
            "render_size": self.render_size,
            "train_bn": self.train_bn,
            "checkpoint_in": self.checkpoint_in,
            "mask_in": self.mask_in,
            "sweep": self.sweep,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical_dict(), sort_keys=True,
                          separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _extractor_dict(spec: FeatureExtractorSpec) -> dict:
    return {"kind": spec.kind, "channels": list(spec.channels),
            "tap_layers": list(spec.tap_layers), "seed": spec.seed,
            "bias_scale": spec.bias_scale}


# -- tree handling -----------------------------------------------------------


def load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            tree = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"config is not valid YAML: {err}") from err
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    return tree


def apply_overrides(tree: dict, overrides) -> dict:
    """Apply repeatable `a.b.c=value` edits; values parse as YAML scalars."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, raw = item.split("=", 1)
        keys = [k for k in path.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key path")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as err:
            raise ConfigError(f"override value {raw!r} is not valid YAML: {err}") from err
        node = tree
        for key in keys[:-1]:
            child = node.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {path!r} descends into non-mapping {key!r}")
            node = child
        node[keys[-1]] = value
    return tree


def expand_seed(tree: dict, seed: int) -> dict:
    tree["seeds"] = {"weights": int(seed), "scores": int(seed) + 1,
                     "data": int(seed) + 2, "eval": int(seed) + 3}
    return tree


def _section(tree: dict, name: str, allowed: tuple, required: tuple = ()) -> dict:
    raw = tree.get(name) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be a mapping")
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key {name}.{key}")
    for key in required:
        if key not in raw:
            raise ConfigError(f"missing required key {name}.{key}")
    return raw


def _build(section: str, factory, kwargs: dict):
    try:
        return factory(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{section}: {err}") from err


def build_config(tree: dict, experiment: str) -> ExperimentConfig:
    """Validate the whole tree and produce the typed config."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    top_allowed = ("experiment", "out_dir", "generator", "extractor",
                   "eval_extractor", "dataset", "mask", "init_scheme", "loss",
                   "optimizer", "ema", "seeds", "batch_size", "total_steps",
                   "eval_every", "eval_samples", "knn_k", "sample_count",
                   "render_size", "train_bn", "checkpoint_in", "mask_in", "sweep")
    for key in tree:
        if key not in top_allowed:
            raise ConfigError(f"unknown key {key}")
    stated = tree.get("experiment")
    if stated is not None and stated != experiment:
        raise ConfigError(
            f"config says experiment {stated!r} but the command runs {experiment!r}")

    gen_keys = ("kind", "latent_dim", "output_shape", "channel_multiplier",
                "hidden_layers", "base_width", "base_channels", "base_resolution")
    if experiment == "gen_data" and "generator" not in tree:
        generator = GeneratorSpec(kind="mlp", latent_dim=16, output_shape=(2,))
    else:
        gen_raw = _section(tree, "generator", gen_keys,
                           required=("kind", "latent_dim", "output_shape"))
        generator = _build("generator", GeneratorSpec,
                           {**gen_raw, "output_shape": tuple(gen_raw["output_shape"])})

    ds_keys = ("kind", "modes", "scale", "idx_path", "normalize")
    if experiment == "generate" and "dataset" not in tree:
        dataset = DatasetSpec(kind="gaussian_ring")
    else:
        dataset = _build("dataset", DatasetSpec,
                         _section(tree, "dataset", ds_keys, required=("kind",)))

    extractor = _extractor_from(tree, "extractor", generator, for_search=True)
    eval_extractor = _extractor_from(tree, "eval_extractor", generator,
                                     for_search=False)

    seeds_raw = _section(tree, "seeds", ("weights", "scores", "data", "eval"),
                         required=("weights", "scores", "data", "eval"))
    seeds = Seeds(**{k: int(v) for k, v in seeds_raw.items()})

    mask_raw = dict(_section(tree, "mask",
                             ("k_percent", "scope", "mode", "frozen_layers", "seed")))
    mask_raw.setdefault("k_percent", 100.0)
    mask_raw.setdefault("seed", seeds.scores)
    mask_raw["frozen_layers"] = frozenset(mask_raw.get("frozen_layers") or ())
    mask = _build("mask", MaskPolicy, mask_raw)

    opt_raw = _section(tree, "optimizer", ("lr", "beta1", "beta2", "lr_min", "cosine"))
    optimizer = _build("optimizer", OptimizerConfig, opt_raw)
    ema_raw = _section(tree, "ema", ("beta1", "beta2", "lr"))
    ema = _build("ema", EmaConfig, ema_raw)

    init_scheme = tree.get("init_scheme")
    if init_scheme is None:
        init_scheme = "xavier_uniform" if experiment == "train_dense" \
            else "signed_kaiming_constant"
    if init_scheme not in INIT_SCHEMES:
        raise ConfigError(f"init_scheme must be one of {INIT_SCHEMES}")

    loss = tree.get("loss", "feature_matching")
    if loss not in ("feature_matching", "kernel_mmd"):
        raise ConfigError("loss must be feature_matching or kernel_mmd")

    train_bn = tree.get("train_bn")
    if train_bn is None:
        train_bn = experiment in ("train_dense", "finetune")

    sweep = tree.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict):
            raise ConfigError("sweep must be a mapping of axis lists")
        for key in sweep:
            if key not in ("k_percent", "init_scheme", "channel_multiplier"):
                raise ConfigError(f"unknown key sweep.{key}")
        sweep = {k: list(v) for k, v in sweep.items()}
    elif experiment == "sweep":
        raise ConfigError("sweep runs need a sweep section")

    config = ExperimentConfig(
        experiment=experiment,
        generator=generator,
        dataset=dataset,
        extractor=extractor,
        eval_extractor=eval_extractor,
        mask=mask,
        seeds=seeds,
        init_scheme=init_scheme,
        loss=loss,
        optimizer=optimizer,
        ema=ema,
        batch_size=int(tree.get("batch_size", 64)),
        total_steps=int(tree.get("total_steps", 0)),
        eval_every=int(tree.get("eval_every", 1000)),
        eval_samples=int(tree.get("eval_samples", 2048)),
        knn_k=int(tree.get("knn_k", 3)),
        sample_count=int(tree.get("sample_count", 256)),
        render_size=int(tree.get("render_size", 0)),
        train_bn=bool(train_bn),
        checkpoint_in=tree.get("checkpoint_in"),
        mask_in=tree.get("mask_in"),
        sweep=sweep,
        out_dir=tree.get("out_dir"),
    )
    _validate(config)
    return config


def _extractor_from(tree: dict, name: str, generator: GeneratorSpec,
                    for_search: bool) -> FeatureExtractorSpec:
    raw = tree.get(name)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{name} must be a mapping")
    if raw:
        raw = _section(tree, name,
                       ("kind", "channels", "tap_layers", "seed", "bias_scale"))
        kwargs = dict(raw)
        if "channels" in kwargs:
            kwargs["channels"] = tuple(kwargs["channels"])
        if "tap_layers" in kwargs:
            kwargs["tap_layers"] = tuple(kwargs["tap_layers"])
        return _build(name, FeatureExtractorSpec, kwargs)
    point_data = len(generator.output_shape) == 1
    if not for_search:
        # evaluation features: raw coordinates for 2-D data, a frozen conv
        # stack for images
        if point_data:
            return FeatureExtractorSpec(kind="identity", channels=(), tap_layers=(0,))
        return FeatureExtractorSpec(kind="conv", channels=(16, 32, 64, 64),
                                    tap_layers=(0, 1, 2, 3), seed=0)
    if point_data:
        return FeatureExtractorSpec(kind="dense", channels=(64, 64, 64, 64),
                                    tap_layers=(0, 1, 2, 3), seed=0, bias_scale=1.0)
    return FeatureExtractorSpec(kind="conv", channels=(16, 32, 64, 64),
                                tap_layers=(0, 1, 2, 3), seed=0, bias_scale=1.0)


def _validate(config: ExperimentConfig) -> None:
    if config.batch_size < 2:
        raise ConfigError("batch_size must be >= 2 (population std and batchnorm)")
    if config.total_steps < 0:
        raise ConfigError("total_steps must be >= 0")
    if config.eval_every < 1:
        raise ConfigError("eval_every must be >= 1")
    if config.eval_samples < config.knn_k + 1:
        raise ConfigError("eval_samples must exceed knn_k")
    if config.knn_k < 1:
        raise ConfigError("knn_k must be >= 1")
    if config.sample_count < 1:
        raise ConfigError("sample_count must be >= 1")
    if config.experiment in _NEEDS_CHECKPOINT and not config.checkpoint_in:
        raise ConfigError(f"{config.experiment} needs checkpoint_in")
    image_data = config.dataset.kind == "image_idx"
    image_model = len(config.generator.output_shape) == 3
    if config.experiment not in ("gen_data", "generate") and image_data != image_model:
        raise ConfigError("generator output and dataset kind disagree "
                          "(points vs images)")


def resolve_config(path: str | None, experiment: str, overrides=(),
                   seed: int | None = None, out_dir: str | None = None,
                   tree: dict | None = None) -> ExperimentConfig:
    """One-stop entry used by the CLI: load, override, expand, build."""
    if tree is None:
        tree = load_config_file(path) if path else {}
    apply_overrides(tree, overrides)
    if seed is not None:
        expand_seed(tree, seed)
    if "seeds" not in tree:
        raise ConfigError("all four seeds must be explicit: give a seeds "
                          "section or pass --seed")
    if out_dir is not None:
        tree["out_dir"] = out_dir
    return build_config(tree, experiment)
