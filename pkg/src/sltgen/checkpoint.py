"""Checkpoint persistence.

A checkpoint is a directory:

    manifest.json   format version, config hash, step, tensor listing
    config.json     canonical config dict of the run that wrote it
    <name>.bin      one raw file per tensor ('/' in names becomes '__')

Float tensors (roles weight, score, moment) are little-endian float32 in
C order; masks are bit-packed little-endian, one bit per entry.  Every
manifest entry carries shape, role and exact byte length, and loading
verifies all three, so a truncated or mislabeled file fails loudly.
Save -> load -> save reproduces every byte: float32 values survive the
float64 round trip exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import math
import os

import numpy as np

FORMAT_VERSION = 1
ROLES = ("weight", "score", "mask", "moment")


class CheckpointError(ValueError):
    """Missing, malformed or mismatched checkpoint contents."""


def _file_name(name: str) -> str:
    return name.replace("/", "__") + ".bin"


@dataclass
class Checkpoint:
    step: int
    config_hash: str
    config: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    roles: dict[str, str] = field(default_factory=dict)
    moment_steps: list = field(default_factory=list)

    def by_role(self, role: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if self.roles[k] == role}


def save_checkpoint(directory: str, *, step: int, config_hash: str, config: dict,
                    tensors: dict, moment_steps=()) -> None:
    """Write a checkpoint; `tensors` maps name -> (array, role)."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        array, role = tensors[name]
        if role not in ROLES:
            raise CheckpointError(f"save_checkpoint: unknown role {role!r} for {name}")
        array = np.asarray(array)
        if role == "mask":
            flat = np.ascontiguousarray(array, dtype=np.uint8).reshape(-1)
            if flat.size and flat.max() > 1:
                raise CheckpointError(f"save_checkpoint: mask {name} has non-binary entries")
            payload = np.packbits(flat, bitorder="little").tobytes()
        else:
            payload = np.ascontiguousarray(array, dtype="<f4").tobytes()
        path = os.path.join(directory, _file_name(name))
        with open(path, "wb") as fh:
            fh.write(payload)
        entries.append({"name": name, "role": role, "shape": list(array.shape),
                        "file": _file_name(name), "bytes": len(payload)})
    manifest = {"format_version": FORMAT_VERSION, "config_hash": config_hash,
                "step": int(step), "moment_steps": [int(s) for s in moment_steps],
                "tensors": entries}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(directory, "config.json"), "w") as fh:
        json.dump(config, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(directory: str) -> Checkpoint:
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except OSError as err:
        raise CheckpointError(f"cannot read {manifest_path}: {err}") from err
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{manifest_path} is not valid JSON: {err}") from err
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')!r}")
    try:
        with open(os.path.join(directory, "config.json")) as fh:
            config = json.load(fh)
    except OSError:
        config = {}

    ckpt = Checkpoint(step=int(manifest["step"]),
                      config_hash=manifest["config_hash"], config=config,
                      moment_steps=list(manifest.get("moment_steps", [])))
    for entry in manifest["tensors"]:
        name, role = entry["name"], entry["role"]
        shape = tuple(int(d) for d in entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        path = os.path.join(directory, entry["file"])
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as err:
            raise CheckpointError(f"tensor {name}: missing file {entry['file']}") from err
        if len(blob) != entry["bytes"]:
            raise CheckpointError(
                f"tensor {name}: file is {len(blob)} bytes, manifest says {entry['bytes']}")
        if role == "mask":
            expected = math.ceil(size / 8)
            if len(blob) != expected:
                raise CheckpointError(
                    f"tensor {name}: {len(blob)} bytes cannot hold {size} mask bits")
            bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8),
                                 bitorder="little", count=size)
            array = bits.reshape(shape).astype(np.uint8)
        else:
            if len(blob) != 4 * size:
                raise CheckpointError(
                    f"tensor {name}: {len(blob)} bytes cannot hold {size} float32s")
            array = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(shape)
        ckpt.tensors[name] = array
        ckpt.roles[name] = role
    return ckpt


# -- generator/bank state mapping ---------------------------------------------


def generator_state(generator, bank=None, include_scores: bool = True) -> dict:
    """Collect the savable tensors of a generator (+ optional moment bank)."""
    tensors = {}
    for p in generator.params:
        tensors[p.layer_id] = (p.theta, "weight")
        if include_scores and p.scores is not None:
            tensors[p.layer_id + ".score"] = (p.scores, "score")
        tensors[p.layer_id + ".mask"] = (p.mask, "mask")
    for bn in generator.bn_params:
        tensors[bn.name + ".gamma"] = (bn.gamma, "weight")
        tensors[bn.name + ".beta"] = (bn.beta, "weight")
    if bank is not None:
        for name, array in bank.state_tensors().items():
            tensors[name] = (array, "moment")
    return tensors


def _fetch(ckpt: Checkpoint, name: str, shape: tuple) -> np.ndarray:
    if name not in ckpt.tensors:
        raise CheckpointError(f"checkpoint lacks tensor {name}")
    array = ckpt.tensors[name]
    if array.shape != shape:
        raise CheckpointError(
            f"tensor {name}: checkpoint shape {array.shape} does not match "
            f"the configured architecture {shape}")
    return array


def restore_weights(generator, ckpt: Checkpoint) -> None:
    for p in generator.params:
        p.theta = _fetch(ckpt, p.layer_id, p.theta.shape).copy()
    for bn in generator.bn_params:
        bn.gamma = _fetch(ckpt, bn.name + ".gamma", bn.gamma.shape).copy()
        bn.beta = _fetch(ckpt, bn.name + ".beta", bn.beta.shape).copy()


def restore_masks(generator, ckpt: Checkpoint) -> None:
    for p in generator.params:
        p.mask = _fetch(ckpt, p.layer_id + ".mask", p.mask.shape).copy()


def restore_scores(generator, ckpt: Checkpoint) -> None:
    for p in generator.params:
        p.scores = _fetch(ckpt, p.layer_id + ".score", p.theta.shape).copy()


def restore_moments(bank, ckpt: Checkpoint) -> bool:
    """Load bank state if the checkpoint carries moments; report success."""
    moments = ckpt.by_role("moment")
    if not moments:
        return False
    try:
        bank.load_state(moments, ckpt.moment_steps)
    except KeyError as err:
        raise CheckpointError(f"checkpoint moment set is incomplete: {err}") from err
    return True
