"""Score-driven top-k masking of frozen weights.

Every dense or conv parameter tensor (weights and biases alike) is a
`PrunableParam`: a frozen value array `theta`, a learned score array of
the same shape, and a binary mask.  A `MaskPolicy` turns scores into
masks by keeping the largest-magnitude fraction, either per tensor or
across the whole network.  Searching never touches `theta`; fine-tuning
never touches scores or masks.

The score update treats the mask as a straight-through pass: the
gradient of the loss with respect to a score equals the gradient with
respect to that entry's effective weight (exactly what backprop reports
for `theta * mask` as a leaf) multiplied by the frozen weight value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .optim import AdamState, adam_step
from .tensor import Tensor


class NumericalAbort(RuntimeError):
    """A training loss became non-finite; the run cannot continue."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class PrunableParam:
    """One maskable parameter tensor of a generator."""

    layer_id: str
    theta: np.ndarray
    fan_in: int
    fan_out: int
    scores: np.ndarray | None = None
    mask: np.ndarray = None  # uint8, same shape as theta
    freeze_layer: bool = False

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.theta.shape, dtype=np.uint8)

    @property
    def size(self) -> int:
        return self.theta.size

    def effective(self) -> np.ndarray:
        return self.theta * self.mask


@dataclass(frozen=True)
class MaskPolicy:
    """How scores become masks.

    k_percent is the kept fraction in percent, in (0, 100].  Scope
    `per_layer` ranks within each tensor and keeps
    max(1, round(k/100 * size)) entries; `global` ranks all non-frozen
    tensors together and keeps round(k/100 * total).  Mode
    `random_baseline` ignores scores and samples the same keep counts
    uniformly from `seed`.  Layers named in `frozen_layers` stay fully
    dense and are excluded from both the keep-count basis and the
    ranking.
    """

    k_percent: float
    scope: str = "per_layer"
    mode: str = "edge_popup"
    frozen_layers: frozenset = frozenset()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "k_percent", float(self.k_percent))
        if not 0.0 < self.k_percent <= 100.0:
            raise ValueError(f"MaskPolicy: k_percent must be in (0, 100], got {self.k_percent}")
        if self.scope not in ("per_layer", "global"):
            raise ValueError(f"MaskPolicy: unknown scope {self.scope!r}")
        if self.mode not in ("edge_popup", "random_baseline"):
            raise ValueError(f"MaskPolicy: unknown mode {self.mode!r}")
        object.__setattr__(self, "frozen_layers", frozenset(self.frozen_layers))


def keep_count(k_percent: float, size: int) -> int:
    """Per-layer keep count: max(1, round(k/100 * size)), round half up."""
    return max(1, _round_half_up(k_percent / 100.0 * size))


def global_keep_count(k_percent: float, total: int) -> int:
    """Network-wide keep count over the non-frozen tensors."""
    return _round_half_up(k_percent / 100.0 * total)


def init_scores(param: PrunableParam, rng: np.random.Generator) -> None:
    """Draw scores i.i.d. uniform in [-b, b] with b = sqrt(6 / fan_in)."""
    if param.scores is not None:
        raise ValueError(f"init_scores: scores already set for {param.layer_id}")
    bound = math.sqrt(6.0 / param.fan_in)
    param.scores = rng.uniform(-bound, bound, size=param.theta.shape)


def init_all_scores(params: list[PrunableParam], seed: int) -> None:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for p in params:
        init_scores(p, rng)


def _topk_mask_flat(magnitudes: np.ndarray, keep: int) -> np.ndarray:
    """Mask of the `keep` largest entries; ties go to the lower flat index."""
    n = magnitudes.size
    mask = np.zeros(n, dtype=np.uint8)
    if keep >= n:
        mask[:] = 1
        return mask
    if keep <= 0:
        return mask
    threshold = np.partition(magnitudes, n - keep)[n - keep]
    mask[magnitudes > threshold] = 1
    short = keep - int(mask.sum())
    if short > 0:
        at_threshold = np.flatnonzero(magnitudes == threshold)
        mask[at_threshold[:short]] = 1
    return mask


def select_mask(params: list[PrunableParam], policy: MaskPolicy) -> dict[str, np.ndarray]:
    """Assign masks on all params per the policy; returns them by layer id.

    Deterministic given scores and policy: strictly rank-based in
    edge_popup mode (scaling all scores by a positive constant changes
    nothing), and a fixed uniform draw from the policy seed in
    random_baseline mode.
    """
    frozen = [p for p in params if p.layer_id in policy.frozen_layers]
    active = [p for p in params if p.layer_id not in policy.frozen_layers]
    for p in frozen:
        p.freeze_layer = True
        p.mask = np.ones(p.theta.shape, dtype=np.uint8)
    for p in active:
        p.freeze_layer = False
        if policy.mode == "edge_popup" and p.scores is None:
            raise ValueError(f"select_mask: no scores on {p.layer_id}")

    if policy.mode == "random_baseline":
        rng = np.random.default_rng(np.random.SeedSequence(policy.seed))
        if policy.scope == "per_layer":
            for p in active:
                keep = keep_count(policy.k_percent, p.size)
                flat = np.zeros(p.size, dtype=np.uint8)
                flat[rng.choice(p.size, size=keep, replace=False)] = 1
                p.mask = flat.reshape(p.theta.shape)
        else:
            total = sum(p.size for p in active)
            keep = min(global_keep_count(policy.k_percent, total), total)
            flat = np.zeros(total, dtype=np.uint8)
            flat[rng.choice(total, size=keep, replace=False)] = 1
            _scatter_global(active, flat)
    elif policy.scope == "per_layer":
        for p in active:
            keep = keep_count(policy.k_percent, p.size)
            p.mask = _topk_mask_flat(np.abs(p.scores.reshape(-1)), keep).reshape(p.theta.shape)
    else:
        total = sum(p.size for p in active)
        keep = min(global_keep_count(policy.k_percent, total), total)
        magnitudes = np.concatenate([np.abs(p.scores.reshape(-1)) for p in active])
        _scatter_global(active, _topk_mask_flat(magnitudes, keep))
    return {p.layer_id: p.mask for p in params}


def _scatter_global(active: list[PrunableParam], flat: np.ndarray) -> None:
    offset = 0
    for p in active:
        p.mask = flat[offset:offset + p.size].reshape(p.theta.shape).copy()
        offset += p.size


def masked_forward(generator, latent_batch: np.ndarray, record: bool = False,
                   train_bn: bool = False):
    """Forward the generator through `theta * mask` effective weights.

    With all-ones masks this is bit-identical to the dense forward: the
    multiply by 1.0 is exact.  With `record=True` the returned record
    maps each layer id to its effective-weight leaf so callers can read
    gradients after backward.
    """
    return generator.forward(latent_batch, record=record, train_bn=train_bn)


def score_gradient(record, params: list[PrunableParam]) -> dict[str, np.ndarray]:
    """Straight-through score gradients after a backward pass.

    d(loss)/d(score) = d(loss)/d(effective weight) * theta, where the
    effective-weight gradient is taken as if the mask were the identity
    on that edge.  Downstream masking still shapes the loss gradient
    arriving at the layer, which is the intended semantics.
    """
    out = {}
    for p in params:
        leaf = record.leaves[p.layer_id]
        out[p.layer_id] = leaf.grad_or_zeros() * p.theta
    return out


def weight_state_hash(params: list[PrunableParam], bn_params=()) -> str:
    """Hash of all frozen values, used to prove searching never edits them."""
    import hashlib
    digest = hashlib.sha256()
    for p in params:
        digest.update(p.theta.tobytes())
    for bn in bn_params:
        digest.update(bn.gamma.tobytes())
        digest.update(bn.beta.tobytes())
    return digest.hexdigest()


def score_state_hash(params: list[PrunableParam]) -> str:
    """Hash of scores and masks, used to prove fine-tuning never edits them."""
    import hashlib
    digest = hashlib.sha256()
    for p in params:
        if p.scores is not None:
            digest.update(p.scores.tobytes())
        digest.update(np.ascontiguousarray(p.mask).tobytes())
    return digest.hexdigest()


def _compute_loss(generator, extractor, bank, real_batch, latent_batch,
                  loss_kind, kernel_bandwidths, record, train_bn=False):
    from .mmd import feature_matching_loss, kernel_mmd_loss

    real_taps = [t.data for t in extractor.extract(real_batch)]
    bank.update_real_moments(real_taps)
    out, rec = generator.forward(latent_batch, record=record, train_bn=train_bn)
    fake_taps = extractor.extract(out)
    if loss_kind == "feature_matching":
        loss = feature_matching_loss(bank, fake_taps)
    elif loss_kind == "kernel_mmd":
        loss = kernel_mmd_loss(np.concatenate(real_taps, axis=1), fake_taps,
                               kernel_bandwidths)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericalAbort(f"loss became non-finite ({value}) during a step")
    return loss, value, rec


def _require_finite(named_grads) -> None:
    for name, grad in named_grads:
        if not np.isfinite(grad).all():
            raise NumericalAbort(f"gradient for {name} became non-finite")


def slt_search_step(generator, extractor, bank, policy: MaskPolicy,
                    opt: dict[str, AdamState], lr: float,
                    real_batch: np.ndarray, latent_batch: np.ndarray,
                    loss_kind: str = "feature_matching",
                    kernel_bandwidths=None) -> float:
    """One search cycle: select masks, forward, loss, backward, score update.

    Weights are never written; only scores move.  Also folds the current
    real batch into the running moment estimates before computing the
    loss, so the target statistics track the data stream.
    """
    select_mask(generator.params, policy)
    loss, value, rec = _compute_loss(generator, extractor, bank, real_batch,
                                     latent_batch, loss_kind, kernel_bandwidths,
                                     record=True)
    loss.backward()
    grads = score_gradient(rec, generator.params)
    _require_finite(grads.items())  # all-or-nothing: no partial update on abort
    for p in generator.params:
        adam_step(opt[p.layer_id], p.scores, grads[p.layer_id], lr)
    return value


def finetune_step(generator, extractor, bank, opt: dict[str, AdamState], lr: float,
                  real_batch: np.ndarray, latent_batch: np.ndarray,
                  loss_kind: str = "feature_matching", kernel_bandwidths=None,
                  train_bn: bool = False) -> float:
    """One weight-training cycle under a fixed mask.

    Gradients reach only surviving entries (the mask multiplies the
    weight gradient), so masked weights are bit-identical afterwards and
    scores/masks are never touched.  With `train_bn=True` the batchnorm
    affine parameters train as well; dense training uses that switch
    with all-ones masks.
    """
    loss, value, rec = _compute_loss(generator, extractor, bank, real_batch,
                                     latent_batch, loss_kind, kernel_bandwidths,
                                     record=True, train_bn=train_bn)
    loss.backward()
    grads = {p.layer_id: rec.leaves[p.layer_id].grad_or_zeros() * p.mask
             for p in generator.params}
    if train_bn:
        for bn in generator.bn_params:
            grads[bn.name + ".gamma"] = rec.leaves[bn.name + ".gamma"].grad_or_zeros()
            grads[bn.name + ".beta"] = rec.leaves[bn.name + ".beta"].grad_or_zeros()
    _require_finite(grads.items())  # all-or-nothing: no partial update on abort
    for p in generator.params:
        adam_step(opt[p.layer_id], p.theta, grads[p.layer_id], lr)
    if train_bn:
        for bn in generator.bn_params:
            adam_step(opt[bn.name + ".gamma"], bn.gamma, grads[bn.name + ".gamma"], lr)
            adam_step(opt[bn.name + ".beta"], bn.beta, grads[bn.name + ".beta"], lr)
    return value
