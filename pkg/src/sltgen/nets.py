"""Generator architectures, weight initialisers and frozen feature extractors.

Two generator families cover the desk-scale experiments: a plain MLP for
2-D point clouds (identity output) or tiny rasters (tanh output), and a
residual upsampling stack for images.  Both compile to the engine's
operator set and expose every dense/conv weight and bias as a
`PrunableParam`, so the same network object serves dense training, mask
search and fine-tuning.

Feature extractors are built once from their own seed and never trained.
A conv stack serves image inputs, a random-projection ReLU stack serves
point inputs, and an identity variant passes raw samples through for
tests and evaluation on 2-D data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .prune import PrunableParam
from .tensor import (
    Tensor,
    add,
    batchnorm,
    conv2d,
    matmul,
    relu,
    reshape,
    tanh,
    upsample_nearest2x,
)

INIT_SCHEMES = ("kaiming_normal", "signed_kaiming_constant", "xavier_uniform")


def init_weights(shape, fan_in: int, fan_out: int, scheme: str,
                 rng: np.random.Generator) -> np.ndarray:
    """Draw one parameter tensor.

    kaiming_normal:          N(0, 2/fan_in), i.e. std sqrt(2/fan_in)
    signed_kaiming_constant: +-sqrt(2/fan_in), each sign with prob 1/2
    xavier_uniform:          U(-b, b) with b = sqrt(6/(fan_in+fan_out))
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"init_weights: bad fan_in={fan_in} fan_out={fan_out}")
    if scheme == "kaiming_normal":
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    if scheme == "signed_kaiming_constant":
        sigma = math.sqrt(2.0 / fan_in)
        signs = rng.integers(0, 2, size=shape) * 2 - 1
        return sigma * signs.astype(np.float64)
    if scheme == "xavier_uniform":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    raise ValueError(f"init_weights: unknown scheme {scheme!r}")


def scale_dim(base: int, multiplier: float) -> int:
    """Width/channel scaling: round half up, floor at 1."""
    return max(1, int(math.floor(base * multiplier + 0.5)))


@dataclass(frozen=True)
class GeneratorSpec:
    """Architecture description; see `build_generator`.

    `channel_multiplier` scales every hidden width (mlp) or channel
    count (resnet).  The resnet output must be square with side
    base_resolution * 2^num_blocks for an integral number of blocks.
    """

    kind: str
    latent_dim: int
    output_shape: tuple
    channel_multiplier: float = 1.0
    hidden_layers: int = 3
    base_width: int = 128
    base_channels: int = 32
    base_resolution: int = 4

    def __post_init__(self):
        object.__setattr__(self, "output_shape", tuple(int(d) for d in self.output_shape))
        object.__setattr__(self, "channel_multiplier", float(self.channel_multiplier))
        if self.kind not in ("mlp", "resnet"):
            raise ValueError(f"GeneratorSpec: unknown kind {self.kind!r}")
        if self.latent_dim < 1:
            raise ValueError("GeneratorSpec: latent_dim must be >= 1")
        if self.channel_multiplier <= 0:
            raise ValueError("GeneratorSpec: channel_multiplier must be > 0")
        if len(self.output_shape) not in (1, 3) or any(d < 1 for d in self.output_shape):
            raise ValueError(f"GeneratorSpec: bad output_shape {self.output_shape}")
        if self.kind == "mlp":
            if self.hidden_layers < 1 or self.base_width < 1:
                raise ValueError("GeneratorSpec: mlp needs hidden_layers >= 1 and base_width >= 1")
        else:
            if len(self.output_shape) != 3:
                raise ValueError("GeneratorSpec: resnet output_shape must be (C, H, W)")
            self.num_blocks  # validates the geometry

    @property
    def num_blocks(self) -> int:
        channels, height, width = self.output_shape
        if height != width:
            raise ValueError("GeneratorSpec: resnet output must be square")
        ratio = height / self.base_resolution
        blocks = int(round(math.log2(ratio))) if ratio >= 2 else 0
        if blocks < 1 or self.base_resolution * 2 ** blocks != height:
            raise ValueError(
                f"GeneratorSpec: output side {height} is not base_resolution "
                f"{self.base_resolution} times a power of two")
        return blocks

    @property
    def hidden_width(self) -> int:
        return scale_dim(self.base_width, self.channel_multiplier)

    @property
    def hidden_channels(self) -> int:
        return scale_dim(self.base_channels, self.channel_multiplier)

    def mlp_dims(self) -> list[int]:
        out_units = int(np.prod(self.output_shape))
        return [self.latent_dim] + [self.hidden_width] * self.hidden_layers + [out_units]

    def parameter_count(self) -> int:
        """Closed-form count of every trainable scalar, batchnorm included."""
        if self.kind == "mlp":
            dims = self.mlp_dims()
            return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        c = self.hidden_channels
        out_c = self.output_shape[0]
        r0 = self.base_resolution
        stem = self.latent_dim * c * r0 * r0 + c * r0 * r0
        per_block = (9 * c * c + c) * 2 + (c * c + c) + 4 * c  # convs + shortcut + two bn pairs
        head = 9 * c * out_c + out_c + 2 * c  # final conv + head bn
        return stem + self.num_blocks * per_block + head


@dataclass
class BNParams:
    name: str
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5


@dataclass
class ForwardRecord:
    """Leaf tensors of one recorded forward, keyed by parameter id."""

    leaves: dict[str, Tensor] = field(default_factory=dict)


class Generator:
    """A built generator: prunable params, batchnorm affine, and forward."""

    def __init__(self, spec: GeneratorSpec, init_scheme: str, seed: int):
        if init_scheme not in INIT_SCHEMES:
            raise ValueError(f"Generator: unknown init scheme {init_scheme!r}")
        self.spec = spec
        self.init_scheme = init_scheme
        self.params: list[PrunableParam] = []
        self.bn_params: list[BNParams] = []
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        if spec.kind == "mlp":
            self._build_mlp(rng)
        else:
            self._build_resnet(rng)

    # -- construction ----------------------------------------------------

    def _add_param(self, layer_id, shape, fan_in, fan_out, rng):
        theta = init_weights(shape, fan_in, fan_out, self.init_scheme, rng)
        param = PrunableParam(layer_id=layer_id, theta=theta,
                              fan_in=fan_in, fan_out=fan_out)
        self.params.append(param)
        return param

    def _add_bn(self, name, channels):
        bn = BNParams(name=name, gamma=np.ones(channels), beta=np.zeros(channels))
        self.bn_params.append(bn)
        return bn

    def _build_mlp(self, rng):
        dims = self.spec.mlp_dims()
        last = len(dims) - 2
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            name = "out" if i == last else f"fc{i}"
            self._add_param(f"{name}.w", (din, dout), din, dout, rng)
            self._add_param(f"{name}.b", (dout,), din, dout, rng)

    def _build_resnet(self, rng):
        spec = self.spec
        c = spec.hidden_channels
        r0 = spec.base_resolution
        out_c = spec.output_shape[0]
        stem_units = c * r0 * r0
        self._add_param("stem.w", (spec.latent_dim, stem_units),
                        spec.latent_dim, stem_units, rng)
        self._add_param("stem.b", (stem_units,), spec.latent_dim, stem_units, rng)
        for b in range(spec.num_blocks):
            self._add_bn(f"block{b}.bn1", c)
            self._add_param(f"block{b}.conv1.w", (c, c, 3, 3), c * 9, c * 9, rng)
            self._add_param(f"block{b}.conv1.b", (c,), c * 9, c * 9, rng)
            self._add_bn(f"block{b}.bn2", c)
            self._add_param(f"block{b}.conv2.w", (c, c, 3, 3), c * 9, c * 9, rng)
            self._add_param(f"block{b}.conv2.b", (c,), c * 9, c * 9, rng)
            self._add_param(f"block{b}.short.w", (c, c, 1, 1), c, c, rng)
            self._add_param(f"block{b}.short.b", (c,), c, c, rng)
        self._add_bn("head.bn", c)
        self._add_param("head.w", (out_c, c, 3, 3), c * 9, out_c * 9, rng)
        self._add_param("head.b", (out_c,), c * 9, out_c * 9, rng)

    # -- forward -----------------------------------------------------------

    def param_map(self) -> dict[str, PrunableParam]:
        return {p.layer_id: p for p in self.params}

    def actual_parameter_count(self) -> int:
        prunable = sum(p.size for p in self.params)
        affine = sum(bn.gamma.size + bn.beta.size for bn in self.bn_params)
        return prunable + affine

    def forward(self, latent_batch: np.ndarray, record: bool = False,
                train_bn: bool = False):
        """Map latents to samples through the masked effective weights.

        Returns (output tensor, ForwardRecord or None).  The record holds
        one leaf per prunable param (its `theta * mask` product) and, when
        `train_bn` is set, the batchnorm affine leaves.
        """
        z = np.asarray(latent_batch, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ValueError(
                f"forward: latent batch must be (N, {self.spec.latent_dim}), got {z.shape}")
        rec = ForwardRecord() if record else None
        leaves = {}
        for p in self.params:
            leaves[p.layer_id] = Tensor(p.effective(), requires_grad=record,
                                        name=p.layer_id)
        bn_leaves = {}
        for bn in self.bn_params:
            bn_grad = record and train_bn
            bn_leaves[bn.name + ".gamma"] = Tensor(bn.gamma, requires_grad=bn_grad)
            bn_leaves[bn.name + ".beta"] = Tensor(bn.beta, requires_grad=bn_grad)
        if rec is not None:
            rec.leaves.update(leaves)
            if train_bn:
                rec.leaves.update(bn_leaves)

        h = Tensor(z)
        if self.spec.kind == "mlp":
            out = self._forward_mlp(h, leaves)
        else:
            out = self._forward_resnet(h, leaves, bn_leaves)
        return out, rec

    def _forward_mlp(self, h, leaves):
        dims = self.spec.mlp_dims()
        last = len(dims) - 2
        for i in range(len(dims) - 1):
            name = "out" if i == last else f"fc{i}"
            h = add(matmul(h, leaves[f"{name}.w"]), leaves[f"{name}.b"])
            if i != last:
                h = relu(h)
        if len(self.spec.output_shape) == 3:
            h = tanh(h)
            h = reshape(h, (h.shape[0],) + self.spec.output_shape)
        return h

    def _forward_resnet(self, h, leaves, bn_leaves):
        spec = self.spec
        c = spec.hidden_channels
        r0 = spec.base_resolution

        def bn(x, name, bnp):
            return batchnorm(x, bn_leaves[name + ".gamma"], bn_leaves[name + ".beta"],
                             eps=bnp.eps)

        bn_map = {b.name: b for b in self.bn_params}
        h = add(matmul(h, leaves["stem.w"]), leaves["stem.b"])
        h = reshape(h, (h.shape[0], c, r0, r0))
        for b in range(spec.num_blocks):
            pre = f"block{b}"
            main = relu(bn(h, f"{pre}.bn1", bn_map[f"{pre}.bn1"]))
            main = upsample_nearest2x(main)
            main = add(conv2d(main, leaves[f"{pre}.conv1.w"], stride=1, padding=1),
                       leaves[f"{pre}.conv1.b"])
            main = relu(bn(main, f"{pre}.bn2", bn_map[f"{pre}.bn2"]))
            main = add(conv2d(main, leaves[f"{pre}.conv2.w"], stride=1, padding=1),
                       leaves[f"{pre}.conv2.b"])
            short = upsample_nearest2x(h)
            short = add(conv2d(short, leaves[f"{pre}.short.w"], stride=1, padding=0),
                        leaves[f"{pre}.short.b"])
            h = add(main, short)
        h = relu(bn(h, "head.bn", bn_map["head.bn"]))
        h = add(conv2d(h, leaves["head.w"], stride=1, padding=1), leaves["head.b"])
        return tanh(h)


def build_generator(spec: GeneratorSpec, init_scheme: str, seed: int) -> Generator:
    """Compile a spec into a generator with freshly initialised weights."""
    return Generator(spec, init_scheme, seed)


# -- feature extractors ---------------------------------------------------


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """A frozen random feature map.

    kind "conv" stacks 3x3/4x4 conv+ReLU layers for image input, "dense"
    stacks random projections with ReLU for point input, and "identity"
    exposes the flattened input as its single tap.  `tap_layers` selects
    which post-ReLU activations are exposed.  Extractors never train.
    """

    kind: str = "conv"
    channels: tuple = (16, 32, 64, 64)
    tap_layers: tuple = (0, 1, 2, 3)
    seed: int = 0
    bias_scale: float = 0.0
    frozen: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
        object.__setattr__(self, "bias_scale", float(self.bias_scale))
        if self.kind not in ("conv", "dense", "identity"):
            raise ValueError(f"FeatureExtractorSpec: unknown kind {self.kind!r}")
        if not self.frozen:
            raise ValueError("FeatureExtractorSpec: extractors are always frozen")
        if self.kind == "identity":
            if self.channels or self.tap_layers != (0,):
                raise ValueError(
                    "FeatureExtractorSpec: identity takes channels=() and tap_layers=(0,)")
            return
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError("FeatureExtractorSpec: channels must be positive")
        if not self.tap_layers:
            raise ValueError("FeatureExtractorSpec: need at least one tap")
        if list(self.tap_layers) != sorted(set(self.tap_layers)):
            raise ValueError("FeatureExtractorSpec: tap_layers must be strictly increasing")
        if self.tap_layers[-1] >= len(self.channels):
            raise ValueError("FeatureExtractorSpec: tap index beyond last layer")


class FeatureExtractor:
    """Built extractor; weights are materialised on the first input seen.

    The input shape is locked after the first call so one instance cannot
    silently mix feature spaces.  Two instances with the same spec produce
    bit-identical taps.
    """

    def __init__(self, spec: FeatureExtractorSpec):
        self.spec = spec
        self._weights: list[Tensor] | None = None
        self._biases: list[Tensor | None] | None = None
        self._input_shape: tuple | None = None

    def _build(self, sample_shape: tuple) -> None:
        spec = self.spec
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        weights, biases = [], []
        if spec.kind == "conv":
            if len(sample_shape) != 3:
                raise ValueError(
                    f"FeatureExtractor: conv kind expects (C, H, W) samples, got {sample_shape}")
            cin = sample_shape[0]
            for i, cout in enumerate(spec.channels):
                k = 3 if i == 0 else 4
                fan_in = cin * k * k
                weights.append(Tensor(init_weights((cout, cin, k, k), fan_in,
                                                   cout * k * k, "kaiming_normal", rng)))
                biases.append(self._bias(cout, rng))
                cin = cout
        elif spec.kind == "dense":
            if len(sample_shape) != 1:
                raise ValueError(
                    f"FeatureExtractor: dense kind expects flat samples, got {sample_shape}")
            din = sample_shape[0]
            for dout in spec.channels:
                weights.append(Tensor(init_weights((din, dout), din, dout,
                                                   "kaiming_normal", rng)))
                biases.append(self._bias(dout, rng))
                din = dout
        self._weights = weights
        self._biases = biases
        self._input_shape = tuple(sample_shape)

    def _bias(self, width, rng):
        if self.spec.bias_scale > 0.0:
            return Tensor(rng.normal(0.0, self.spec.bias_scale, size=width))
        return None

    def extract(self, batch) -> list[Tensor]:
        """Per-sample flattened taps, one (N, width) tensor per tap layer.

        Gradients flow to the input only; the weights are constant leaves,
        so no gradient for them is ever materialised.
        """
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.data.ndim < 2:
            raise ValueError(f"extract: batch must have a leading sample axis, got {x.shape}")
        sample_shape = x.data.shape[1:]
        if self.spec.kind == "identity":
            return [reshape(x, (x.shape[0], -1)) if x.data.ndim != 2 else x]
        if self._input_shape is None:
            self._build(sample_shape)
        elif sample_shape != self._input_shape:
            raise ValueError(
                f"extract: input shape {sample_shape} does not match the shape "
                f"this extractor was built for {self._input_shape}")
        taps = []
        h = x
        for i, w in enumerate(self._weights):
            if self.spec.kind == "conv":
                stride = 1 if i == 0 else 2
                h = conv2d(h, w, stride=stride, padding=1)
            else:
                h = matmul(h, w)
            if self._biases[i] is not None:
                h = add(h, self._biases[i])
            h = relu(h)
            if i in self.spec.tap_layers:
                flat = reshape(h, (h.shape[0], -1)) if h.data.ndim != 2 else h
                taps.append(flat)
        return taps

    def tap_widths(self, sample_shape: tuple) -> list[int]:
        """Flattened width of each tap for a given per-sample shape."""
        if self.spec.kind == "identity":
            return [int(np.prod(sample_shape))]
        probe = np.zeros((1,) + tuple(sample_shape))
        return [t.shape[1] for t in self.extract(probe)]


def build_feature_extractor(spec: FeatureExtractorSpec) -> FeatureExtractor:
    return FeatureExtractor(spec)


def extract_features(extractor: FeatureExtractor, batch) -> list[Tensor]:
    """Functional alias for `FeatureExtractor.extract`."""
    return extractor.extract(batch)
