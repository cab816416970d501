"""Quality/uncertainty network: residual bottleneck backbone, bilinear pooling, two-output head.

Both Siamese streams are the same :class:`QualityNet` instance; a pair is
scored by running its two images through one forward pass and comparing the
outputs with :func:`pairwise_probability`.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SIGMA_FLOOR = 1e-6
SIGMA_BIAS_INIT = 0.5413  # softplus(0.5413) ~= 1
HEAD_INIT_SCALE = 1e-2
HEAD_PARAMS = ("head.weight", "head.bias")


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 1
    stem_channels: int = 8
    block_channels: tuple = (16, 16)
    blocks_per_stage: tuple = (1, 1)
    stage_strides: tuple = (1, 2)
    bottleneck_ratio: int = 2
    max_features: int = 4096

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        object.__setattr__(self, "stage_strides", tuple(int(s) for s in self.stage_strides))
        if self.input_channels not in (1, 3):
            raise ValueError(f"input_channels must be 1 or 3, got {self.input_channels}")
        counts = (self.stem_channels, self.bottleneck_ratio, *self.block_channels,
                  *self.blocks_per_stage, *self.stage_strides)
        if min(counts) < 1:
            raise ValueError("all backbone counts must be >= 1")
        n = len(self.block_channels)
        if n == 0 or len(self.blocks_per_stage) != n or len(self.stage_strides) != n:
            raise ValueError("block_channels, blocks_per_stage and stage_strides must have equal nonzero length")
        if self.final_channels ** 2 > self.max_features:
            raise ValueError(f"bilinear feature length {self.final_channels ** 2} exceeds budget {self.max_features}")

    @property
    def final_channels(self):
        return self.block_channels[-1]

    @property
    def total_stride(self):
        return 4 * int(np.prod(self.stage_strides))

    @property
    def min_input_size(self):
        return 2 * self.total_stride

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class QualityOutput:
    f: float
    sigma: float


def _conv_init(rng, out_c, in_c, k, dtype):
    fan_in = in_c * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_c, in_c, k, k)).astype(dtype)


@dataclass
class QualityNet:
    """Parameters and buffers of one network. ``params`` is the single w."""

    config: BackboneConfig
    params: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    dtype: type = np.float32

    @classmethod
    def init(cls, config, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        net = cls(config=config, dtype=dtype)
        net._add_conv(rng, "stem", config.stem_channels, config.input_channels, 3)
        in_c = config.stem_channels
        for si, (out_c, nblocks) in enumerate(zip(config.block_channels, config.blocks_per_stage)):
            mid = max(1, out_c // config.bottleneck_ratio)
            for bi in range(nblocks):
                stride = config.stage_strides[si] if bi == 0 else 1
                p = f"stage{si}.block{bi}"
                net._add_conv(rng, f"{p}.reduce", mid, in_c, 1)
                net._add_conv(rng, f"{p}.conv", mid, mid, 3)
                net._add_conv(rng, f"{p}.expand", out_c, mid, 1)
                if stride != 1 or in_c != out_c:
                    net._add_conv(rng, f"{p}.shortcut", out_c, in_c, 1)
                in_c = out_c
        c2 = config.final_channels ** 2
        w = rng.uniform(-HEAD_INIT_SCALE, HEAD_INIT_SCALE, size=(c2, 2)).astype(dtype)
        net.params["head.weight"] = Tensor(w, name="head.weight")
        net.params["head.bias"] = Tensor(np.array([0.0, SIGMA_BIAS_INIT], dtype=dtype), name="head.bias")
        return net

    def _add_conv(self, rng, prefix, out_c, in_c, k):
        self.params[f"{prefix}.weight"] = Tensor(_conv_init(rng, out_c, in_c, k, self.dtype), name=f"{prefix}.weight")
        self.params[f"{prefix}.bn.gamma"] = Tensor(np.ones(out_c, self.dtype), name=f"{prefix}.bn.gamma")
        self.params[f"{prefix}.bn.beta"] = Tensor(np.zeros(out_c, self.dtype), name=f"{prefix}.bn.beta")
        self.stats[f"{prefix}.bn"] = ad.RunningStats(np.zeros(out_c, self.dtype), np.ones(out_c, self.dtype))

    def set_trainable(self, names):
        names = set(names)
        for name, t in self.params.items():
            t.requires_grad = name in names

    def backbone_names(self):
        return [n for n in self.params if n not in HEAD_PARAMS]

    def copy(self):
        return QualityNet(
            config=self.config,
            params={n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n) for n, t in self.params.items()},
            stats={n: ad.RunningStats(s.mean.copy(), s.var.copy()) for n, s in self.stats.items()},
            dtype=self.dtype,
        )

    # -- forward ------------------------------------------------------------

    def _conv_bn(self, x, prefix, stride, padding, training, update_stats, relu=True):
        p = self.params
        y = ad.conv2d(x, p[f"{prefix}.weight"], stride=stride, padding=padding)
        y = ad.batchnorm(y, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.beta"], self.stats[f"{prefix}.bn"],
                         training=training, update_stats=update_stats)
        return ad.relu(y) if relu else y

    def features(self, images, training=False, update_stats=True):
        """Backbone activations for an (N, C, H, W) batch, flattened to (N, s, c)."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_channels:
            raise ad.ShapeError(f"expected (N, {cfg.input_channels}, H, W) input, got {x.shape}")
        if min(x.shape[2:]) < cfg.min_input_size:
            raise ad.ShapeError(
                f"input {x.shape[2]}x{x.shape[3]} is below the minimum size "
                f"{cfg.min_input_size}x{cfg.min_input_size}")
        h = self._conv_bn(x, "stem", 2, 1, training, update_stats)
        h = ad.maxpool2d(h, 2)
        for si, nblocks in enumerate(cfg.blocks_per_stage):
            for bi in range(nblocks):
                stride = cfg.stage_strides[si] if bi == 0 else 1
                pre = f"stage{si}.block{bi}"
                y = self._conv_bn(h, f"{pre}.reduce", 1, 0, training, update_stats)
                y = self._conv_bn(y, f"{pre}.conv", stride, 1, training, update_stats)
                y = self._conv_bn(y, f"{pre}.expand", 1, 0, training, update_stats, relu=False)
                if f"{pre}.shortcut.weight" in self.params:
                    sc = self._conv_bn(h, f"{pre}.shortcut", stride, 0, training, update_stats, relu=False)
                else:
                    sc = h
                h = ad.relu(ad.add(y, sc))
        n, c = h.shape[:2]
        # (N, c, H, W) -> (N, s, c)
        flat = ad.reshape(h, (n, c, -1))
        return _swap_last(flat)

    def head(self, pooled):
        out = ad.add(ad.matmul(pooled, self.params["head.weight"]), self.params["head.bias"])
        f = ad.index(out, (slice(None), 0))
        sigma = ad.add(ad.softplus(ad.index(out, (slice(None), 1))), SIGMA_FLOOR)
        return f, sigma

    def forward(self, images, training=False, update_stats=True):
        """Quality scores f and uncertainties sigma (both shape (N,)) for a batch."""
        z = self.features(images, training, update_stats)
        return self.head(bilinear_pool(z))


def _swap_last(x):
    """(N, a, b) -> (N, b, a) as a differentiable permutation."""
    out = np.ascontiguousarray(np.swapaxes(x.data, 1, 2))

    def back(g):
        return (np.swapaxes(g, 1, 2),)

    return ad._emit("transpose", out, (x,), back)


def bilinear_pool(z):
    """Second-order pooling: z (s, c) or (N, s, c) -> flattened z^T z of length c*c.

    No normalization is applied to the Gram matrix.
    """
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z))
    if z.ndim == 2:
        return ad.reshape(ad.gram(z), (-1,))
    if z.ndim == 3:
        return ad.reshape(ad.gram(z), (z.shape[0], -1))
    raise ad.ShapeError(f"bilinear_pool: expected z of rank 2 or 3, got shape {z.shape}")


def raster_batch(rasters, dtype=np.float32):
    """Stack (H, W, C) pixel arrays into an (N, C, H, W) array."""
    arrs = [np.asarray(getattr(r, "pixels", r), dtype=dtype) for r in rasters]
    return np.ascontiguousarray(np.stack(arrs).transpose(0, 3, 1, 2))


def extract_features(raster, net, mode="eval"):
    """Feature map z of shape (s, c) for one raster."""
    with ad.no_grad():
        z = net.features(raster_batch([raster], net.dtype), training=(mode == "train"), update_stats=False)
    return z.data[0]


def predict(raster, net, mode="eval"):
    with ad.no_grad():
        f, sigma = net.forward(raster_batch([raster], net.dtype), training=(mode == "train"), update_stats=False)
    return QualityOutput(float(f.data[0]), float(sigma.data[0]))


def pairwise_probability(out_x, out_y):
    """Probability that x is of better quality than y under the predicted Gaussians.

    Accepts two :class:`QualityOutput` (returns a float) or tensor pairs
    ``(f_x, sigma_x)``/``(f_y, sigma_y)`` (returns a differentiable tensor).
    """
    if isinstance(out_x, QualityOutput):
        from .gaussian import normal_cdf
        t = (out_x.f - out_y.f) / np.sqrt(out_x.sigma ** 2 + out_y.sigma ** 2)
        return normal_cdf(t)
    fx, sx = out_x
    fy, sy = out_y
    denom = ad.sqrt(ad.add(ad.square(sx), ad.square(sy)))
    return ad.normal_cdf(ad.div(ad.sub(fx, fy), denom))
