"""Mini-batch Adam training over a combined pair set, with head-only warm-up.

Checkpoint layout (little-endian)::

    b"RFCKPT1" | u32 count | count x (u16 len, utf-8 name, u8 rank, rank x u32 dim, float32 data)

Besides the parameters it holds batchnorm running statistics, the backbone
configuration (``__backbone__.*``), an optimizer flag and, when set, Adam
moments and per-parameter step counts.
"""

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import ValidationError, derive_seed
from .losses import LOSS_KINDS, batch_loss
from .model import HEAD_PARAMS, BackboneConfig, QualityNet, raster_batch

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RFCKPT1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs_total: int = 12
    warmup_epochs: int = 3
    lr_initial: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 3
    batch_warmup: int = 128
    batch_main: int = 32
    loss: str = "fidelity"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    freeze_bn_stats_in_warmup: bool = False
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = backbone_from_dict(self.backbone)
        if self.loss not in LOSS_KINDS:
            raise ValidationError(f"unknown loss kind {self.loss!r}; expected one of {LOSS_KINDS}")
        if not 0 <= self.warmup_epochs <= self.epochs_total:
            raise ValidationError("warmup_epochs must be within [0, epochs_total]")
        if self.batch_warmup < 1 or self.batch_main < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.lr_decay_every < 1 or self.lr_decay_factor <= 0 or self.lr_initial < 0:
            raise ValidationError("invalid learning-rate schedule")

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["backbone"] = self.backbone.to_dict()
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def backbone_from_dict(doc):
    known = {f.name for f in dataclasses.fields(BackboneConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown backbone keys: {sorted(unknown)}")
    try:
        return BackboneConfig(**doc)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


@dataclass
class TrainState:
    net: QualityNet
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)  # per-parameter Adam step counts
    step: int = 0
    epoch: int = 0
    loss_history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, net):
        st = cls(net=net)
        for name, t in net.params.items():
            st.m[name] = np.zeros_like(t.data)
            st.v[name] = np.zeros_like(t.data)
            st.steps[name] = 0
        return st


def lr_schedule(epoch, config):
    return config.lr_initial / config.lr_decay_factor ** (epoch // config.lr_decay_every)


def adam_step(state, grads, lr, config=None):
    """Bias-corrected Adam update for the parameters named in ``grads``.

    Parameters absent from ``grads`` (frozen) keep their values and moments.
    """
    config = config or TrainConfig()
    b1, b2, eps = config.beta1, config.beta2, config.adam_eps
    for name, g in grads.items():
        param = state.net.params[name]
        if g.shape != param.shape:
            raise ValidationError(f"gradient for {name!r} has shape {g.shape}, parameter has {param.shape}")
        dt = param.dtype
        g = g.astype(dt, copy=False)
        t = state.steps[name] + 1
        state.steps[name] = t
        m = state.m[name] = (b1 * state.m[name] + (1 - b1) * g).astype(dt)
        v = state.v[name] = (b2 * state.v[name] + (1 - b2) * g * g).astype(dt)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(dt)
    state.step += 1
    return state


def _image_table(training_set, store, dtype):
    ids = sorted({i for p in training_set.pairs for i in (p.x_id, p.y_id)})
    rasters = []
    for image_id in ids:
        try:
            rasters.append(store[image_id])
        except KeyError:
            raise TrainingError(f"unresolvable raster for image {image_id!r}") from None
    return {image_id: k for k, image_id in enumerate(ids)}, raster_batch(rasters, dtype), ids


def pair_targets(training_set, kind):
    """Per-pair targets: probabilities, or binary labels mu_x >= mu_y for ``cross_entropy_binary``.

    Phi is exactly antisymmetric, so p >= 0.5 iff mu_x >= mu_y (including the
    zero-std fallback, where ties get p = 0.5).
    """
    p = np.array([pair.p for pair in training_set.pairs], dtype=np.float64)
    if kind == "cross_entropy_binary":
        return (p >= 0.5).astype(np.float64)
    return p


def iter_batches(n_items, batch_size, rng):
    order = rng.permutation(n_items)
    for start in range(0, n_items, batch_size):
        yield order[start:start + batch_size]


def train(training_set, store, config, image_targets=None, state=None, callback=None):
    """Run the full schedule; returns (TrainState, loss curve).

    ``image_targets`` maps image id -> re-scaled score and is required for the
    ``mos_regression`` loss. The curve is a list of (iter, epoch, lr, loss).
    ``callback(state, epoch, lr, loss, batch)`` runs after every update;
    ``batch`` holds the indices of the pairs in that mini-batch.
    """
    if len(training_set) == 0:
        raise ValidationError("empty training set")
    if state is None:
        net = QualityNet.init(config.backbone, seed=derive_seed(config.seed, "init"))
        state = TrainState.fresh(net)
    net = state.net
    index_of, images, ids = _image_table(training_set, store, net.dtype)
    x_all = np.array([index_of[p.x_id] for p in training_set.pairs])
    y_all = np.array([index_of[p.y_id] for p in training_set.pairs])
    kind = config.loss
    if kind == "mos_regression":
        if image_targets is None:
            raise ValidationError("mos_regression needs per-image targets")
        targets_all = np.array([image_targets[i] for i in ids], dtype=np.float64)
    else:
        targets_all = pair_targets(training_set, kind)

    curve = []
    for epoch in range(state.epoch, config.epochs_total):
        warm = epoch < config.warmup_epochs
        trainable = list(HEAD_PARAMS) if warm else list(net.params)
        net.set_trainable(trainable)
        wrt = {n: net.params[n] for n in trainable}
        lr = lr_schedule(epoch, config)
        bs = config.batch_warmup if warm else config.batch_main
        update_stats = not (warm and config.freeze_bn_stats_in_warmup)
        rng = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch))
        for batch in iter_batches(len(training_set), bs, rng):
            members, inverse = np.unique(np.concatenate([x_all[batch], y_all[batch]]), return_inverse=True)
            xi, yi = inverse[:len(batch)], inverse[len(batch):]
            tgt = targets_all[members] if kind == "mos_regression" else targets_all[batch]
            try:
                with ad.Tape() as tape:
                    loss = batch_loss(net, images[members], xi, yi, tgt, kind,
                                      training=True, update_stats=update_stats)
                grads = ad.backward(tape, loss, wrt)
            except ad.NumericError as exc:
                raise TrainingError(_diagnostic(state.step, training_set, batch, exc)) from None
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(_diagnostic(state.step, training_set, batch, "non-finite loss"))
            adam_step(state, grads, lr, config)
            curve.append((state.step, epoch, lr, value))
            state.loss_history.append(value)
            if callback is not None:
                callback(state, epoch, lr, value, batch)
        state.epoch = epoch + 1
        log.info("epoch %d lr=%.1e mean loss %.5f", epoch, lr,
                 float(np.mean([c[3] for c in curve if c[1] == epoch])))
    net.set_trainable(())
    return state, curve


def _diagnostic(step, training_set, batch, exc):
    pairs = [(training_set.pairs[k].x_id, training_set.pairs[k].y_id) for k in batch[:4]]
    return f"aborted at iteration {step + 1}: {exc}; batch starts with {pairs} ({len(batch)} pairs)"


def write_loss_csv(curve, path):
    lines = ["iter,epoch,lr,loss"] + [f"{i},{e},{lr:.10g},{v:.10g}" for i, e, lr, v in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------------
# checkpoints

def _pack(name, arr):
    arr = np.asarray(arr, dtype="<f4")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _backbone_tensors(cfg):
    return {
        "__backbone__.scalars": [cfg.input_channels, cfg.stem_channels, cfg.bottleneck_ratio, cfg.max_features],
        "__backbone__.block_channels": list(cfg.block_channels),
        "__backbone__.blocks_per_stage": list(cfg.blocks_per_stage),
        "__backbone__.stage_strides": list(cfg.stage_strides),
    }


def save_checkpoint(state, path, include_optimizer=True):
    net = state.net
    tensors = dict(_backbone_tensors(net.config))
    for name, t in net.params.items():
        tensors[name] = t.data
    for name, s in net.stats.items():
        tensors[f"{name}.running_mean"] = s.mean
        tensors[f"{name}.running_var"] = s.var
    tensors["__optimizer__"] = np.float32(1.0 if include_optimizer else 0.0)
    if include_optimizer:
        tensors["__step__"] = np.float32(state.step)
        tensors["__epoch__"] = np.float32(state.epoch)
        for name in net.params:
            tensors[f"adam.m.{name}"] = state.m[name]
            tensors[f"adam.v.{name}"] = state.v[name]
            tensors[f"adam.t.{name}"] = np.float32(state.steps[name])
    blob = CKPT_MAGIC + struct.pack("<I", len(tensors)) + b"".join(_pack(n, a) for n, a in tensors.items())
    Path(path).write_bytes(blob)


def _read_tensors(blob):
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("incompatible checkpoint: bad magic/version")
    pos = len(CKPT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        out = blob[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        try:
            name = take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("corrupt tensor name") from None
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors


def load_checkpoint(path, backbone=None):
    """Read a checkpoint into a fresh TrainState.

    The stored backbone configuration is used unless ``backbone`` is given, in
    which case every tensor must match the shapes that configuration implies.
    """
    tensors = _read_tensors(Path(path).read_bytes())
    try:
        scal = [int(v) for v in tensors["__backbone__.scalars"]]
        stored = BackboneConfig(
            input_channels=scal[0], stem_channels=scal[1], bottleneck_ratio=scal[2], max_features=scal[3],
            block_channels=tuple(int(v) for v in tensors["__backbone__.block_channels"]),
            blocks_per_stage=tuple(int(v) for v in tensors["__backbone__.blocks_per_stage"]),
            stage_strides=tuple(int(v) for v in tensors["__backbone__.stage_strides"]),
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise CheckpointError(f"checkpoint lacks a valid backbone description: {exc}") from None
    cfg = backbone or stored
    net = QualityNet.init(cfg, seed=0)
    for name, t in net.params.items():
        _fill(tensors, name, t.data)
    for name, s in net.stats.items():
        _fill(tensors, f"{name}.running_mean", s.mean)
        _fill(tensors, f"{name}.running_var", s.var)
    state = TrainState.fresh(net)
    if float(tensors.get("__optimizer__", 0.0)) == 1.0:
        state.step = int(tensors["__step__"])
        state.epoch = int(tensors["__epoch__"])
        for name in net.params:
            _fill(tensors, f"adam.m.{name}", state.m[name])
            _fill(tensors, f"adam.v.{name}", state.v[name])
            state.steps[name] = int(tensors[f"adam.t.{name}"])
    return state


def _fill(tensors, name, target):
    if name not in tensors:
        raise CheckpointError(f"checkpoint is missing tensor {name!r}")
    src = tensors[name]
    if src.shape != target.shape:
        raise CheckpointError(f"shape mismatch for tensor {name!r}: checkpoint {src.shape}, model {target.shape}")
    target[...] = src
