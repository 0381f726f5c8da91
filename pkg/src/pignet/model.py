"""Full segmentation networks: PIG-Net and the compact PointNet comparator.

Both models map an (n, 3) point cloud (or a (B, n, 3) batch) to per-point
part logits. The forward pass keeps per-point features and one aggregated
global descriptor, concatenates them per point, and classifies each point
with a shared head; no softmax is applied to the returned logits.
"""

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, DataError, DimensionError, InputError
from .seeding import INIT, make_rng
from .tensor import (Tensor, concat, log_softmax, neg, no_grad, reduce_mean,
                     relu, repeat_rows, reshape, take_per_row)
from .layers import (BatchNorm, PointwiseConv, TNet, global_average_pool,
                     max_over_points, orthogonality_regularizer)
from .inception import InceptionStack, PlainConvStack

DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class ModelConfig:
    """Complete architectural description; a network is built from it
    deterministically given a seed."""

    num_parts: int
    arch: str = "pignet"
    inception_plan: tuple = (64, 128, 256, 512)
    use_inception: bool = True
    use_gap: bool = True
    feature_transform: bool = True
    feature_reduce: int | None = None
    head_widths: tuple = (512, 256, 128)
    lambda_reg: float = 0.001
    tnet_conv_widths: tuple = (64, 128, 1024)
    tnet_fc_widths: tuple = (512, 256)
    baseline_plan: tuple = (64, 64, 64, 128, 1024)
    baseline_local_index: int = 2
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "inception_plan", tuple(self.inception_plan))
        object.__setattr__(self, "head_widths", tuple(self.head_widths))
        object.__setattr__(self, "tnet_conv_widths", tuple(self.tnet_conv_widths))
        object.__setattr__(self, "tnet_fc_widths", tuple(self.tnet_fc_widths))
        object.__setattr__(self, "baseline_plan", tuple(self.baseline_plan))
        if self.arch not in ("pignet", "pointnet"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.num_parts < 2:
            raise ConfigError(f"num_parts must be >= 2, got {self.num_parts}")
        if self.lambda_reg < 0:
            raise ConfigError(f"lambda_reg must be >= 0, got {self.lambda_reg}")
        for e in self.inception_plan:
            if e < 2 or e % 2:
                raise ConfigError(f"inception filter counts must be even, got {e}")
        for w in (*self.head_widths, *self.tnet_conv_widths,
                  *self.tnet_fc_widths, *self.baseline_plan):
            if w < 1:
                raise ConfigError(f"layer widths must be positive, got {w}")
        if self.feature_reduce is not None and self.feature_reduce < 1:
            raise ConfigError(
                f"feature_reduce must be positive, got {self.feature_reduce}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if not 0 <= self.baseline_local_index < len(self.baseline_plan):
            raise ConfigError("baseline_local_index outside the conv plan")


def config_hash(config):
    """Stable hash of a model configuration, used for checkpoint compatibility."""
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _check_points(points, dtype):
    pts = points if isinstance(points, Tensor) else Tensor(np.asarray(points))
    if pts.dtype != dtype:
        pts = Tensor(pts.data.astype(dtype))
    if pts.ndim not in (2, 3) or pts.shape[-1] != 3:
        raise DimensionError(
            f"expected an (n, 3) cloud or a (B, n, 3) batch, got {pts.shape}")
    if pts.size == 0:
        raise InputError("cloud must contain at least one point")
    if not np.isfinite(pts.data).all():
        raise InputError("point coordinates must be finite")
    return pts


class _HeadMixin:
    """Shared per-point classification head: convs with BN+ReLU, plain final."""

    def _build_head(self, width, rng, dtype):
        cfg = self.config
        self.head_convs = []
        self.head_bns = []
        for w in cfg.head_widths:
            self.head_convs.append(PointwiseConv(width, w, rng, bias=False,
                                                 dtype=dtype))
            self.head_bns.append(BatchNorm(w, dtype=dtype))
            width = w
        self.head_out = PointwiseConv(width, cfg.num_parts, rng, bias=True,
                                      dtype=dtype)

    def _run_head(self, features, training):
        for conv, bn in zip(self.head_convs, self.head_bns):
            features = relu(bn(conv(features), training))
        return self.head_out(features)

    def _head_parameters(self):
        items = []
        for i, (conv, bn) in enumerate(zip(self.head_convs, self.head_bns)):
            items.extend(conv.named_parameters(f"head/conv{i}/"))
            items.extend(bn.named_parameters(f"head/bn{i}/"))
        items.extend(self.head_out.named_parameters("head/out/"))
        return items

    def _head_state(self):
        items = []
        for i, bn in enumerate(self.head_bns):
            items.extend(bn.named_state(f"head/bn{i}/"))
        return items

    def predict(self, points):
        """Per-point part ids (eval mode); ties go to the lower part id."""
        with no_grad():
            logits, _ = self.forward(points, training=False)
        return np.argmax(logits.data, axis=-1)


class PigNet(_HeadMixin):
    """Input alignment, inception feature stack, feature alignment, global
    pooling, local/global concatenation, per-point head."""

    def __init__(self, config, seed=0):
        if config.arch != "pignet":
            raise ConfigError(f"PigNet cannot be built from arch {config.arch!r}")
        self.config = config
        dtype = DTYPES[config.dtype]
        self.dtype = dtype
        rng = make_rng(seed, INIT)
        self.input_tnet = TNet(3, rng, config.tnet_conv_widths,
                               config.tnet_fc_widths, dtype=dtype)
        if config.use_inception:
            self.stack = InceptionStack(config.inception_plan, rng, dtype=dtype)
        else:
            self.stack = PlainConvStack(config.inception_plan, rng, dtype=dtype)
        width = self.stack.out_channels
        self.reduce_conv = None
        self.reduce_bn = None
        if config.feature_reduce is not None:
            self.reduce_conv = PointwiseConv(width, config.feature_reduce, rng,
                                             bias=False, dtype=dtype)
            self.reduce_bn = BatchNorm(config.feature_reduce, dtype=dtype)
            width = config.feature_reduce
        self.feature_width = width
        self.feature_tnet = None
        if config.feature_transform:
            self.feature_tnet = TNet(width, rng, config.tnet_conv_widths,
                                     config.tnet_fc_widths, dtype=dtype)
        self._build_head(2 * width, rng, dtype)

    def forward(self, points, training=False, capture=None):
        """Run the network; returns (logits, feature transform matrix).

        The matrix is None when the feature transform is disabled. Pass a
        dict as ``capture`` to receive intermediate tensors.
        """
        pts = _check_points(points, self.dtype)
        single = pts.ndim == 2
        x = reshape(pts, (1,) + tuple(pts.shape)) if single else pts
        n = x.shape[1]

        aligned_in, input_mat = self.input_tnet.align(x, training)
        feats = self.stack(aligned_in, training)
        if self.reduce_conv is not None:
            feats = relu(self.reduce_bn(self.reduce_conv(feats), training))
        if self.feature_tnet is not None:
            local, feature_mat = self.feature_tnet.align(feats, training)
        else:
            local, feature_mat = feats, None
        if self.config.use_gap:
            pooled = global_average_pool(local)
        else:
            pooled = max_over_points(local)
        combined = concat([local, repeat_rows(pooled, n)], axis=-1)
        logits = self._run_head(combined, training)

        if capture is not None:
            capture.update(aligned_input=aligned_in, input_matrix=input_mat,
                           local_features=local, global_feature=pooled,
                           combined=combined, feature_matrix=feature_mat)
        if single:
            logits = reshape(logits, (n, self.config.num_parts))
            if feature_mat is not None:
                k = self.feature_width
                feature_mat = reshape(feature_mat, (k, k))
        return logits, feature_mat

    def named_parameters(self):
        items = self.input_tnet.named_parameters("input_tnet/")
        items.extend(self.stack.named_parameters("stack/"))
        if self.reduce_conv is not None:
            items.extend(self.reduce_conv.named_parameters("reduce/conv/"))
            items.extend(self.reduce_bn.named_parameters("reduce/bn/"))
        if self.feature_tnet is not None:
            items.extend(self.feature_tnet.named_parameters("feature_tnet/"))
        items.extend(self._head_parameters())
        return items

    def named_state(self):
        items = self.input_tnet.named_state("input_tnet/")
        items.extend(self.stack.named_state("stack/"))
        if self.reduce_bn is not None:
            items.extend(self.reduce_bn.named_state("reduce/bn/"))
        if self.feature_tnet is not None:
            items.extend(self.feature_tnet.named_state("feature_tnet/"))
        items.extend(self._head_state())
        return items


class PointNetBaseline(_HeadMixin):
    """Compact PointNet-style comparator.

    Input alignment, a plain conv ladder, a point-axis max for the global
    descriptor, concatenation with the last 64-wide per-point features, and
    the same head/loss machinery as PigNet. No feature transform.
    """

    def __init__(self, config, seed=0):
        if config.arch != "pointnet":
            raise ConfigError(
                f"PointNetBaseline cannot be built from arch {config.arch!r}")
        self.config = config
        dtype = DTYPES[config.dtype]
        self.dtype = dtype
        rng = make_rng(seed, INIT)
        self.input_tnet = TNet(3, rng, config.tnet_conv_widths,
                               config.tnet_fc_widths, dtype=dtype)
        self.convs = []
        self.bns = []
        width = 3
        for w in config.baseline_plan:
            self.convs.append(PointwiseConv(width, w, rng, bias=False, dtype=dtype))
            self.bns.append(BatchNorm(w, dtype=dtype))
            width = w
        self.local_width = config.baseline_plan[config.baseline_local_index]
        self.global_width = config.baseline_plan[-1]
        self._build_head(self.local_width + self.global_width, rng, dtype)

    def forward(self, points, training=False, capture=None):
        pts = _check_points(points, self.dtype)
        single = pts.ndim == 2
        x = reshape(pts, (1,) + tuple(pts.shape)) if single else pts
        n = x.shape[1]

        aligned, input_mat = self.input_tnet.align(x, training)
        h = aligned
        local = None
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            h = relu(bn(conv(h), training))
            if i == self.config.baseline_local_index:
                local = h
        pooled = max_over_points(h)
        combined = concat([local, repeat_rows(pooled, n)], axis=-1)
        logits = self._run_head(combined, training)

        if capture is not None:
            capture.update(aligned_input=aligned, input_matrix=input_mat,
                           local_features=local, global_feature=pooled,
                           combined=combined)
        if single:
            logits = reshape(logits, (n, self.config.num_parts))
        return logits, None

    def named_parameters(self):
        items = self.input_tnet.named_parameters("input_tnet/")
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            items.extend(conv.named_parameters(f"convs/conv{i}/"))
            items.extend(bn.named_parameters(f"convs/bn{i}/"))
        items.extend(self._head_parameters())
        return items

    def named_state(self):
        items = self.input_tnet.named_state("input_tnet/")
        for i, bn in enumerate(self.bns):
            items.extend(bn.named_state(f"convs/bn{i}/"))
        items.extend(self._head_state())
        return items


def build_model(config, seed=0):
    if config.arch == "pignet":
        return PigNet(config, seed)
    return PointNetBaseline(config, seed)


def segmentation_loss(logits, labels, feature_matrix=None, lambda_reg=0.0):
    """Mean cross entropy over points, plus the alignment regularizer.

    ``logits`` may be (n, P) or (B, n, P); labels follow with one part id per
    point. Softmax is fused into the loss in log-sum-exp form.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    num_parts = logits.shape[-1]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows = int(np.prod(logits.shape[:-1], dtype=np.int64))
    flat = reshape(logits, (rows, num_parts))
    if labels.shape[0] != flat.shape[0]:
        raise DataError(
            f"{flat.shape[0]} points but {labels.shape[0]} labels")
    bad = np.nonzero((labels < 0) | (labels >= num_parts))[0]
    if bad.size:
        i = int(bad[0])
        raise DataError(
            f"part label {int(labels[i])} at point {i} outside [0, {num_parts})")
    picked = take_per_row(log_softmax(flat), labels)
    loss = neg(reduce_mean(picked))
    if feature_matrix is not None and lambda_reg > 0:
        loss = loss + lambda_reg * orthogonality_regularizer(feature_matrix)
    return loss


def count_parameters(model):
    """Total trainable scalar count (conv weights, biases, BN gamma/beta)."""
    return int(sum(p.data.size for _, p in model.named_parameters()))


def _conv_count(c_in, c_out, bias):
    return c_in * c_out + (c_out if bias else 0)


def _tnet_count(k, conv_widths, fc_widths):
    total = 0
    width = k
    for w in conv_widths:
        total += _conv_count(width, w, bias=False) + 2 * w
        width = w
    for w in fc_widths:
        total += _conv_count(width, w, bias=True)
        width = w
    total += _conv_count(width, k * k, bias=True)
    return total


def parameter_count(config):
    """Closed-form parameter count for a configuration, without building it.

    Matches count_parameters(build_model(config)) exactly; used to report the
    full-scale budget (whose feature-alignment block is too large to allocate
    for a mere count).
    """
    total = _tnet_count(3, config.tnet_conv_widths, config.tnet_fc_widths)
    if config.arch == "pointnet":
        width = 3
        for w in config.baseline_plan:
            total += _conv_count(width, w, bias=False) + 2 * w
            width = w
        head_in = config.baseline_plan[config.baseline_local_index] + width
    else:
        width = 3
        for e in config.inception_plan:
            if config.use_inception:
                total += _conv_count(width, e, bias=False) + 2 * e
                total += 2 * (_conv_count(e, e // 2, bias=False) + e)
                total += _conv_count(e, e, bias=False) + 2 * e
                width = 3 * e
            else:
                total += _conv_count(width, e, bias=False) + 2 * e
                width = e
        if config.feature_reduce is not None:
            total += _conv_count(width, config.feature_reduce, bias=False)
            total += 2 * config.feature_reduce
            width = config.feature_reduce
        if config.feature_transform:
            total += _tnet_count(width, config.tnet_conv_widths,
                                 config.tnet_fc_widths)
        head_in = 2 * width
    for w in config.head_widths:
        total += _conv_count(head_in, w, bias=False) + 2 * w
        head_in = w
    total += _conv_count(head_in, config.num_parts, bias=True)
    return total
