"""Fusing linear-activation-linear blocks and auditing the linearity gap.

A mergeable block is ``first -> activation -> second`` where both linear
layers belong to the same family (dense or stride-1 conv). Once the
activation is the identity the pair collapses to one layer exactly:
``W = W2 W1`` and ``b = W2 b1 + b2`` for dense layers, and for convs the
kernels compose into one of size ``k1 + k2 - 1``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import activations as act
from .autodiff import Tensor
from .errors import DataError, DimensionError, MergeError, UnsupportedMergeError
from .layers import Conv2d, Dense, Model, ParametricActivation
from .linalg import sigma_max

DEFAULT_ALPHA_THRESHOLD = 0.99


@dataclass
class MergeableBlock:
    first: Dense | Conv2d
    activation: ParametricActivation
    second: Dense | Conv2d
    block_id: int

    def __post_init__(self):
        if type(self.first) is not type(self.second):
            raise MergeError(
                f"block {self.block_id}: {self.first.kind} and {self.second.kind} cannot be fused"
            )
        if isinstance(self.first, Dense):
            if self.first.out_features != self.second.in_features:
                raise MergeError(
                    f"block {self.block_id}: dense {self.first.out_features} -> "
                    f"{self.second.in_features} does not compose"
                )
        else:
            if self.first.out_channels != self.second.in_channels:
                raise MergeError(f"block {self.block_id}: hidden channel counts differ")

    @property
    def family(self):
        return self.first.kind

    @property
    def alpha(self):
        return self.activation.alpha

    def forward(self, x):
        """Block output computed layer by layer (array in, array out)."""
        t = self.first.forward(_as_input(x, self.first))
        t = self.activation.forward(t)
        return self.second.forward(t).data

    def compression_spec(self):
        if isinstance(self.first, Dense):
            return CompressionSpec(
                dense=(self.first.in_features, self.first.out_features, self.second.out_features)
            )
        return CompressionSpec(
            conv=(
                self.first.kernel_size,
                self.second.kernel_size,
                self.first.in_channels,
                self.first.out_channels,
                self.second.out_channels,
            )
        )


def _as_input(x, layer):
    dtype = next(iter(layer.params().values())).dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _check_conv_mergeable(first, second):
    if first.stride != 1 or second.stride != 1:
        raise UnsupportedMergeError(
            f"conv merge needs stride 1 on both layers, got {first.stride} and {second.stride}"
        )
    if second.padding != 0:
        # zero padding of the hidden map is not a bias-filled border, so the
        # fused conv would differ along the edges
        raise UnsupportedMergeError(
            f"conv merge needs an unpadded second layer, got padding {second.padding}"
        )


def merge_dense(block):
    """Fuse a dense block into one :class:`Dense`; alpha is ignored."""
    first, second = block.first, block.second
    if not (isinstance(first, Dense) and isinstance(second, Dense)):
        raise MergeError("merge_dense needs two dense layers")
    if first.out_features != second.in_features:
        raise MergeError(f"cannot merge {first.W.shape} with {second.W.shape}")
    dtype = first.W.dtype
    W1 = first.W.data.astype(np.float64)
    W2 = second.W.data.astype(np.float64)
    W = W2 @ W1
    b = W2 @ first.b.data.astype(np.float64) + second.b.data
    return Dense(W.astype(dtype), b.astype(dtype))


def compose_kernels(k1, k2):
    """Kernel of ``conv(conv(x, k1), k2)`` for cross-correlation convs.

    ``k1`` is (hidden, c_in, a, a), ``k2`` is (c_out, hidden, b, b); the result
    is (c_out, c_in, a+b-1, a+b-1): for each output/input channel pair, the sum
    over hidden channels of the full 2-D convolution of the two kernels.
    """
    k1 = np.asarray(k1, dtype=np.float64)
    k2 = np.asarray(k2, dtype=np.float64)
    hidden, c_in, a, _ = k1.shape
    c_out, hidden2, b, _ = k2.shape
    if hidden != hidden2:
        raise MergeError(f"hidden channels differ: {hidden} vs {hidden2}")
    k = a + b - 1
    out = np.zeros((c_out, c_in, k, k))
    for u in range(b):
        for v in range(b):
            out[:, :, u:u + a, v:v + a] += np.tensordot(k2[:, :, u, v], k1, axes=(1, 0))
    return out


def merge_conv(block):
    first, second = block.first, block.second
    if not (isinstance(first, Conv2d) and isinstance(second, Conv2d)):
        raise MergeError("merge_conv needs two conv layers")
    _check_conv_mergeable(first, second)
    if first.out_channels != second.in_channels:
        raise MergeError("hidden channel counts differ")
    dtype = first.kernel.dtype
    kernel = compose_kernels(first.kernel.data, second.kernel.data)
    k2 = second.kernel.data.astype(np.float64)
    bias = second.bias.data + k2.sum(axis=(2, 3)) @ first.bias.data.astype(np.float64)
    return Conv2d(
        kernel.astype(dtype), bias.astype(dtype), stride=1, padding=first.padding + second.padding
    )


def merge_block(block):
    if isinstance(block.first, Dense):
        return merge_dense(block)
    return merge_conv(block)


@dataclass(frozen=True)
class CompressionSpec:
    dense: tuple | None = None
    conv: tuple | None = None

    def __post_init__(self):
        dims = self.dense if self.dense is not None else self.conv
        if (self.dense is None) == (self.conv is None):
            raise ValueError("give exactly one of dense=(n_in, n_hidden, n_out) or conv=(k1, k2, c_in, c_hidden, c_out)")
        expected = 3 if self.dense is not None else 5
        if len(dims) != expected or any(int(d) != d or d < 1 for d in dims):
            raise ValueError(f"compression dims must be {expected} positive integers, got {dims}")


def compression_ratio_dense(spec):
    """Weight-count compression of fusing an ``n_in -> n_hidden -> n_out`` MLP."""
    if spec.dense is None:
        raise ValueError("dense compression ratio needs a dense spec")
    n_in, n_hidden, n_out = spec.dense
    return 1.0 - (n_in * n_out) / (n_hidden * (n_in + n_out))


def compression_ratio_conv(spec):
    """Conv compression ratio in its published form.

    Note the orientation: this is ``1 - before/after`` whereas the dense
    ratio is ``1 - after/before``, so it is not the measured weight saving
    of a conv merge (see :attr:`MergeRecord.cr_weight_only` for that).
    """
    if spec.conv is None:
        raise ValueError("conv compression ratio needs a conv spec")
    k1, k2, c_in, c_hidden, c_out = spec.conv
    before = k1 * k1 * c_in * c_hidden + k2 * k2 * c_hidden * c_out
    return 1.0 - before / ((k1 + k2 - 1) ** 2 * c_in * c_out)


def compression_ratio(spec):
    return compression_ratio_dense(spec) if spec.dense is not None else compression_ratio_conv(spec)


def linearity_gap(block, x):
    """``(Y_linear - Y_alpha, |Y_linear - Y_alpha|^2)`` for a dense block.

    Evaluated in float64. ``x`` is a vector or a batch of row vectors; for a
    batch the squared norm is returned per row.
    """
    if not isinstance(block.first, Dense):
        raise MergeError("linearity_gap is defined for dense blocks")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None] if single else x
    W1 = block.first.W.data.astype(np.float64)
    b1 = block.first.b.data.astype(np.float64)
    W2 = block.second.W.data.astype(np.float64)
    b2 = block.second.b.data.astype(np.float64)
    if X.shape[1] != W1.shape[1]:
        raise DimensionError(f"block expects {W1.shape[1]} inputs, got {X.shape[1]}")
    pre = X @ W1.T + b1
    a = block.activation
    y_alpha = act.evaluate(a.act, pre, a.alpha, a.beta) @ W2.T + b2
    y_linear = X @ (W2 @ W1).T + (W2 @ b1 + b2)
    gap = y_linear - y_alpha
    gap_sq = (gap * gap).sum(axis=1)
    if single:
        return gap[0], float(gap_sq[0])
    return gap, gap_sq


def quantile_radius(samples, delta):
    """Smallest sample norm r with at most a ``delta`` fraction of norms above r."""
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0 or len(samples) == 0:
        raise DataError("quantile_radius needs at least one sample")
    norms = np.sort(np.linalg.norm(samples.reshape(len(samples), -1), axis=1))
    n = len(norms)
    allowed = int(np.floor(delta * n + 1e-9))
    return float(norms[max(n - 1 - allowed, 0)])


def error_bound_C(W1, b1, W2, x_delta):
    """``sigma_max(W2 W1)^2 |x_delta|^2 + |W2 b1|^2``."""
    W1 = np.asarray(getattr(W1, "data", W1), dtype=np.float64)
    b1 = np.asarray(getattr(b1, "data", b1), dtype=np.float64)
    W2 = np.asarray(getattr(W2, "data", W2), dtype=np.float64)
    if W2.shape[1] != W1.shape[0] or b1.shape != (W1.shape[0],):
        raise DimensionError(f"shapes do not compose: W1 {W1.shape}, b1 {b1.shape}, W2 {W2.shape}")
    s = sigma_max(W2 @ W1)
    shift = W2 @ b1
    return float(s * s * float(x_delta) ** 2 + shift @ shift)


@dataclass
class BoundReport:
    delta: float
    x_delta: float
    C: float
    empirical_violation_rate: float
    sample_count: int
    alpha: float = float("nan")
    block_id: int = -1
    violations: int = 0

    def __post_init__(self):
        if self.C < 0:
            raise ValueError(f"C must be non-negative, got {self.C}")
        if not 0.0 <= self.empirical_violation_rate <= 1.0:
            raise ValueError(f"violation rate out of [0, 1]: {self.empirical_violation_rate}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def audit_bound(block, samples, delta):
    """Count samples violating ``|gap|^2 <= C (1 - alpha)^2``.

    The bound is only reported here, never enforced.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < 100:
        raise DataError(f"audit_bound needs at least 100 samples, got {len(samples)}")
    x_delta = quantile_radius(samples, delta)
    C = error_bound_C(block.first.W, block.first.b, block.second.W, x_delta)
    alpha = float(block.alpha)
    _, gap_sq = linearity_gap(block, samples)
    violations = int(np.count_nonzero(gap_sq > C * (1.0 - alpha) ** 2))
    return BoundReport(
        delta=float(delta),
        x_delta=x_delta,
        C=C,
        empirical_violation_rate=violations / len(samples),
        sample_count=len(samples),
        alpha=alpha,
        block_id=block.block_id,
        violations=violations,
    )


def _linear_pair_ok(first, second):
    if type(first) is not type(second) or not first.linear:
        return False
    if isinstance(first, Dense):
        return first.out_features == second.in_features
    if first.out_channels != second.in_channels:
        return False
    try:
        _check_conv_mergeable(first, second)
    except UnsupportedMergeError:
        return False
    return True


def find_mergeable_blocks(model):
    """Non-overlapping [linear, activation, linear] triples, in model order.

    Overlapping candidates are resolved greedily from the output end.
    """
    layers = model.layers
    blocks = []
    limit = len(layers)
    for i in range(len(layers) - 3, -1, -1):
        if i + 2 >= limit:
            continue
        first, mid, second = layers[i:i + 3]
        if isinstance(mid, ParametricActivation) and _linear_pair_ok(first, second):
            blocks.append(MergeableBlock(first, mid, second, i))
            limit = i
    return blocks[::-1]


@dataclass
class MergeRecord:
    block_id: int
    family: str
    alpha_before_snap: float
    dims: tuple
    cr_weight_only: float
    cr_formula: float
    params_before: int
    params_after: int
    weights_before: int
    weights_after: int
    kernel_size: int | None = None

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


def _weights_and_params(layer):
    p = layer.params()
    if isinstance(layer, Dense):
        return p["W"].size, p["W"].size + p["b"].size
    return p["kernel"].size, p["kernel"].size + p["bias"].size


def finalize_merge(model, threshold=DEFAULT_ALPHA_THRESHOLD, block_ids=None):
    """Snap alpha >= threshold to 1 and fuse those blocks.

    Returns a new model plus one :class:`MergeRecord` per fused block. Blocks
    below the threshold are left in place with their activation frozen at the
    trained alpha. ``block_ids`` restricts which blocks are considered.
    """
    model = model.copy()
    records = []
    blocks = find_mergeable_blocks(model)
    if block_ids is not None:
        blocks = [b for b in blocks if b.block_id in set(block_ids)]
    layers = list(model.layers)
    for block in reversed(blocks):
        a = block.activation
        alpha = float(a.alpha)
        if alpha < threshold:
            a.pin(alpha)
            continue
        a.pin(1.0)
        fused = merge_block(block)
        w1, p1 = _weights_and_params(block.first)
        w2, p2 = _weights_and_params(block.second)
        wf, pf = _weights_and_params(fused)
        spec = block.compression_spec()
        dims = spec.dense if spec.dense is not None else spec.conv
        records.append(
            MergeRecord(
                block_id=block.block_id,
                family=block.family,
                alpha_before_snap=alpha,
                dims=tuple(int(d) for d in dims),
                cr_weight_only=1.0 - wf / (w1 + w2),
                cr_formula=compression_ratio(spec),
                params_before=p1 + p2,
                params_after=pf,
                weights_before=w1 + w2,
                weights_after=wf,
                kernel_size=fused.kernel_size if isinstance(fused, Conv2d) else None,
            )
        )
        layers[block.block_id:block.block_id + 3] = [fused]
    merged = Model(layers, model.input_shape, model.num_classes, model.name)
    return merged, records[::-1]
