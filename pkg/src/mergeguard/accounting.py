"""Parameter and MAC accounting for executable models and declarative architectures.

A declarative architecture is a JSON document with a ``layers`` list. Each
entry has a ``kind``:

* ``dense``: ``n_in``, ``n_out``, optional ``bias`` (default true) and
  ``tokens`` (how many vectors it is applied to; defaults to the top-level
  ``tokens``, or 1).
* ``conv2d``: ``c_in``, ``c_out``, ``k``, ``h_out``, ``w_out``, optional ``bias``.
* ``layernorm``: ``dim`` (scale and shift; counted as zero MACs).
* ``opaque``: fixed ``params`` and ``macs`` (attention scores, embeddings).
* ``repeat``: ``count`` copies of a nested ``layers`` list, named
  ``<name>.<i>.<child>``; ``mergeable`` lists child pairs forming a
  dense -> activation -> dense block.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .errors import AccountingError
from .layers import Conv2d, Dense, Model, ParametricActivation, MaxPool2d, Flatten


def _dense_params(n_in, n_out, bias=True):
    return n_in * n_out + (n_out if bias else 0)


# -- executable models -----------------------------------------------------


def _model_params(model):
    total = 0
    for i, layer in enumerate(model.layers):
        if isinstance(layer, (Dense, Conv2d)):
            total += sum(t.size for t in layer.params().values())
        elif isinstance(layer, ParametricActivation):
            # a pinned slope is a constant, only a trainable alpha counts
            total += sum(t.size for t in layer.trainable().values())
        elif not isinstance(layer, (MaxPool2d, Flatten)):
            raise AccountingError(f"layer {i}: unknown layer kind {layer.kind!r}")
    return total


def _model_macs(model, input_shape=None):
    if input_shape is not None and tuple(input_shape) != model.input_shape:
        model = Model(model.layers, input_shape, model.num_classes, model.name)
    total = 0
    for layer, shape in zip(model.layers, model.shapes()):
        if isinstance(layer, Dense):
            total += layer.in_features * layer.out_features
        elif isinstance(layer, Conv2d):
            _, h, w = shape
            total += layer.kernel_size ** 2 * layer.in_channels * layer.out_channels * h * w
        elif not isinstance(layer, (ParametricActivation, MaxPool2d, Flatten)):
            raise AccountingError(f"unknown layer kind {layer.kind!r}")
    return total


# -- declarative descriptors ------------------------------------------------


def bundled_architectures():
    root = resources.files(__package__) / "archs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_architecture(name_or_path):
    """Load a bundled descriptor by name or any descriptor JSON by path."""
    path = Path(str(name_or_path))
    if path.suffix == ".json" and path.exists():
        text = path.read_text()
    else:
        res = resources.files(__package__) / "archs" / f"{name_or_path}.json"
        if not res.is_file():
            raise AccountingError(
                f"unknown architecture {name_or_path!r}; bundled: {', '.join(bundled_architectures())}"
            )
        text = res.read_text()
    arch = json.loads(text)
    if "layers" not in arch:
        raise AccountingError("architecture descriptor has no 'layers' list")
    return arch


def _need(entry, *keys):
    missing = [k for k in keys if k not in entry]
    if missing:
        raise AccountingError(f"layer {entry.get('name', '?')!r} lacks {', '.join(missing)}")
    return [int(entry[k]) for k in keys]


def flatten_architecture(arch):
    """Expand ``repeat`` groups; returns (layers, mergeable_pairs) in order."""
    tokens = int(arch.get("tokens", 1))
    flat, pairs = [], []

    def visit(entries, prefix):
        for entry in entries:
            kind = entry.get("kind")
            name = prefix + entry.get("name", kind or "?")
            if kind == "repeat":
                (count,) = _need(entry, "count")
                for i in range(count):
                    sub = f"{name}.{i}."
                    visit(entry["layers"], sub)
                    pairs.extend((sub + a, sub + b) for a, b in entry.get("mergeable", []))
                continue
            if kind not in ("dense", "conv2d", "layernorm", "opaque"):
                raise AccountingError(f"layer {name!r}: unknown layer kind {kind!r}")
            rec = dict(entry, name=name)
            if kind == "dense":
                rec.setdefault("tokens", tokens)
            flat.append(rec)
        return flat

    visit(arch["layers"], "")
    names = {l["name"] for l in flat}
    for a, b in pairs:
        if a not in names or b not in names:
            raise AccountingError(f"mergeable pair ({a}, {b}) names a missing layer")
    return flat, pairs


def _layer_params(rec):
    kind = rec["kind"]
    bias = bool(rec.get("bias", True))
    if kind == "dense":
        n_in, n_out = _need(rec, "n_in", "n_out")
        return _dense_params(n_in, n_out, bias)
    if kind == "conv2d":
        c_in, c_out, k = _need(rec, "c_in", "c_out", "k")
        return k * k * c_in * c_out + (c_out if bias else 0)
    if kind == "layernorm":
        (dim,) = _need(rec, "dim")
        return 2 * dim
    (p,) = _need(rec, "params")
    return p


def _layer_macs(rec):
    kind = rec["kind"]
    if kind == "dense":
        n_in, n_out, t = _need(rec, "n_in", "n_out", "tokens")
        return n_in * n_out * t
    if kind == "conv2d":
        c_in, c_out, k, h, w = _need(rec, "c_in", "c_out", "k", "h_out", "w_out")
        return k * k * c_in * c_out * h * w
    if kind == "layernorm":
        return 0
    (m,) = _need(rec, "macs")
    return m


def _descriptor_of(arch):
    if isinstance(arch, (str, Path)):
        return load_architecture(arch)
    if isinstance(arch, dict):
        return arch
    raise AccountingError(f"cannot account for {type(arch).__name__}")


def count_params(arch):
    """Exact parameter count (biases included) of a model or descriptor."""
    if isinstance(arch, Model):
        return _model_params(arch)
    layers, _ = flatten_architecture(_descriptor_of(arch))
    return sum(_layer_params(l) for l in layers)


def count_macs(arch, input_shape=None):
    """Multiply-accumulates per sample: dense n_in*n_out, conv k^2*c_in*c_out*h_out*w_out."""
    if isinstance(arch, Model):
        return _model_macs(arch, input_shape)
    layers, _ = flatten_architecture(_descriptor_of(arch))
    return sum(_layer_macs(l) for l in layers)


@dataclass
class BlockSaving:
    first: str
    second: str
    dims: tuple
    params_before: int
    params_after: int
    macs_before: int
    macs_after: int

    @property
    def params_saved(self):
        return self.params_before - self.params_after


@dataclass
class MergeAccount:
    arch: str
    merge_blocks: int
    params_before: int
    params_after: int
    macs_before: int
    macs_after: int
    blocks: list = field(default_factory=list)

    @property
    def param_reduction(self):
        return 1.0 - self.params_after / self.params_before

    @property
    def mac_reduction(self):
        return 1.0 - self.macs_after / self.macs_before

    def to_dict(self):
        d = asdict(self)
        d["param_reduction"] = self.param_reduction
        d["mac_reduction"] = self.mac_reduction
        for b, src in zip(d["blocks"], self.blocks):
            b["dims"] = list(src.dims)
            b["params_saved"] = src.params_saved
        return d


def merge_savings(arch, merge_blocks):
    """Account for fusing the last ``merge_blocks`` mergeable blocks of a descriptor.

    Each block ``n_in -> h -> n_out`` becomes one dense ``n_in -> n_out``.
    """
    arch = _descriptor_of(arch)
    layers, pairs = flatten_architecture(arch)
    if merge_blocks < 0 or merge_blocks > len(pairs):
        raise AccountingError(f"cannot merge {merge_blocks} blocks; {len(pairs)} are mergeable")
    by_name = {l["name"]: l for l in layers}
    blocks = []
    for a, b in pairs[len(pairs) - merge_blocks:][::-1]:
        la, lb = by_name[a], by_name[b]
        if la["kind"] != "dense" or lb["kind"] != "dense" or la["n_out"] != lb["n_in"]:
            raise AccountingError(f"({a}, {b}) is not a dense -> dense block")
        if la["tokens"] != lb["tokens"]:
            raise AccountingError(f"({a}, {b}) see different token counts")
        fused = {"kind": "dense", "n_in": la["n_in"], "n_out": lb["n_out"], "tokens": la["tokens"],
                 "bias": la.get("bias", True) or lb.get("bias", True)}
        blocks.append(
            BlockSaving(
                first=a,
                second=b,
                dims=(int(la["n_in"]), int(la["n_out"]), int(lb["n_out"])),
                params_before=_layer_params(la) + _layer_params(lb),
                params_after=_layer_params(fused),
                macs_before=_layer_macs(la) + _layer_macs(lb),
                macs_after=_layer_macs(fused),
            )
        )
    p0 = sum(_layer_params(l) for l in layers)
    m0 = sum(_layer_macs(l) for l in layers)
    return MergeAccount(
        arch=arch.get("name", "?"),
        merge_blocks=merge_blocks,
        params_before=p0,
        params_after=p0 - sum(b.params_saved for b in blocks),
        macs_before=m0,
        macs_after=m0 - sum(b.macs_before - b.macs_after for b in blocks),
        blocks=blocks,
    )


def weight_count_ratio(weights_before, weights_after):
    """1 - after/before, the measured weight-only compression of a set of layers."""
    if weights_before <= 0:
        raise AccountingError("weight count must be positive")
    return 1.0 - weights_after / weights_before


__all__ = [
    "count_params",
    "count_macs",
    "merge_savings",
    "load_architecture",
    "bundled_architectures",
    "flatten_architecture",
    "MergeAccount",
    "BlockSaving",
    "weight_count_ratio",
]
