"""Frozen tanh MLP base with optional per-layer adapter slots.

Parameter names used throughout the package::

    layers.{l}.weight   layers.{l}.bias
    lora.{l}.a          lora.{l}.b
    bottleneck.{l}.down bottleneck.{l}.up
    head.weight         head.bias
"""

from __future__ import annotations

import copy
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ContractError, ParseError, ShapeError
from .lora import LoraAdapter

LORA_STRATEGIES = ("lora_static", "lora_dynamic")
CHECKPOINT_FORMAT = "dynlora-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.bias.shape != (1, self.weight.shape[1]):
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class BottleneckAdapter:
    """Residual ``h + tanh(h·down)·up`` placed after a layer's activation."""

    down: np.ndarray
    up: np.ndarray

    def __post_init__(self) -> None:
        if self.down.shape[1] != self.up.shape[0] or self.down.shape[1] < 1:
            raise ShapeError(f"bottleneck shapes {self.down.shape}, {self.up.shape} do not chain")

    @property
    def width(self) -> int:
        return self.down.shape[1]


@dataclass
class Model:
    layers: list[LayerSpec]
    head: LayerSpec
    adapters: list[LoraAdapter | None] | None = None
    bottlenecks: list[BottleneckAdapter] | None = None
    strategy: str = "base"
    seed: int | None = None

    def __post_init__(self) -> None:
        for i in range(len(self.layers) - 1):
            if self.layers[i].d_out != self.layers[i + 1].d_in:
                raise ContractError(f"layer {i} outputs {self.layers[i].d_out} but layer {i + 1} expects {self.layers[i + 1].d_in}")
        if self.layers and self.head.d_in != self.layers[-1].d_out:
            raise ContractError("head input width does not match the last layer")
        if self.adapters is not None and len(self.adapters) != len(self.layers):
            raise ContractError(f"{len(self.adapters)} adapter slots for {len(self.layers)} layers")

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].d_in] + [layer.d_out for layer in self.layers]

    @property
    def n_classes(self) -> int:
        return self.head.d_out

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> dict[str, np.ndarray]:
        """Every parameter array by name, in a fixed order."""
        params: dict[str, np.ndarray] = {}
        for l, layer in enumerate(self.layers):
            params[f"layers.{l}.weight"] = layer.weight
            params[f"layers.{l}.bias"] = layer.bias
        for l, ad in enumerate(self.adapters or []):
            if ad is not None:
                params[f"lora.{l}.a"] = ad.a
                params[f"lora.{l}.b"] = ad.b
        for l, bn in enumerate(self.bottlenecks or []):
            params[f"bottleneck.{l}.down"] = bn.down
            params[f"bottleneck.{l}.up"] = bn.up
        params["head.weight"] = self.head.weight
        params["head.bias"] = self.head.bias
        return params

    def set_parameter(self, name: str, arr: np.ndarray) -> None:
        kind, *rest = name.split(".")
        if kind == "head":
            setattr(self.head, rest[0], arr)
            return
        l, attr = int(rest[0]), rest[1]
        target = {"layers": self.layers, "lora": self.adapters, "bottleneck": self.bottlenecks}[kind][l]
        if getattr(target, attr).shape != arr.shape:
            raise ShapeError(f"{name}: shape {arr.shape} != {getattr(target, attr).shape}")
        setattr(target, attr, arr)

    def copy(self) -> "Model":
        return copy.deepcopy(self)


class ForwardPass(NamedTuple):
    logits: T.Operand
    activations: list[T.Operand]
    effective_weights: list[T.Operand]


def init_model(dims: list[int], n_classes: int, seed: int) -> Model:
    """Seeded Glorot-uniform weights and zero biases."""
    if len(dims) < 2:
        raise ContractError("dims needs at least an input and one layer width")
    if n_classes < 2:
        raise ContractError("n_classes must be at least 2")
    if any(int(d) < 1 for d in dims):
        raise ContractError(f"all widths must be positive, got {dims}")
    rng = np.random.default_rng(seed)

    def glorot(d_in: int, d_out: int) -> LayerSpec:
        s = math.sqrt(6.0 / (d_in + d_out))
        return LayerSpec(rng.uniform(-s, s, size=(d_in, d_out)), np.zeros((1, d_out)))

    layers = [glorot(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    head = glorot(dims[-1], n_classes)
    return Model(layers=layers, head=head, seed=seed)


def _check_layer(model: Model, l: int) -> None:
    if not 0 <= l < model.n_layers:
        raise ContractError(f"layer index {l} out of range [0, {model.n_layers})")


def _effective(model: Model, l: int, p: Mapping[str, T.Operand]) -> T.Operand:
    w = p[f"layers.{l}.weight"]
    ad = model.adapters[l] if model.adapters is not None else None
    if ad is None or model.strategy not in LORA_STRATEGIES:
        return w
    return T.add(w, T.scale(T.matmul(p[f"lora.{l}.a"], p[f"lora.{l}.b"]), ad.alpha))


def effective_weight(model: Model, l: int) -> np.ndarray:
    """``W_l + alpha_l·(A_l·B_l)`` for LoRA strategies, else ``W_l``."""
    _check_layer(model, l)
    return _effective(model, l, model.parameters())


def forward_pass(model: Model, x: T.Operand, params: Mapping[str, T.Operand] | None = None) -> ForwardPass:
    """Forward pass with optional traced overrides for some parameters.

    ``params`` maps parameter names to tape nodes; anything missing is read
    from the model as a constant.
    """
    xv = T.value(x)
    if xv.ndim != 2 or xv.shape[1] != model.layers[0].d_in:
        raise ShapeError(f"input shape {xv.shape} does not match input width {model.layers[0].d_in}")
    p: dict[str, T.Operand] = model.parameters()
    if params:
        p.update(params)
    h = x
    acts, effs = [], []
    for l in range(model.n_layers):
        acts.append(h)
        w = _effective(model, l, p)
        effs.append(w)
        h = T.tanh(T.add_bias(T.matmul(h, w), p[f"layers.{l}.bias"]))
        if model.bottlenecks is not None:
            side = T.matmul(T.tanh(T.matmul(h, p[f"bottleneck.{l}.down"])), p[f"bottleneck.{l}.up"])
            h = T.add(h, side)
    logits = T.add_bias(T.matmul(h, p["head.weight"]), p["head.bias"])
    return ForwardPass(logits, acts, effs)


def forward(model: Model, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Untraced forward. Returns logits and the input of every layer."""
    fp = forward_pass(model, T.as_matrix(x))
    return fp.logits, fp.activations


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Argmax class per row (ties go to the lowest index)."""
    return np.argmax(forward(model, x)[0], axis=1)


# --- checkpoint --------------------------------------------------------------


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unarr(doc: dict, where: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in doc["shape"])
        data = np.array(doc["data"], dtype=np.float64)
        return data.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad array at {where}: {exc}") from exc


def model_to_dict(model: Model, extra: dict | None = None) -> dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": model.dims,
        "n_classes": model.n_classes,
        "seed": model.seed,
        "strategy": model.strategy,
        "layers": [{"weight": _arr(s.weight), "bias": _arr(s.bias)} for s in model.layers],
        "head": {"weight": _arr(model.head.weight), "bias": _arr(model.head.bias)},
        "adapters": None,
        "bottlenecks": None,
    }
    if model.adapters is not None:
        doc["adapters"] = [
            None if ad is None else {"rank": ad.rank, "r_base": ad.r_base, "alpha": ad.alpha, "a": _arr(ad.a), "b": _arr(ad.b)}
            for ad in model.adapters
        ]
    if model.bottlenecks is not None:
        doc["bottlenecks"] = [{"down": _arr(bn.down), "up": _arr(bn.up)} for bn in model.bottlenecks]
    if extra:
        doc["extra"] = extra
    return doc


def model_from_dict(doc: dict) -> Model:
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise ParseError("not a dynlora checkpoint (missing or wrong 'format' field)")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        layers = [LayerSpec(_unarr(s["weight"], f"layers[{i}].weight"), _unarr(s["bias"], f"layers[{i}].bias"))
                  for i, s in enumerate(doc["layers"])]
        head = LayerSpec(_unarr(doc["head"]["weight"], "head.weight"), _unarr(doc["head"]["bias"], "head.bias"))
        adapters = None
        if doc.get("adapters") is not None:
            adapters = [
                None if a is None else LoraAdapter(
                    a=_unarr(a["a"], f"adapters[{i}].a"), b=_unarr(a["b"], f"adapters[{i}].b"),
                    alpha=float(a["alpha"]), r_base=int(a["r_base"]))
                for i, a in enumerate(doc["adapters"])
            ]
        bottlenecks = None
        if doc.get("bottlenecks") is not None:
            bottlenecks = [BottleneckAdapter(_unarr(b["down"], f"bottlenecks[{i}].down"), _unarr(b["up"], f"bottlenecks[{i}].up"))
                           for i, b in enumerate(doc["bottlenecks"])]
        return Model(layers=layers, head=head, adapters=adapters, bottlenecks=bottlenecks,
                     strategy=str(doc["strategy"]), seed=doc.get("seed"))
    except KeyError as exc:
        raise ParseError(f"checkpoint is missing field {exc}") from exc
    except (ShapeError, ContractError) as exc:
        raise ParseError(f"inconsistent checkpoint: {exc}") from exc


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(model: Model, path: str | os.PathLike, extra: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(model_to_dict(model, extra)))


def load_checkpoint(path: str | os.PathLike) -> Model:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"checkpoint is not valid JSON: {exc.msg}", exc.lineno) from exc
    return model_from_dict(doc)
