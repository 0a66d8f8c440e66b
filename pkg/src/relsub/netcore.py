"""Small feedforward networks with a recording forward pass.

Tensors are plain float64 numpy arrays. Feature maps are channel-first,
``(C, H, W)``. Every layer operates on a leading batch axis internally so
that attribution methods can evaluate many perturbed inputs in one call;
the public single-input API (:func:`forward`, :func:`backward_gradient`)
adds and strips that axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from relsub.fileio import format_floats


class ShapeError(ValueError):
    """Raised when a tensor or layer does not fit the expected shape chain."""


class ModelFormatError(ValueError):
    """Raised for malformed model files."""


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den != 0)
    return out


# --------------------------------------------------------------------------
# layers


@dataclass(eq=False)
class Dense:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray | None = None

    kind = "Dense"
    has_params = True

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError(f"Dense weight must be 2-D, got shape {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[1],):
                raise ShapeError(
                    f"Dense bias must have length {self.weight.shape[1]}, got {self.bias.shape}"
                )

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.weight.shape[0],):
            raise ShapeError(
                f"Dense expects input shape ({self.weight.shape[0]},), got {tuple(in_shape)}"
            )
        return (self.weight.shape[1],)

    def linear(self, x, weight, bias=None):
        z = x @ weight
        if bias is not None:
            z = z + bias
        return z

    def linear_t(self, g, weight):
        return g @ weight.T

    def forward(self, x):
        return self.linear(x, self.weight, self.bias)

    def vjp(self, x, y, grad):
        return self.linear_t(grad, self.weight)


@dataclass(eq=False)
class Conv2D:
    """Stride-1 'valid' convolution (cross-correlation), weight ``(C_out, C_in, kh, kw)``."""

    weight: np.ndarray
    bias: np.ndarray | None = None

    kind = "Conv2D"
    has_params = True

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ShapeError(f"Conv2D weight must be 4-D, got shape {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[0],):
                raise ShapeError(
                    f"Conv2D bias must have length {self.weight.shape[0]}, got {self.bias.shape}"
                )

    def output_shape(self, in_shape):
        c_out, c_in, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != c_in:
            raise ShapeError(f"Conv2D expects input ({c_in}, H, W), got {tuple(in_shape)}")
        _, h, w = in_shape
        if kh > h or kw > w:
            raise ShapeError(f"Conv2D kernel {kh}x{kw} larger than input {h}x{w}")
        return (c_out, h - kh + 1, w - kw + 1)

    def linear(self, x, weight, bias=None):
        kh, kw = weight.shape[2:]
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (B, C, Ho, Wo, kh, kw)
        z = np.einsum("bchwij,ocij->bohw", win, weight, optimize=True)
        if bias is not None:
            z = z + bias[None, :, None, None]
        return z

    def linear_t(self, g, weight):
        b, _, ho, wo = g.shape
        _, c_in, kh, kw = weight.shape
        out = np.zeros((b, c_in, ho + kh - 1, wo + kw - 1))
        for i in range(kh):
            for j in range(kw):
                out[:, :, i : i + ho, j : j + wo] += np.einsum(
                    "bohw,oc->bchw", g, weight[:, :, i, j], optimize=True
                )
        return out

    def forward(self, x):
        return self.linear(x, self.weight, self.bias)

    def vjp(self, x, y, grad):
        return self.linear_t(grad, self.weight)


@dataclass(eq=False)
class ReLU:
    kind = "ReLU"
    has_params = False

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(x, 0.0)

    def vjp(self, x, y, grad):
        # subgradient 0 at exactly 0
        return grad * (x > 0)


@dataclass(eq=False)
class Flatten:
    kind = "Flatten"
    has_params = False

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def vjp(self, x, y, grad):
        return grad.reshape((grad.shape[0],) + x.shape[1:])


@dataclass(eq=False)
class _Pool2D:
    kernel: int
    stride: int | None = None

    has_params = False

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.kernel
        if self.kernel < 1 or self.stride < 1:
            raise ShapeError("pooling kernel and stride must be positive")

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.kind} expects a (C, H, W) input, got {tuple(in_shape)}")
        c, h, w = in_shape
        if self.kernel > h or self.kernel > w:
            raise ShapeError(f"{self.kind} kernel {self.kernel} larger than input {h}x{w}")
        return (c, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1)

    def _windows(self, x):
        k, s = self.kernel, self.stride
        return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]


class AvgPool2D(_Pool2D):
    kind = "AvgPool2D"

    def forward(self, x):
        return self._windows(x).mean(axis=(-2, -1))

    def vjp(self, x, y, grad):
        k, s = self.kernel, self.stride
        out = np.zeros((grad.shape[0],) + x.shape[1:])
        ho, wo = grad.shape[2:]
        g = grad / (k * k)
        for i in range(k):
            for j in range(k):
                out[:, :, i : i + s * ho : s, j : j + s * wo : s] += g
        return out


class MaxPool2D(_Pool2D):
    kind = "MaxPool2D"

    def _winner_rows_cols(self, x):
        win = self._windows(x)
        b, c, ho, wo, k, _ = win.shape
        # np.argmax returns the first maximum, i.e. the lowest flat index in the window
        idx = win.reshape(b, c, ho, wo, k * k).argmax(axis=-1)
        rows = np.arange(ho)[:, None] * self.stride + idx // k
        cols = np.arange(wo)[None, :] * self.stride + idx % k
        return rows, cols

    def forward(self, x):
        return self._windows(x).max(axis=(-2, -1))

    def route(self, x, values):
        """Send each output value back to the winning input position."""
        rows, cols = self._winner_rows_cols(x)
        b, c = values.shape[:2]
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        out = np.zeros((b,) + x.shape[1:])
        np.add.at(out, (bi, ci, rows, cols), values)
        return out

    def vjp(self, x, y, grad):
        return self.route(x, grad)


Layer = Union[Dense, Conv2D, ReLU, Flatten, AvgPool2D, MaxPool2D]

_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, Flatten, AvgPool2D, MaxPool2D)}


# --------------------------------------------------------------------------
# model and trace


@dataclass(eq=False)
class Model:
    layers: list
    input_shape: tuple
    num_classes: int
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.layers = list(self.layers)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not self.layers:
            raise ShapeError("a model needs at least one layer")
        if self.num_classes < 1:
            raise ShapeError("num_classes must be positive")
        if any(s < 1 for s in self.input_shape):
            raise ShapeError(f"invalid input shape {self.input_shape}")
        shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(
                f"final layer outputs shape {shapes[-1]}, expected ({self.num_classes},)"
            )
        self.shapes = shapes

    def __len__(self):
        return len(self.layers)


@dataclass
class ForwardTrace:
    """Per-layer inputs/outputs of one forward evaluation (no batch axis)."""

    x: np.ndarray
    inputs: list
    outputs: list

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]

    def __len__(self):
        return len(self.outputs)


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x


def forward_batch(model: Model, X: np.ndarray, start: int = 0, stop: int | None = None,
                  record: bool = False):
    """Run layers ``start..stop-1`` on a batch.

    Returns the batch output, or ``(output, inputs)`` with the per-layer
    batch inputs when ``record`` is set (needed for a later :func:`vjp_batch`).
    """
    stop = len(model.layers) if stop is None else stop
    h = np.asarray(X, dtype=np.float64)
    if h.shape[1:] != model.shapes[start]:
        raise ShapeError(f"batch items of shape {h.shape[1:]} do not match {model.shapes[start]}")
    inputs = []
    for layer in model.layers[start:stop]:
        inputs.append(h)
        h = layer.forward(h)
    return (h, inputs) if record else h


def vjp_batch(model: Model, inputs: Sequence[np.ndarray], grad: np.ndarray, start: int = 0,
              stop: int | None = None) -> np.ndarray:
    """Vector-Jacobian product through layers ``start..stop-1`` (recorded batch inputs)."""
    stop = len(model.layers) if stop is None else stop
    g = grad
    for i in range(stop - 1, start - 1, -1):
        g = model.layers[i].vjp(inputs[i - start], None, g)
    return g


def forward(model: Model, x) -> ForwardTrace:
    x = _check_input(model, x)
    out, inputs = forward_batch(model, x[None], record=True)
    ins = [a[0] for a in inputs]
    outs = ins[1:] + [out[0]]
    return ForwardTrace(x=x, inputs=ins, outputs=outs)


def predict(model: Model, X: np.ndarray) -> np.ndarray:
    """Logits for a batch of inputs."""
    return forward_batch(model, X)


def _check_class(model: Model, class_index: int) -> int:
    if not 0 <= class_index < model.num_classes:
        raise IndexError(f"class_index {class_index} out of range [0, {model.num_classes})")
    return int(class_index)


def backward_gradient(model: Model, trace: ForwardTrace, class_index: int) -> np.ndarray:
    """Gradient of one logit with respect to the input of ``trace``."""
    class_index = _check_class(model, class_index)
    return gradient_at_layer(model, trace, class_index, 0)


def gradient_at_layer(model: Model, trace: ForwardTrace, class_index: int,
                      layer_input: int) -> np.ndarray:
    """Gradient of a logit with respect to the input of layer ``layer_input``.

    ``layer_input == len(model)`` gives the one-hot at the logits.
    """
    class_index = _check_class(model, class_index)
    g = np.zeros((1, model.num_classes))
    g[0, class_index] = 1.0
    inputs = [a[None] for a in trace.inputs]
    return vjp_batch(model, inputs[layer_input:], g, start=layer_input)[0]


# --------------------------------------------------------------------------
# serialization


def _layer_to_dict(layer) -> dict:
    d = {"kind": layer.kind, "weights": None, "bias": None, "kernel": None, "stride": None}
    if layer.has_params:
        d["weights"] = layer.weight.ravel().tolist()
        d["weight_shape"] = list(layer.weight.shape)
        d["bias"] = None if layer.bias is None else layer.bias.tolist()
    elif layer.kind in ("MaxPool2D", "AvgPool2D"):
        d["kernel"] = layer.kernel
        d["stride"] = layer.stride
    return d


def model_to_dict(model: Model) -> dict:
    return {
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "layers": [_layer_to_dict(layer) for layer in model.layers],
    }


def _infer_weight_shape(kind, n, in_shape, kernel):
    if kind == "Dense":
        if len(in_shape) != 1:
            raise ShapeError(f"Dense needs a vector input, got shape {tuple(in_shape)}")
        fan_in = in_shape[0]
        if n % fan_in:
            raise ShapeError(f"{n} Dense weights do not fit fan_in {fan_in}")
        return (fan_in, n // fan_in)
    if kernel is None:
        raise ModelFormatError("Conv2D without weight_shape needs 'kernel'")
    if len(in_shape) != 3:
        raise ShapeError(f"Conv2D needs a (C, H, W) input, got shape {tuple(in_shape)}")
    per_out = in_shape[0] * kernel * kernel
    if n % per_out:
        raise ShapeError(f"{n} Conv2D weights do not fit {in_shape[0]} input channels")
    return (n // per_out, in_shape[0], kernel, kernel)


def model_from_dict(d: dict) -> Model:
    try:
        input_shape = tuple(int(s) for s in d["input_shape"])
        num_classes = int(d["num_classes"])
        raw_layers = d["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from None
    if not isinstance(raw_layers, list) or not raw_layers:
        raise ShapeError("a model needs at least one layer")
    layers = []
    shape = input_shape
    for i, ld in enumerate(raw_layers):
        kind = ld.get("kind")
        if kind not in _KINDS:
            raise ModelFormatError(f"layer {i}: unknown kind {kind!r}")
        cls = _KINDS[kind]
        if cls.has_params:
            if ld.get("weights") is None:
                raise ModelFormatError(f"layer {i}: {kind} needs weights")
            w = np.asarray(ld["weights"], dtype=np.float64)
            wshape = ld.get("weight_shape")
            if wshape is None:
                wshape = _infer_weight_shape(kind, w.size, shape, ld.get("kernel"))
            wshape = tuple(int(s) for s in wshape)
            if int(np.prod(wshape)) != w.size:
                raise ModelFormatError(f"layer {i}: {w.size} weights do not fill {wshape}")
            bias = ld.get("bias")
            layer = cls(w.reshape(wshape), None if bias is None else np.asarray(bias, float))
        elif kind in ("MaxPool2D", "AvgPool2D"):
            if ld.get("kernel") is None:
                raise ModelFormatError(f"layer {i}: {kind} needs 'kernel'")
            layer = cls(int(ld["kernel"]), None if ld.get("stride") is None else int(ld["stride"]))
        else:
            layer = cls()
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({kind}): {exc}") from None
        layers.append(layer)
    return Model(layers, input_shape, num_classes)


def save_model(model: Model, path) -> None:
    Path(path).write_text(dumps_model(model))


def dumps_model(model: Model) -> str:
    d = model_to_dict(model)
    # weights go out with 17 significant digits so loading is bit-exact
    parts = []
    for ld in d["layers"]:
        items = []
        for key, val in ld.items():
            if key in ("weights", "bias") and val is not None:
                items.append(f'"{key}": {format_floats(val)}')
            else:
                items.append(f'"{key}": {json.dumps(val)}')
        parts.append("{" + ", ".join(items) + "}")
    return (
        "{"
        f'"input_shape": {json.dumps(d["input_shape"])}, '
        f'"num_classes": {d["num_classes"]}, '
        '"layers": [\n  ' + ",\n  ".join(parts) + "\n]}\n"
    )


def load_model(path) -> Model:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ModelFormatError(f"{path}: expected a JSON object")
    return model_from_dict(d)
