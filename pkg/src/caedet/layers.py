"""Stateful layers, parameter storage and a finite-difference gradient check."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError, StateError

CONV2D = "Conv2D"
CONV2D_TRANSPOSE = "Conv2DTranspose"
DENSE = "Dense"
ACTIVATION = "Activation"
FLATTEN = "Flatten"
RESHAPE = "Reshape"
LAYER_KINDS = (CONV2D, CONV2D_TRANSPOSE, DENSE, ACTIVATION, FLATTEN, RESHAPE)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer.

    ``units`` is the output width of a Dense layer and the filter count of a
    (transposed) convolution. ``target_shape`` is the per-sample shape of a
    Reshape.
    """

    kind: str
    units: int | None = None
    kernel_size: tuple[int, int] = (3, 3)
    stride: int = 2
    activation: str | None = None
    target_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise DomainError(f"unknown layer kind {self.kind!r}")
        if self.kind in (CONV2D, CONV2D_TRANSPOSE, DENSE) and not (self.units and self.units > 0):
            raise DomainError(f"{self.kind} needs a positive units value")
        if self.kind == ACTIVATION and self.activation not in T.ACTIVATIONS:
            raise DomainError(f"activation must be one of {T.ACTIVATIONS}")
        if self.kind == RESHAPE and not self.target_shape:
            raise DomainError("Reshape needs target_shape")

    @property
    def has_params(self) -> bool:
        return self.kind in (CONV2D, CONV2D_TRANSPOSE, DENSE)

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape (batch axis excluded)."""
        in_shape = tuple(in_shape)
        if self.kind == CONV2D:
            h, w, _ = _hwc(in_shape)
            return -(-h // self.stride), -(-w // self.stride), self.units
        if self.kind == CONV2D_TRANSPOSE:
            h, w, _ = _hwc(in_shape)
            return h * self.stride, w * self.stride, self.units
        if self.kind == DENSE:
            if len(in_shape) != 1:
                raise DimensionError(f"Dense expects a flat input, got {in_shape}")
            return (self.units,)
        if self.kind == FLATTEN:
            return (math.prod(in_shape),)
        if self.kind == RESHAPE:
            if math.prod(in_shape) != math.prod(self.target_shape):
                raise DimensionError(f"cannot reshape {in_shape} to {self.target_shape}")
            return tuple(self.target_shape)
        return in_shape

    def param_shapes(self, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
        kh, kw = self.kernel_size
        if self.kind == CONV2D:
            return {"kernel": (kh, kw, _hwc(in_shape)[2], self.units), "bias": (self.units,)}
        if self.kind == CONV2D_TRANSPOSE:
            return {"kernel": (kh, kw, self.units, _hwc(in_shape)[2]), "bias": (self.units,)}
        if self.kind == DENSE:
            return {"kernel": (in_shape[0], self.units), "bias": (self.units,)}
        return {}


def _hwc(shape):
    if len(shape) != 3:
        raise DimensionError(f"expected an image shape (H, W, C), got {shape}")
    return shape


class Param:
    """A learnable tensor with its gradient slot and Adam moments."""

    __slots__ = ("value", "grad", "m", "v")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)


class ParamStore:
    """Ordered name -> Param mapping plus the shared optimizer step counter."""

    def __init__(self):
        self.params: OrderedDict[str, Param] = OrderedDict()
        self.t = 0

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self.params:
            raise DomainError(f"duplicate parameter name {name!r}")
        p = self.params[name] = Param(value)
        return p

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grads(self):
        for p in self.params.values():
            p.grad[...] = 0

    def reset_optimizer(self):
        self.t = 0
        for p in self.params.values():
            p.m[...] = 0
            p.v[...] = 0

    def count(self) -> int:
        return sum(p.value.size for p in self.params.values())


def init_params(spec: LayerSpec, in_shape, seed, dtype=np.float64) -> dict[str, np.ndarray]:
    """Glorot-uniform kernels and zero biases, reproducible from ``seed``.

    ``seed`` may be an int or any sequence accepted by ``np.random.default_rng``.
    """
    if not spec.has_params:
        raise DomainError(f"{spec.kind} has no parameters")
    shapes = spec.param_shapes(in_shape)
    kshape = shapes["kernel"]
    receptive = math.prod(kshape[:-2])
    fan_in, fan_out = receptive * kshape[-2], receptive * kshape[-1]
    if spec.kind == CONV2D_TRANSPOSE:
        # kernel is [kh, kw, out, in]
        fan_in, fan_out = fan_out, fan_in
    limit = T.glorot_limit(fan_in, fan_out)
    rng = np.random.default_rng(seed)
    kernel = rng.uniform(-limit, limit, size=kshape).astype(dtype)
    return {"kernel": kernel, "bias": np.zeros(shapes["bias"], dtype=dtype)}


class Layer:
    """One materialized LayerSpec. Forward caches what backward needs; backward consumes it."""

    def __init__(self, spec: LayerSpec, in_shape, name: str, store: ParamStore | None = None,
                 seed=0, dtype=np.float64):
        self.spec = spec
        self.name = name
        self.in_shape = tuple(in_shape)
        self.out_shape = spec.output_shape(self.in_shape)
        self.params: dict[str, Param] = {}
        if spec.has_params:
            store = store if store is not None else ParamStore()
            for pname, value in init_params(spec, self.in_shape, seed, dtype).items():
                self.params[pname] = store.add(f"{name}.{pname}", value)
        self.geometry = None
        if spec.kind in (CONV2D, CONV2D_TRANSPOSE):
            kh, kw = spec.kernel_size
            self.geometry = T.ConvGeometry(kh, kw, spec.stride, self.in_shape[2], spec.units)
        self._cache = None

    def __repr__(self):
        return f"Layer({self.name}: {self.spec.kind} {self.in_shape} -> {self.out_shape})"

    def _check_input(self, x):
        if tuple(x.shape[1:]) != self.in_shape:
            raise DimensionError(f"{self.name}: expected per-sample shape {self.in_shape}, got {tuple(x.shape[1:])}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_input(x)
        kind = self.spec.kind
        if kind == CONV2D:
            out = T.conv2d_forward(x, self.params["kernel"].value, self.params["bias"].value, self.geometry)
        elif kind == CONV2D_TRANSPOSE:
            out = T.conv_transpose2d_forward(x, self.params["kernel"].value, self.params["bias"].value, self.geometry)
        elif kind == DENSE:
            out = T.dense_forward(x, self.params["kernel"].value, self.params["bias"].value)
        elif kind == ACTIVATION:
            out = T.activation_forward(x, self.spec.activation)
        else:
            out = x.reshape((x.shape[0],) + self.out_shape)
        self._cache = x
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Return grad w.r.t. the input and add parameter gradients into their slots."""
        if self._cache is None:
            raise StateError(f"{self.name}: backward called without a preceding forward")
        x, self._cache = self._cache, None
        if tuple(grad_out.shape) != (x.shape[0],) + self.out_shape:
            raise DimensionError(f"{self.name}: grad_out shape {grad_out.shape} does not match output")
        kind = self.spec.kind
        if kind == ACTIVATION:
            return T.activation_vjp(x, self.spec.activation, grad_out)
        if kind in (FLATTEN, RESHAPE):
            return grad_out.reshape(x.shape)
        kernel = self.params["kernel"].value
        if kind == CONV2D:
            gx, gk, gb = T.conv2d_vjp(x, kernel, self.geometry, grad_out)
        elif kind == CONV2D_TRANSPOSE:
            gx, gk, gb = T.conv_transpose2d_vjp(x, kernel, self.geometry, grad_out)
        else:
            gx, gk, gb = T.dense_vjp(x, kernel, grad_out)
        self.params["kernel"].grad += gk
        self.params["bias"].grad += gb
        return gx


class Sequential:
    """Layers chained from ``in_shape``, sharing one ParamStore."""

    def __init__(self, specs, in_shape, seed=0, dtype=np.float64, prefix="layer", store=None):
        self.store = store if store is not None else ParamStore()
        self.layers: list[Layer] = []
        shape = tuple(in_shape)
        for i, spec in enumerate(specs):
            layer = Layer(spec, shape, f"{prefix}.{i}", self.store, seed=[seed, i], dtype=dtype)
            self.layers.append(layer)
            shape = layer.out_shape
        self.in_shape = tuple(in_shape)
        self.out_shape = shape

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def relative_error(analytic, numeric, floor=1e-12):
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||, floor).

    Measured per tensor rather than per element: entries far below the
    finite-difference noise floor (about 1e-11 for an O(1) loss at eps=1e-5)
    would otherwise dominate the statistic without saying anything about
    the correctness of the gradient.
    """
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


@dataclass
class GradCheckReport:
    max_relative_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)


def _central_differences(loss_value, arr, eps, coords):
    flat = arr.reshape(-1)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_value()
        flat[i] = orig - eps
        down = loss_value()
        flat[i] = orig
        out[k] = (up - down) / (2 * eps)
    return out


def grad_check(stack, x, loss, eps=1e-5, floor=1e-12, report=False, sample=None, seed=0):
    """Compare analytic gradients of ``loss(stack(x))`` with central differences.

    ``stack`` is a Sequential, a model, or any iterable of layers; ``loss`` maps
    the stack output to ``(value, grad_wrt_output)``. Every parameter and
    input element is perturbed by +-eps, unless ``sample`` caps the number of
    randomly chosen elements per tensor. Runs in float64. Returns the worst
    per-tensor relative error, or a GradCheckReport when ``report`` is true.
    """
    layers = list(stack)
    x = np.array(x, dtype=np.float64)
    rng = np.random.default_rng(seed)

    def run():
        out = x
        for layer in layers:
            out = layer.forward(out)
        return out

    def loss_value():
        return float(loss(run())[0])

    tensors = {}
    for layer in layers:
        for pname, p in layer.params.items():
            if p.value.dtype != np.float64:
                raise DomainError("grad_check requires float64 parameters")
            tensors[f"{layer.name}.{pname}"] = p
    for p in tensors.values():
        p.grad[...] = 0
    gx = loss(run())[1]
    for layer in reversed(layers):
        gx = layer.backward(gx)

    def pick(size):
        if sample is None or sample >= size:
            return np.arange(size)
        return np.sort(rng.choice(size, sample, replace=False))

    per_tensor = {}
    for name, p in tensors.items():
        coords = pick(p.value.size)
        numeric = _central_differences(loss_value, p.value, eps, coords)
        per_tensor[name] = relative_error(p.grad.reshape(-1)[coords], numeric, floor)
    coords = pick(x.size)
    numeric = _central_differences(loss_value, x, eps, coords)
    per_tensor["input"] = relative_error(gx.reshape(-1)[coords], numeric, floor)

    worst = max(per_tensor.values())
    return GradCheckReport(worst, per_tensor) if report else worst
