"""Minimal CNN engine: forward, exact analytic backprop, and SGD in numpy.

Supports the layer kinds needed by the simulator: valid convolution
(stride 1), 2x2/stride-2 max pooling (odd trailing rows/columns dropped),
flatten, dense, and a softmax output head trained with mean cross-entropy.
ReLU is structural rather than a layer: it is applied after every Conv and
after every Dense except the one feeding SoftmaxOutput.

All arithmetic is float64 and single-threaded (np.einsum with the default
non-optimized path), so identical inputs produce bit-identical outputs
regardless of how many runs execute concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DescriptorError, LabelRangeError, LayoutError, ShapeError

CONV = "conv"
MAXPOOL = "maxpool"
FLATTEN = "flatten"
DENSE = "dense"
SOFTMAX_OUTPUT = "softmax_output"


@dataclass(frozen=True)
class TensorShape:
    """Shape of one activation tensor, e.g. (channels, height, width)."""

    dims: tuple[int, ...]

    def __post_init__(self):
        if not self.dims or any(d < 1 for d in self.dims):
            raise DescriptorError(f"all dims must be >= 1, got {self.dims}")

    @property
    def element_count(self) -> int:
        return math.prod(self.dims)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: tuple[int, int] = (0, 0)
    width: int = 0


def conv(filters: int, kernel_h: int, kernel_w: int) -> LayerSpec:
    """Valid convolution, stride 1, ReLU applied to the result."""
    if filters < 1 or kernel_h < 1 or kernel_w < 1:
        raise DescriptorError("conv needs filters >= 1 and kernel dims >= 1")
    return LayerSpec(CONV, filters=filters, kernel=(kernel_h, kernel_w))


def maxpool() -> LayerSpec:
    """2x2 max pool, stride 2; odd trailing rows/columns are dropped."""
    return LayerSpec(MAXPOOL)


def flatten() -> LayerSpec:
    return LayerSpec(FLATTEN)


def dense(width: int) -> LayerSpec:
    if width < 1:
        raise DescriptorError("dense width must be >= 1")
    return LayerSpec(DENSE, width=width)


def softmax_output() -> LayerSpec:
    return LayerSpec(SOFTMAX_OUTPUT)


@dataclass(frozen=True)
class ModelDescriptor:
    """An architecture: input shape, ordered layers, and class count."""

    input_shape: TensorShape
    layers: tuple[LayerSpec, ...]
    class_count: int


@dataclass(frozen=True)
class ParamView:
    """One trainable layer's slice of the flat parameter vector."""

    layer_index: int
    offset: int
    length: int


@dataclass
class ParameterVector:
    """Flat float64 vector of all trainable weights, with per-layer views."""

    values: np.ndarray
    layout: tuple[ParamView, ...]

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)


# Gradients share the exact layout of the parameters they differentiate.
GradientVector = ParameterVector


def layer_output_shapes(descriptor: ModelDescriptor) -> list[tuple[int, ...]]:
    """Shape after each layer; raises DescriptorError on any mismatch."""
    shape = descriptor.input_shape.dims
    shapes = []
    for i, layer in enumerate(descriptor.layers):
        if layer.kind == CONV:
            if len(shape) != 3:
                raise DescriptorError(f"layer {i}: conv needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            kh, kw = layer.kernel
            oh, ow = h - kh + 1, w - kw + 1
            if oh < 1 or ow < 1:
                raise DescriptorError(f"layer {i}: kernel {layer.kernel} too large for {h}x{w}")
            shape = (layer.filters, oh, ow)
        elif layer.kind == MAXPOOL:
            if len(shape) != 3:
                raise DescriptorError(f"layer {i}: maxpool needs a (C, H, W) input, got {shape}")
            c, h, w = shape
            if h // 2 < 1 or w // 2 < 1:
                raise DescriptorError(f"layer {i}: maxpool output would be empty for {h}x{w}")
            shape = (c, h // 2, w // 2)
        elif layer.kind == FLATTEN:
            shape = (math.prod(shape),)
        elif layer.kind == DENSE:
            if len(shape) != 1:
                raise DescriptorError(f"layer {i}: dense needs a flat input, got {shape}")
            shape = (layer.width,)
        elif layer.kind == SOFTMAX_OUTPUT:
            if len(shape) != 1:
                raise DescriptorError(f"layer {i}: softmax needs a flat input, got {shape}")
        else:
            raise DescriptorError(f"layer {i}: unknown kind {layer.kind!r}")
        shapes.append(shape)
    return shapes


def validate_model(descriptor: ModelDescriptor) -> list[tuple[int, ...]]:
    """Full structural check for a trainable classifier.

    Beyond shape chaining: the model must end with Dense(class_count)
    followed by SoftmaxOutput, every Conv must be followed by MaxPool, and
    SoftmaxOutput may appear only at the end.
    """
    shapes = layer_output_shapes(descriptor)
    layers = descriptor.layers
    if descriptor.class_count < 1:
        raise DescriptorError("class_count must be >= 1")
    if len(layers) < 2 or layers[-1].kind != SOFTMAX_OUTPUT or layers[-2].kind != DENSE:
        raise DescriptorError("model must end with Dense(class_count) + SoftmaxOutput")
    if layers[-2].width != descriptor.class_count:
        raise DescriptorError(
            f"final dense width {layers[-2].width} != class_count {descriptor.class_count}"
        )
    for i, layer in enumerate(layers[:-1]):
        if layer.kind == SOFTMAX_OUTPUT:
            raise DescriptorError(f"layer {i}: softmax output allowed only as the last layer")
        if layer.kind == CONV and (i + 1 >= len(layers) or layers[i + 1].kind != MAXPOOL):
            raise DescriptorError(f"layer {i}: every conv must be followed by maxpool")
    return shapes


@dataclass(frozen=True)
class _LayerPlan:
    spec: LayerSpec
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    w_slice: slice = field(default=slice(0, 0))
    w_shape: tuple[int, ...] = ()
    b_slice: slice = field(default=slice(0, 0))
    relu: bool = False


def _plan(descriptor: ModelDescriptor, *, full: bool) -> list[_LayerPlan]:
    shapes = validate_model(descriptor) if full else layer_output_shapes(descriptor)
    plans: list[_LayerPlan] = []
    offset = 0
    in_shape = descriptor.input_shape.dims
    for i, layer in enumerate(descriptor.layers):
        out_shape = shapes[i]
        if layer.kind == CONV:
            c = in_shape[0]
            kh, kw = layer.kernel
            w_len = layer.filters * c * kh * kw
            plans.append(
                _LayerPlan(
                    layer,
                    in_shape,
                    out_shape,
                    slice(offset, offset + w_len),
                    (layer.filters, c, kh, kw),
                    slice(offset + w_len, offset + w_len + layer.filters),
                    relu=True,
                )
            )
            offset += w_len + layer.filters
        elif layer.kind == DENSE:
            in_w = in_shape[0]
            w_len = in_w * layer.width
            # Hidden dense layers get ReLU; the final Dense feeds the softmax.
            is_output = i + 1 < len(descriptor.layers) and (
                descriptor.layers[i + 1].kind == SOFTMAX_OUTPUT
            )
            plans.append(
                _LayerPlan(
                    layer,
                    in_shape,
                    out_shape,
                    slice(offset, offset + w_len),
                    (in_w, layer.width),
                    slice(offset + w_len, offset + w_len + layer.width),
                    relu=not is_output,
                )
            )
            offset += w_len + layer.width
        else:
            plans.append(_LayerPlan(layer, in_shape, out_shape))
        in_shape = out_shape
    return plans


def parameter_layout(descriptor: ModelDescriptor) -> tuple[ParamView, ...]:
    views = []
    for i, plan in enumerate(_plan(descriptor, full=False)):
        if plan.w_shape:
            length = (plan.w_slice.stop - plan.w_slice.start) + (
                plan.b_slice.stop - plan.b_slice.start
            )
            views.append(ParamView(i, plan.w_slice.start, length))
    return tuple(views)


def parameter_count(descriptor: ModelDescriptor) -> int:
    """Total trainable scalars (weights + biases) in the descriptor."""
    views = parameter_layout(descriptor)
    return sum(v.length for v in views)


def init_parameters(
    descriptor: ModelDescriptor, rng: np.random.Generator | int
) -> ParameterVector:
    """Glorot-uniform weights (U(-s, s), s = sqrt(6/(fan_in+fan_out))), zero biases."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    plans = _plan(descriptor, full=True)
    total = sum(
        (p.w_slice.stop - p.w_slice.start) + (p.b_slice.stop - p.b_slice.start) for p in plans
    )
    values = np.zeros(total, dtype=np.float64)
    for plan in plans:
        if not plan.w_shape:
            continue
        if plan.spec.kind == CONV:
            f, c, kh, kw = plan.w_shape
            fan_in, fan_out = c * kh * kw, f * kh * kw
        else:
            fan_in, fan_out = plan.w_shape
        s = math.sqrt(6.0 / (fan_in + fan_out))
        n = plan.w_slice.stop - plan.w_slice.start
        values[plan.w_slice] = rng.uniform(-s, s, size=n)
    return ParameterVector(values, parameter_layout(descriptor))


def _check_params(descriptor: ModelDescriptor, params: ParameterVector) -> None:
    expected = parameter_count(descriptor)
    if params.values.shape != (expected,):
        raise LayoutError(
            f"parameter vector has shape {params.values.shape}, descriptor needs ({expected},)"
        )


def _check_batch(descriptor: ModelDescriptor, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    want = descriptor.input_shape.dims
    if batch.ndim != len(want) + 1 or batch.shape[1:] != want:
        raise ShapeError(f"batch shape {batch.shape} does not match (B, {', '.join(map(str, want))})")
    return batch


def _check_labels(labels: np.ndarray, batch_size: int, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch_size,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {batch_size}")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise LabelRangeError(f"labels must lie in [0, {class_count})")
    return labels.astype(np.int64)


def _conv_patches(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (B, C, H', W', kh, kw) view over the input, no copy.
    return np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))


def _forward_pass(plans: list[_LayerPlan], values: np.ndarray, batch: np.ndarray):
    """Run all layers; returns (probs, logp, caches) with caches for backprop."""
    x = batch
    caches: list[tuple] = []
    probs = logp = None
    for plan in plans:
        kind = plan.spec.kind
        if kind == CONV:
            w = values[plan.w_slice].reshape(plan.w_shape)
            b = values[plan.b_slice]
            patches = _conv_patches(x, plan.w_shape[2], plan.w_shape[3])
            z = np.einsum("bchwij,fcij->bfhw", patches, w) + b[None, :, None, None]
            caches.append((x, z))
            x = np.maximum(z, 0.0)
        elif kind == MAXPOOL:
            bsz, c, h, w_ = x.shape
            h2, w2 = h // 2, w_ // 2
            windows = (
                x[:, :, : 2 * h2, : 2 * w2]
                .reshape(bsz, c, h2, 2, w2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(bsz, c, h2, w2, 4)
            )
            arg = windows.argmax(axis=-1)
            caches.append((x.shape, arg))
            x = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        elif kind == FLATTEN:
            caches.append((x.shape,))
            x = x.reshape(x.shape[0], -1)
        elif kind == DENSE:
            w = values[plan.w_slice].reshape(plan.w_shape)
            b = values[plan.b_slice]
            z = np.einsum("bi,io->bo", x, w) + b[None, :]
            caches.append((x, z))
            x = np.maximum(z, 0.0) if plan.relu else z
        else:  # SOFTMAX_OUTPUT
            m = x.max(axis=1, keepdims=True)
            shifted = x - m
            e = np.exp(shifted)
            total = e.sum(axis=1, keepdims=True)
            probs = e / total
            logp = shifted - np.log(total)
            caches.append(())
    return probs, logp, caches


def _backward_pass(
    plans: list[_LayerPlan],
    values: np.ndarray,
    caches: list[tuple],
    dlogits: np.ndarray,
    *,
    want_input_grad: bool,
):
    grads = np.zeros_like(values)
    d = dlogits
    for plan, cache in zip(reversed(plans), reversed(caches)):
        kind = plan.spec.kind
        if kind == SOFTMAX_OUTPUT:
            continue  # dlogits already differentiates through softmax + CE
        if kind == DENSE:
            x, z = cache
            dz = d * (z > 0.0) if plan.relu else d
            w = values[plan.w_slice].reshape(plan.w_shape)
            grads[plan.w_slice] += np.einsum("bi,bo->io", x, dz).ravel()
            grads[plan.b_slice] += dz.sum(axis=0)
            d = np.einsum("bo,io->bi", dz, w)
        elif kind == FLATTEN:
            (in_shape,) = cache
            d = d.reshape(in_shape)
        elif kind == MAXPOOL:
            in_shape, arg = cache
            bsz, c, h, w_ = in_shape
            h2, w2 = h // 2, w_ // 2
            dwin = np.zeros((bsz, c, h2, w2, 4), dtype=np.float64)
            np.put_along_axis(dwin, arg[..., None], d[..., None], axis=-1)
            dx = np.zeros(in_shape, dtype=np.float64)
            dx[:, :, : 2 * h2, : 2 * w2] = (
                dwin.reshape(bsz, c, h2, w2, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(bsz, c, 2 * h2, 2 * w2)
            )
            d = dx
        elif kind == CONV:
            x, z = cache
            dz = d * (z > 0.0)
            w = values[plan.w_slice].reshape(plan.w_shape)
            f, c, kh, kw = plan.w_shape
            patches = _conv_patches(x, kh, kw)
            grads[plan.w_slice] += np.einsum("bfhw,bchwij->fcij", dz, patches).ravel()
            grads[plan.b_slice] += dz.sum(axis=(0, 2, 3))
            if want_input_grad or plan is not plans[0]:
                padded = np.pad(dz, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
                windows = _conv_patches(padded, kh, kw)
                d = np.einsum("bfhwij,fcij->bchw", windows, w[:, :, ::-1, ::-1])
    return grads, d


def forward(
    descriptor: ModelDescriptor, params: ParameterVector, batch: np.ndarray
) -> np.ndarray:
    """Class probabilities, one row per sample; each row sums to 1."""
    plans = _plan(descriptor, full=True)
    _check_params(descriptor, params)
    batch = _check_batch(descriptor, batch)
    probs, _, _ = _forward_pass(plans, params.values, batch)
    return probs


def predict_labels(
    descriptor: ModelDescriptor, params: ParameterVector, inputs: np.ndarray
) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    return np.argmax(forward(descriptor, params, inputs), axis=1)


def loss_and_param_gradients(
    descriptor: ModelDescriptor,
    params: ParameterVector,
    batch: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, GradientVector]:
    """Mean cross-entropy over the batch and its exact parameter gradient."""
    plans = _plan(descriptor, full=True)
    _check_params(descriptor, params)
    batch = _check_batch(descriptor, batch)
    labels = _check_labels(labels, batch.shape[0], descriptor.class_count)
    probs, logp, caches = _forward_pass(plans, params.values, batch)
    n = batch.shape[0]
    loss = float(-logp[np.arange(n), labels].sum() / n)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    grads, _ = _backward_pass(plans, params.values, caches, dlogits, want_input_grad=False)
    return loss, GradientVector(grads, params.layout)


def input_gradients(
    descriptor: ModelDescriptor,
    params: ParameterVector,
    batch: np.ndarray,
    labels: np.ndarray,
) -> np.ndarray:
    """Gradient of the mean cross-entropy w.r.t. every input pixel.

    Per-sample gradients are independent, so the sign pattern of each row
    matches the single-sample gradient's.
    """
    plans = _plan(descriptor, full=True)
    _check_params(descriptor, params)
    batch = _check_batch(descriptor, batch)
    labels = _check_labels(labels, batch.shape[0], descriptor.class_count)
    probs, _, caches = _forward_pass(plans, params.values, batch)
    n = batch.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    _, dx = _backward_pass(plans, params.values, caches, dlogits, want_input_grad=True)
    if dx.shape != batch.shape:  # dense-only model: undo the flatten
        dx = dx.reshape(batch.shape)
    return dx


def input_gradient(
    descriptor: ModelDescriptor,
    params: ParameterVector,
    sample: np.ndarray,
    label: int,
) -> np.ndarray:
    """Loss gradient w.r.t. one sample's pixels, shaped like the input."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape != descriptor.input_shape.dims:
        raise ShapeError(
            f"sample shape {sample.shape} does not match input {descriptor.input_shape.dims}"
        )
    return input_gradients(descriptor, params, sample[None], np.asarray([label]))[0]


def sgd_step(params: ParameterVector, grads: GradientVector, lr: float) -> ParameterVector:
    """One gradient-descent step: params - lr * grads, elementwise."""
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    if params.values.shape != grads.values.shape:
        raise LayoutError(
            f"params length {params.values.shape} != grads length {grads.values.shape}"
        )
    return ParameterVector(params.values - lr * grads.values, params.layout)
