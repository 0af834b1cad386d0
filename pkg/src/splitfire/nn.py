"""Layer/model abstraction over the tensor kernels.

Defines the SmallVGG binary classifier (64x64x1 input, sigmoid head), binary
cross-entropy, plain SGD, the accuracy metric, finite-difference gradient
checking, and the versioned checkpoint format.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import BuildError, DimensionError, ValidationError
from .rng import SplitMix64, mix64

LAYER_KINDS = ("conv", "maxpool2", "flatten", "dense", "relu", "sigmoid")

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    conv_geom: T.ConvGeometry | None = None
    in_features: int | None = None
    out_features: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and self.conv_geom is None:
            raise ValidationError("conv layer needs a ConvGeometry")
        if self.kind == "dense" and (self.in_features is None or self.out_features is None):
            raise ValidationError("dense layer needs in_features and out_features")

    @property
    def has_params(self):
        return self.kind in ("conv", "dense")


def conv(in_channels, out_channels, kernel_h, kernel_w=None, stride=1, padding=0):
    kw = kernel_h if kernel_w is None else kernel_w
    geom = T.ConvGeometry(in_channels, out_channels, kernel_h, kw, stride, padding)
    return LayerSpec("conv", conv_geom=geom)


def maxpool2():
    return LayerSpec("maxpool2")


def flatten():
    return LayerSpec("flatten")


def dense(in_features, out_features):
    if in_features < 1 or out_features < 1:
        raise ValidationError("dense dims must be >= 1")
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


def relu():
    return LayerSpec("relu")


def sigmoid():
    return LayerSpec("sigmoid")


def small_vgg_specs():
    """VGG-style 3x3 stack sized for CPU training on 64x64 grayscale input."""
    return [
        conv(1, 8, 3),
        relu(),
        maxpool2(),
        conv(8, 16, 3),
        relu(),
        maxpool2(),
        flatten(),
        dense(3136, 64),
        relu(),
        dense(64, 1),
        sigmoid(),
    ]


# Front = first conv + relu; everything after runs server-side.
SMALL_VGG_CUT_INDEX = 2

DEFAULT_INPUT_SHAPE = (1, 64, 64)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")


def propagate_shapes(specs, input_shape):
    """Per-layer output shapes (batch dim excluded); raises BuildError on the
    first incompatible layer. Odd dims entering maxpool2 are floor-cropped."""
    shapes = []
    cur = tuple(input_shape)
    for i, spec in enumerate(specs):
        try:
            if spec.kind == "conv":
                if len(cur) != 3:
                    raise DimensionError(f"conv needs [C,H,W] input, got {list(cur)}")
                c, h, w = cur
                g = spec.conv_geom
                if c != g.in_channels:
                    raise DimensionError(f"conv expects {g.in_channels} channels, got {c}")
                oh, ow = g.out_size(h, w)
                cur = (g.out_channels, oh, ow)
            elif spec.kind == "maxpool2":
                if len(cur) != 3:
                    raise DimensionError(f"maxpool2 needs [C,H,W] input, got {list(cur)}")
                c, h, w = cur
                if h < 2 or w < 2:
                    raise DimensionError(f"maxpool2 needs spatial dims >= 2, got {h}x{w}")
                cur = (c, h // 2, w // 2)
            elif spec.kind == "flatten":
                cur = (int(np.prod(cur)),)
            elif spec.kind == "dense":
                if len(cur) != 1 or cur[0] != spec.in_features:
                    raise DimensionError(
                        f"dense expects [{spec.in_features}], got {list(cur)}"
                    )
                cur = (spec.out_features,)
            else:  # relu / sigmoid keep the shape
                pass
        except DimensionError as e:
            raise BuildError(f"layer {i} ({spec.kind}): {e}") from e
        shapes.append(cur)
    return shapes


@dataclass
class Model:
    """Ordered layers plus their parameter tensors.

    params[i] is [] for parameterless layers, [weights, bias] otherwise.
    """

    specs: list
    params: list
    input_shape: tuple
    dtype: object = np.float32
    output_shapes: list = field(default_factory=list)

    def __post_init__(self):
        if not self.output_shapes:
            self.output_shapes = propagate_shapes(self.specs, self.input_shape)

    def parameters(self):
        """Flat list of parameter tensors in layer order."""
        return [p for layer in self.params for p in layer]

    def replace_parameters(self, flat):
        """New nested params structure from a flat tensor list."""
        flat = list(flat)
        nested = []
        for layer in self.params:
            nested.append([flat.pop(0) for _ in layer])
        if flat:
            raise ValidationError("too many parameter tensors for this model")
        return nested


def _init_layer(spec, rng, dtype, init):
    if spec.kind == "conv":
        g = spec.conv_geom
        fan_in = g.in_channels * g.kernel_h * g.kernel_w
        kshape = (g.out_channels, g.in_channels, g.kernel_h, g.kernel_w)
        if init == "zero":
            k = np.zeros(kshape)
        elif init == "identity":
            raise ValidationError("identity init is only defined for dense layers")
        else:
            limit = math.sqrt(6.0 / fan_in)
            k = rng.uniform(-limit, limit, int(np.prod(kshape))).reshape(kshape)
        return [T.Tensor(k.astype(dtype)), T.Tensor(np.zeros(g.out_channels, dtype=dtype))]
    if spec.kind == "dense":
        d, k = spec.in_features, spec.out_features
        if init == "zero":
            w = np.zeros((d, k))
        elif init == "identity":
            if d != k:
                raise ValidationError("identity init needs square dense layers")
            w = np.eye(d)
        else:
            limit = math.sqrt(6.0 / d)
            w = rng.uniform(-limit, limit, d * k).reshape(d, k)
        return [T.Tensor(w.astype(dtype)), T.Tensor(np.zeros(k, dtype=dtype))]
    return []


def build_model(specs, input_shape=DEFAULT_INPUT_SHAPE, seed=0, dtype=np.float32, init="he"):
    """Instantiate a model; pure function of (specs, input_shape, seed, init).

    He-uniform init draws from a per-layer splitmix64 stream so that the same
    seed always yields bit-identical parameters. init="zero" and
    init="identity" are test hooks.
    """
    if init not in ("he", "zero", "identity"):
        raise ValidationError(f"unknown init mode {init!r}")
    shapes = propagate_shapes(specs, input_shape)
    params = []
    for i, spec in enumerate(specs):
        rng = SplitMix64(mix64(seed, 0xC0FFEE, i))
        params.append(_init_layer(spec, rng, dtype, init))
    return Model(list(specs), params, tuple(input_shape), dtype, shapes)


def forward(model, batch, keep_cache=True):
    """Run the model on a batch; returns (output, cache-for-backward).

    keep_cache=False is the inference path: no backward cache is built and
    the pool layers skip their argmax bookkeeping (cache is None then).
    """
    if batch.shape[1:] != tuple(model.input_shape):
        raise DimensionError(
            f"batch shape {list(batch.shape)} does not match input shape "
            f"{list(model.input_shape)}"
        )
    x = batch if batch.dtype == np.dtype(model.dtype) else batch.astype(model.dtype)
    cache = [] if keep_cache else None
    for spec, params in zip(model.specs, model.params):
        if spec.kind == "conv":
            x_in = x
            x, cols = T.conv2d_forward_cols(x, params[0], params[1], spec.conv_geom)
            if keep_cache:
                cache.append((x_in, cols))
        elif spec.kind == "maxpool2":
            n, c, h, w = x.shape
            if h % 2 or w % 2:  # floor rule: drop the trailing odd row/col
                x = T.Tensor(np.ascontiguousarray(x.data[:, :, : h - h % 2, : w - w % 2]))
            x, idx = T.maxpool2_forward(x, want_argmax=keep_cache)
            if keep_cache:
                cache.append((idx, (h, w)))
        elif spec.kind == "flatten":
            if keep_cache:
                cache.append(x.shape)
            x = T.Tensor(x.data.reshape(x.shape[0], -1))
        elif spec.kind == "dense":
            if keep_cache:
                cache.append(x)
            x = T.dense_forward(x, params[0], params[1])
        else:
            x = T.activation(x, spec.kind)
            if keep_cache:
                cache.append(x)
    return x, cache


def backward(model, cache, grad_out, need_input_grad=True):
    """Backprop grad_out through the whole model.

    Returns (param_grads nested like model.params, grad wrt the model input).
    With need_input_grad=False the input gradient of layer 0 is skipped (and
    returned as None) — callers training on raw data never use it, and for
    the first conv it is the single most expensive part of the backward pass.
    """
    g = grad_out
    param_grads = [None] * len(model.specs)
    for i in range(len(model.specs) - 1, -1, -1):
        spec, params, saved = model.specs[i], model.params[i], cache[i]
        if spec.kind == "conv":
            x_in, cols = saved
            g, gk, gb = T.conv2d_backward(
                x_in, params[0], g, spec.conv_geom, cols=cols,
                need_input_grad=need_input_grad or i > 0,
            )
            param_grads[i] = [gk, gb]
        elif spec.kind == "maxpool2":
            idx, (h, w) = saved
            g = T.maxpool2_backward(g, idx)
            if g.shape[2] != h or g.shape[3] != w:  # un-crop: odd edge gets zero grad
                full = np.zeros((g.shape[0], g.shape[1], h, w), dtype=g.dtype)
                full[:, :, : g.shape[2], : g.shape[3]] = g.data
                g = T.Tensor(full)
            param_grads[i] = []
        elif spec.kind == "flatten":
            g = T.Tensor(g.data.reshape(saved))
            param_grads[i] = []
        elif spec.kind == "dense":
            g, gw, gb = T.dense_backward(saved, params[0], g)
            param_grads[i] = [gw, gb]
        else:
            g = T.activation_backward(g, saved, spec.kind)
            param_grads[i] = []
    return param_grads, g


def bce_loss(pred, labels):
    """Mean binary cross-entropy with clamp; returns (loss, grad wrt pred)."""
    if pred.shape != labels.shape:
        raise DimensionError(
            f"pred shape {list(pred.shape)} != labels shape {list(labels.shape)}"
        )
    y = labels.data
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValidationError("labels must be exactly 0 or 1")
    n = pred.shape[0]
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / n)
    inside = (pred.data > BCE_CLAMP) & (pred.data < 1.0 - BCE_CLAMP)
    grad = np.where(inside, (-(y / p) + (1.0 - y) / (1.0 - p)) / n, 0.0)
    return loss, T.Tensor(grad.astype(pred.dtype))


def accuracy(pred, labels):
    """Fraction of samples with (pred >= 0.5) == label; ties count positive."""
    if pred.shape != labels.shape:
        raise DimensionError(
            f"pred shape {list(pred.shape)} != labels shape {list(labels.shape)}"
        )
    hits = (pred.data >= 0.5) == (labels.data >= 0.5)
    return float(hits.mean())


def sgd_step(params, grads, learning_rate):
    """p <- p - lr * g, elementwise; accepts flat or per-layer nested lists."""
    if not learning_rate > 0:
        raise ValidationError("learning_rate must be > 0")
    out = []
    for p, g in zip(params, grads, strict=True):
        if isinstance(p, list):
            out.append(sgd_step(p, g, learning_rate))
        else:
            if p.shape != g.shape:
                raise DimensionError(
                    f"param shape {list(p.shape)} != grad shape {list(g.shape)}"
                )
            out.append(T.Tensor(p.data - learning_rate * g.data.astype(p.dtype)))
    return out


def param_digest(params):
    """Stable hex digest of a (possibly nested) list of parameter tensors."""
    h = hashlib.sha256()
    stack = list(params)
    while stack:
        item = stack.pop(0)
        if isinstance(item, list):
            stack = item + stack
            continue
        h.update(str(item.shape).encode())
        h.update(item.data.tobytes())
    return h.hexdigest()


def grad_check(model, batch, labels, eps=1e-5, sample_size=200, seed=0):
    """Max relative error between analytic and central-difference gradients.

    Requires a float64 model; samples sample_size parameter coordinates from
    a seeded PRNG (all coordinates if the model is smaller than that). Each
    coordinate is estimated at eps and eps/2; coordinates where the two
    estimates disagree sit on a relu/maxpool kink, where finite differences
    are undefined, and are excluded from the maximum.
    """
    if np.dtype(model.dtype) != np.float64:
        raise ValidationError("grad_check requires a float64 model")
    pred, cache = forward(model, batch)
    _, grad_pred = bce_loss(pred, labels)
    nested, _ = backward(model, cache, grad_pred)
    analytic = np.concatenate(
        [g.data.ravel() for layer in nested for g in layer]
    ) if any(nested) else np.empty(0)

    arrays = [p.data.copy() for p in model.parameters()]
    sizes = [a.size for a in arrays]
    total = int(sum(sizes))
    if total == 0:
        return 0.0

    def loss_at():
        flat = [T.Tensor(a) for a in arrays]
        m = Model(model.specs, model.replace_parameters(flat), model.input_shape,
                  model.dtype, model.output_shapes)
        p, _ = forward(m, batch)
        loss, _ = bce_loss(p, labels)
        return loss

    rng = SplitMix64(mix64(seed, 0xFD))
    if total <= sample_size:
        coords = list(range(total))
    else:
        coords = sorted({rng.next_u64() % total for _ in range(3 * sample_size)})[:sample_size]
        while len(coords) < sample_size:
            c = rng.next_u64() % total
            if c not in coords:
                coords.append(c)

    bounds = np.cumsum([0] + sizes)
    worst = 0.0
    for c in coords:
        a_idx = int(np.searchsorted(bounds, c, side="right") - 1)
        off = c - bounds[a_idx]
        flat_view = arrays[a_idx].ravel()
        old = flat_view[off]

        def central(h):
            flat_view[off] = old + h
            up = loss_at()
            flat_view[off] = old - h
            down = loss_at()
            flat_view[off] = old
            return (up - down) / (2.0 * h)

        coarse = central(eps)
        numeric = central(eps / 2.0)
        if abs(coarse - numeric) > 1e-3 * max(abs(coarse), abs(numeric), 1e-6):
            continue  # kink between the two scales
        a = analytic[c]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst


def _binary_labels(shape, seed):
    rng = SplitMix64(mix64(seed, 0x1AB))
    flat = (rng.uniform(0.0, 1.0, int(np.prod(shape))) >= 0.5).astype(np.float64)
    return T.Tensor(flat.reshape(shape))


def gradcheck_suite(seed=13, eps=1e-5, sample_size=200):
    """Gradient-check every layer kind plus the full SmallVGG (float64).

    Returns {check name: max relative error vs central finite differences}.
    """
    cases = {
        "conv": ([conv(2, 3, 3), sigmoid()], (2, 6, 6)),
        "maxpool2": ([conv(1, 2, 3), maxpool2(), sigmoid()], (1, 6, 6)),
        "dense": ([flatten(), dense(12, 4), sigmoid()], (3, 2, 2)),
        "relu": ([conv(1, 2, 3), relu(), flatten(), dense(32, 2), sigmoid()], (1, 6, 6)),
        "sigmoid": ([flatten(), dense(8, 3), sigmoid()], (2, 2, 2)),
        "small_vgg": (small_vgg_specs(), DEFAULT_INPUT_SHAPE),
    }
    results = {}
    for i, (name, (specs, input_shape)) in enumerate(cases.items()):
        model = build_model(specs, input_shape, seed=mix64(seed, i), dtype=np.float64)
        rng = SplitMix64(mix64(seed, 0xBA7C, i))
        n = 2
        batch = T.Tensor(
            rng.uniform(-1.0, 1.0, n * int(np.prod(input_shape))).reshape(
                (n,) + tuple(input_shape)
            )
        )
        pred_shape = (n,) + tuple(model.output_shapes[-1])
        labels = _binary_labels(pred_shape, mix64(seed, 0x7AB, i))
        results[name] = grad_check(
            model, batch, labels, eps=eps, sample_size=sample_size, seed=mix64(seed, i)
        )
    return results


# --- checkpoint format -------------------------------------------------------

CHECKPOINT_MAGIC = "splitfire-model/1"


def _spec_to_dict(spec):
    d = {"kind": spec.kind}
    if spec.kind == "conv":
        g = spec.conv_geom
        d["geometry"] = [g.in_channels, g.out_channels, g.kernel_h, g.kernel_w,
                         g.stride, g.padding]
    elif spec.kind == "dense":
        d["features"] = [spec.in_features, spec.out_features]
    return d


def _spec_from_dict(d):
    kind = d["kind"]
    if kind == "conv":
        return conv(*d["geometry"][:4],
                    stride=d["geometry"][4], padding=d["geometry"][5])
    if kind == "dense":
        return dense(*d["features"])
    return LayerSpec(kind)


def save_model(model, path):
    """Write the checkpoint: one manifest line, then each parameter tensor in
    the wire encoding (float32 only)."""
    from .protocol import encode_tensor

    manifest = {
        "input_shape": list(model.input_shape),
        "layers": [_spec_to_dict(s) for s in model.specs],
    }
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {json.dumps(manifest, sort_keys=True)}\n".encode())
        for p in model.parameters():
            fh.write(encode_tensor(p))


def load_model(path):
    from .protocol import decode_tensor_stream

    with open(path, "rb") as fh:
        header = fh.readline().decode()
        if not header.startswith(CHECKPOINT_MAGIC + " "):
            raise ValidationError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
        manifest = json.loads(header[len(CHECKPOINT_MAGIC) + 1 :])
        blob = fh.read()
    specs = [_spec_from_dict(d) for d in manifest["layers"]]
    model = build_model(specs, tuple(manifest["input_shape"]), seed=0, init="zero")
    flat = decode_tensor_stream(blob, sum(len(layer) for layer in model.params))
    expected = [p.shape for p in model.parameters()]
    got = [t.shape for t in flat]
    if expected != got:
        raise ValidationError(f"{path}: checkpoint tensors do not match the manifest")
    return Model(specs, model.replace_parameters(flat), model.input_shape,
                 np.float32, model.output_shapes)
