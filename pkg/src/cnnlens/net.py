"""From-scratch CNN engine with controllable ReLU masks.

The engine runs small feedforward stacks (conv / relu / maxpool / dense /
dropout) in float64, records every intermediate activation, and lets callers
*override* the binary masks at three named sites:

- ``pool``: the output of the last max-pool layer,
- ``fc1``:  the relu after the first fully-connected layer,
- ``fc2``:  the relu after the second fully-connected layer.

At an overridden fc site the linear pre-activation is multiplied elementwise
by the imposed mask instead of being thresholded, so a mask carves a fixed
linear sub-network ("pathway") out of the classifier head.  At the pool site
the override multiplies the pooled tensor directly.

All arrays are numpy float64; layouts are channels-last (H, W, C) for images
and (kh, kw, in_c, out_c) for conv kernels.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, ValidationError

__all__ = [
    "Conv",
    "Relu",
    "MaxPool",
    "Dense",
    "Dropout",
    "NetworkSpec",
    "NetworkWeights",
    "MaskSet",
    "ForwardTrace",
    "TrainConfig",
    "init_weights",
    "forward",
    "backward_to_input",
    "train_toy",
    "accuracy",
    "predict_logits",
    "save_weights",
    "load_weights",
    "receptive_field",
]

MASK_SITES = ("pool", "fc1", "fc2")


# ---------------------------------------------------------------------------
# layer descriptors and network spec


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Dropout:
    rate: float


Layer = Conv | Relu | MaxPool | Dense | Dropout


def _walk_shapes(layers, input_shape):
    """Output shape of every layer, validating consistency as we go."""
    shape = tuple(input_shape)
    shapes = []
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv):
            if len(shape) != 3 or shape[2] != layer.in_channels:
                raise ValidationError(
                    f"layer {i} (conv): expects {layer.in_channels} channels, "
                    f"input shape is {shape}"
                )
            h = (shape[0] + 2 * layer.pad - layer.kernel) // layer.stride + 1
            w = (shape[1] + 2 * layer.pad - layer.kernel) // layer.stride + 1
            if h <= 0 or w <= 0:
                raise ValidationError(f"layer {i} (conv): kernel larger than input {shape}")
            shape = (h, w, layer.out_channels)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise ValidationError(f"layer {i} (maxpool): needs a spatial input, got {shape}")
            h = (shape[0] - layer.window) // layer.stride + 1
            w = (shape[1] - layer.window) // layer.stride + 1
            if h <= 0 or w <= 0:
                raise ValidationError(f"layer {i} (maxpool): window larger than input {shape}")
            shape = (h, w, shape[2])
        elif isinstance(layer, Dense):
            flat = int(np.prod(shape))
            if flat != layer.in_dim:
                raise ValidationError(
                    f"layer {i} (dense): expects in_dim {layer.in_dim}, input flattens to {flat}"
                )
            shape = (layer.out_dim,)
        elif isinstance(layer, (Relu, Dropout)):
            if isinstance(layer, Dropout) and not 0.0 < layer.rate < 1.0:
                raise ValidationError(f"layer {i} (dropout): rate must be in (0, 1)")
        else:
            raise ValidationError(f"layer {i}: unknown layer type {layer!r}")
        shapes.append(shape)
    return shapes


@dataclass(frozen=True)
class NetworkSpec:
    """Layer stack plus the input geometry it applies to."""

    layers: tuple
    class_count: int
    input_shape: tuple  # (H, W, C)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        shapes = _walk_shapes(self.layers, self.input_shape)
        if not shapes:
            raise ValidationError("empty layer list")
        if int(np.prod(shapes[-1])) != self.class_count:
            raise ValidationError(
                f"class_count {self.class_count} does not match final output {shapes[-1]}"
            )
        object.__setattr__(self, "_shapes", tuple(shapes))

    def output_shape(self, layer_index: int) -> tuple:
        return self._shapes[layer_index]

    @property
    def dense_indices(self) -> tuple:
        return tuple(i for i, l in enumerate(self.layers) if isinstance(l, Dense))

    @property
    def last_pool_index(self):
        pools = [i for i, l in enumerate(self.layers) if isinstance(l, MaxPool)]
        return pools[-1] if pools else None

    def mask_site_index(self, site: str):
        """Layer index whose output the named mask attaches to, or None."""
        if site == "pool":
            return self.last_pool_index
        dense = self.dense_indices
        rank = {"fc1": 0, "fc2": 1}[site]
        if len(dense) <= rank:
            return None
        i = dense[rank]
        if i + 1 < len(self.layers) and isinstance(self.layers[i + 1], Relu):
            return i + 1
        return None


def has_canonical_head(spec: NetworkSpec) -> bool:
    """True when the stack ends in dense-relu-dense-relu-dense (dropout allowed)."""
    dense = spec.dense_indices
    if len(dense) != 3:
        return False
    idxs = [
        i
        for i in range(dense[0], len(spec.layers))
        if not isinstance(spec.layers[i], Dropout)
    ]
    pattern = (Dense, Relu, Dense, Relu, Dense)
    if len(idxs) != len(pattern):
        return False
    if not all(isinstance(spec.layers[i], k) for i, k in zip(idxs, pattern)):
        return False
    return idxs[-1] == len(spec.layers) - 1


def require_canonical_head(spec: NetworkSpec) -> None:
    if not has_canonical_head(spec):
        raise ValidationError(
            "network must end with three dense layers (relu after the first two)"
        )


# ---------------------------------------------------------------------------
# weights and masks


@dataclass(frozen=True)
class NetworkWeights:
    """Per-layer parameter tensors, keyed by layer index."""

    params: dict  # layer index -> (weight, bias)

    def param_layers(self):
        return sorted(self.params)

    def check_against(self, spec: NetworkSpec) -> None:
        expected = {
            i: l for i, l in enumerate(spec.layers) if isinstance(l, (Conv, Dense))
        }
        if set(self.params) != set(expected):
            raise ValidationError(
                f"weights cover layers {sorted(self.params)}, spec has parameters "
                f"at {sorted(expected)}"
            )
        for i, layer in expected.items():
            w, b = self.params[i]
            want = _param_shapes(layer)
            if w.shape != want[0] or b.shape != want[1]:
                raise ValidationError(
                    f"layer {i}: parameter shapes {w.shape}/{b.shape} do not match "
                    f"spec {want[0]}/{want[1]}"
                )


def _param_shapes(layer):
    if isinstance(layer, Conv):
        return (
            (layer.kernel, layer.kernel, layer.in_channels, layer.out_channels),
            (layer.out_channels,),
        )
    return ((layer.out_dim, layer.in_dim), (layer.out_dim,))


def init_weights(spec: NetworkSpec, seed_or_rng) -> NetworkWeights:
    """Fan-in-scaled uniform init (variance 1/fan_in), zero biases.

    Each unit's incoming weights are re-centered to sum to zero so the unit
    ignores the DC component of its input at init; uncentered pixel data
    otherwise drives all units in lockstep and stalls training.
    """
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    params = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            fan_in = layer.kernel * layer.kernel * layer.in_channels
        elif isinstance(layer, Dense):
            fan_in = layer.in_dim
        else:
            continue
        wshape, bshape = _param_shapes(layer)
        a = np.sqrt(3.0 / fan_in)
        w = rng.uniform(-a, a, size=wshape)
        if isinstance(layer, Conv):
            w = w - w.mean(axis=(0, 1, 2), keepdims=True)
        else:
            w = w - w.mean(axis=1, keepdims=True)
        params[i] = (w, np.zeros(bshape))
    return NetworkWeights(params)


@dataclass(frozen=True)
class MaskSet:
    """Binary masks for the pool / fc1 / fc2 sites.

    A mask that is ``None`` is untouched.  ``overridden`` names the sites
    whose masks were imposed from outside rather than captured from the
    input; when constructed by hand it defaults to every non-None site.
    """

    pool: np.ndarray | None = None
    fc1: np.ndarray | None = None
    fc2: np.ndarray | None = None
    overridden: tuple = None

    def __post_init__(self):
        if self.overridden is None:
            names = tuple(s for s in MASK_SITES if getattr(self, s) is not None)
            object.__setattr__(self, "overridden", names)

    def get(self, site: str):
        return getattr(self, site)

    def is_overridden(self, site: str) -> bool:
        return site in self.overridden


def _as_mask(arr):
    m = np.asarray(arr, dtype=np.float64)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValidationError("mask entries must be 0 or 1")
    return m


def _override_for_site(spec, overrides, site):
    """Validated, site-shaped override mask, or None."""
    if overrides is None:
        return None
    m = overrides.get(site)
    if m is None:
        return None
    m = _as_mask(m)
    idx = spec.mask_site_index(site)
    if idx is None:
        raise ValidationError(f"network has no {site} mask site")
    want = spec.output_shape(idx)
    if site == "pool" and m.ndim == 2:
        # spatial-only pool masks broadcast across channels
        if m.shape != want[:2]:
            raise ValidationError(
                f"pool mask shape {m.shape} does not match grid {want[:2]}"
            )
        m = np.repeat(m[:, :, None], want[2], axis=2)
    if m.shape != want:
        raise ValidationError(
            f"{site} mask shape {m.shape} does not match layer output {want}"
        )
    return m


# ---------------------------------------------------------------------------
# batched layer primitives


def _conv_forward(x, kernel, bias, stride, pad):
    b, h, w, c = x.shape
    kh, kw, _, out_c = kernel.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: (B, oh, ow, C, kh, kw) -> columns ordered (kh, kw, C)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    oh, ow = cols.shape[1], cols.shape[2]
    kmat = kernel.reshape(kh * kw * c, out_c)
    y = cols.reshape(b * oh * ow, -1) @ kmat + bias
    return y.reshape(b, oh, ow, out_c), cols


def _conv_backward_input(dy, kernel, x_shape, stride, pad):
    b, h, w, c = x_shape
    kh, kw, _, out_c = kernel.shape
    oh, ow = dy.shape[1], dy.shape[2]
    kmat = kernel.reshape(kh * kw * c, out_c)
    dcols = dy.reshape(b * oh * ow, out_c) @ kmat.T
    dwin = dcols.reshape(b, oh, ow, kh, kw, c)
    dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + (oh - 1) * stride + 1 : stride,
                j : j + (ow - 1) * stride + 1 : stride] += dwin[:, :, :, i, j, :]
    return dxp[:, pad : pad + h, pad : pad + w, :] if pad else dxp


def _conv_param_grads(dy, cols, kernel_shape):
    kh, kw, c, out_c = kernel_shape
    b, oh, ow = dy.shape[:3]
    dyf = dy.reshape(b * oh * ow, out_c)
    dk = cols.reshape(b * oh * ow, -1).T @ dyf
    return dk.reshape(kernel_shape), dyf.sum(axis=0)


def _pool_forward(x, window, stride):
    b, h, w, c = x.shape
    win = sliding_window_view(x, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    flat = win.reshape(b, oh, ow, c, window * window)
    idx = flat.argmax(axis=4)
    y = np.take_along_axis(flat, idx[..., None], axis=4)[..., 0]
    return y, idx


def _pool_backward(dy, idx, x_shape, window, stride):
    b, h, w, c = x_shape
    oh, ow = dy.shape[1], dy.shape[2]
    dwin = np.zeros((b, oh, ow, c, window * window))
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=4)
    dwin = dwin.reshape(b, oh, ow, c, window, window)
    dx = np.zeros(x_shape)
    for i in range(window):
        for j in range(window):
            dx[:, i : i + (oh - 1) * stride + 1 : stride,
               j : j + (ow - 1) * stride + 1 : stride] += dwin[..., i, j]
    return dx


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardTrace:
    """Everything the forward pass saw: activations, masks, pool routing."""

    spec: NetworkSpec
    input: np.ndarray
    single: bool
    acts: list = field(repr=False, default_factory=list)
    pool_argmax: dict = field(repr=False, default_factory=dict)
    masks: MaskSet | None = None
    dropout_masks: dict = field(repr=False, default_factory=dict)

    def activation(self, layer_index: int) -> np.ndarray:
        a = self.acts[layer_index]
        return a[0] if self.single else a

    @property
    def logits(self) -> np.ndarray:
        return self.activation(len(self.acts) - 1)

    @property
    def pool_out(self) -> np.ndarray:
        idx = self.spec.last_pool_index
        if idx is None:
            raise ValidationError("network has no pool layer")
        return self.activation(idx)


def _squeeze_masks(masks, single):
    if not single:
        return masks
    out = {}
    for site in MASK_SITES:
        m = masks.get(site)
        out[site] = None if m is None else m[0]
    return MaskSet(**out, overridden=masks.overridden)


def forward(weights, spec, image, overrides=None, *, train_rng=None):
    """Run the stack, capturing or imposing masks at the named sites.

    ``image`` is (H, W, C) or a batch (B, H, W, C).  ``overrides`` is a
    MaskSet whose non-None entries replace the corresponding computed
    masks: at fc sites the linear pre-activation is multiplied by the mask
    (no relu), at the pool site the pooled tensor is multiplied.  Passing
    ``train_rng`` activates dropout layers (inverted scaling).
    """
    weights.check_against(spec)
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ValidationError(
            f"input shape {image.shape} does not match spec input {spec.input_shape}"
        )

    site_at = {spec.mask_site_index(s): s for s in MASK_SITES if spec.mask_site_index(s) is not None}
    ov = {s: _override_for_site(spec, overrides, s) for s in MASK_SITES}

    trace = ForwardTrace(spec=spec, input=image, single=single)
    b = x.shape[0]
    captured = {s: None for s in MASK_SITES}
    overridden = tuple(s for s in MASK_SITES if ov[s] is not None)

    h = x
    for i, layer in enumerate(spec.layers):
        site = site_at.get(i)
        if isinstance(layer, Conv):
            k, bias = weights.params[i]
            h, _ = _conv_forward(h, k, bias, layer.stride, layer.pad)
        elif isinstance(layer, MaxPool):
            h, idx = _pool_forward(h, layer.window, layer.stride)
            trace.pool_argmax[i] = idx
            if site == "pool":
                if ov["pool"] is not None:
                    h = h * ov["pool"][None]
                    captured["pool"] = np.broadcast_to(ov["pool"], h.shape).copy()
                else:
                    captured["pool"] = (h > 0).astype(np.float64)
        elif isinstance(layer, Relu):
            if site in ("fc1", "fc2") and ov[site] is not None:
                h = h * ov[site][None]
                captured[site] = np.broadcast_to(ov[site], h.shape).copy()
            else:
                mask = (h > 0).astype(np.float64)
                if site in ("fc1", "fc2"):
                    captured[site] = mask
                h = h * mask
        elif isinstance(layer, Dense):
            w, bias = weights.params[i]
            h = h.reshape(b, -1) @ w.T + bias
        elif isinstance(layer, Dropout):
            if train_rng is not None:
                keep = (train_rng.random(h.shape) >= layer.rate).astype(np.float64)
                trace.dropout_masks[i] = keep
                h = h * keep / (1.0 - layer.rate)
        trace.acts.append(h)

    if not np.all(np.isfinite(trace.acts[-1])):
        raise ValidationError("forward pass produced non-finite activations")
    trace.masks = _squeeze_masks(MaskSet(**captured, overridden=overridden), single)
    return trace


def _mask_for_backward(trace, site):
    m = trace.masks.get(site)
    if m is None:
        return None
    return m[None] if trace.single else m


def backward_to_input(trace, weights, spec, output_gradient, from_layer=None):
    """Pull a gradient at some layer's output back to the input image.

    Masks (captured or overridden) recorded in the trace gate the fc sites;
    max-pool routing reuses the argmax positions from the forward pass.
    """
    dinput, _ = _backprop(trace, weights, spec, output_gradient, from_layer, False)
    return dinput


def _backprop(trace, weights, spec, output_gradient, from_layer, want_param_grads):
    if from_layer is None:
        from_layer = len(spec.layers) - 1
    if trace.spec is not spec and trace.spec != spec:
        raise ValidationError("trace was produced by a different spec")
    g = np.asarray(output_gradient, dtype=np.float64)
    stored = trace.acts[from_layer]
    if trace.single and g.ndim == stored.ndim - 1:
        g = g[None]
    if g.shape != stored.shape:
        raise ValidationError(
            f"output gradient shape {output_gradient.shape} does not match "
            f"layer {from_layer} output {stored.shape}"
        )

    site_at = {spec.mask_site_index(s): s for s in MASK_SITES if spec.mask_site_index(s) is not None}
    xb = trace.input if not trace.single else np.asarray(trace.input)[None]
    param_grads = {}
    for i in range(from_layer, -1, -1):
        layer = spec.layers[i]
        below = trace.acts[i - 1] if i > 0 else xb
        site = site_at.get(i)
        if isinstance(layer, Conv):
            k, _ = weights.params[i]
            if want_param_grads:
                # recompute columns; cheaper than caching them in every trace
                _, cols = _conv_forward(below, k, np.zeros(k.shape[3]), layer.stride, layer.pad)
                param_grads[i] = _conv_param_grads(g, cols, k.shape)
            g = _conv_backward_input(g, k, below.shape, layer.stride, layer.pad)
        elif isinstance(layer, MaxPool):
            if site == "pool" and trace.masks.is_overridden("pool"):
                g = g * _mask_for_backward(trace, "pool")
            g = _pool_backward(g, trace.pool_argmax[i], below.shape, layer.window, layer.stride)
        elif isinstance(layer, Relu):
            if site in ("fc1", "fc2"):
                g = g * _mask_for_backward(trace, site)
            else:
                g = g * (below > 0)
        elif isinstance(layer, Dense):
            w, _ = weights.params[i]
            bflat = below.reshape(below.shape[0], -1)
            if want_param_grads:
                param_grads[i] = (g.T @ bflat, g.sum(axis=0))
            g = (g @ w).reshape(below.shape)
        elif isinstance(layer, Dropout):
            keep = trace.dropout_masks.get(i)
            if keep is not None:
                g = g * keep / (1.0 - layer.rate)
    return (g[0] if trace.single else g), param_grads


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    seed: int
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_toy(spec, images, labels, config: TrainConfig) -> NetworkWeights:
    """Train the stack with Adam on softmax cross-entropy.

    Deterministic given ``config.seed`` (one rng stream drives init, epoch
    shuffling, and dropout).  ``epochs == 0`` returns the initial weights.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 4 or len(images) == 0:
        raise ValidationError("dataset must be a non-empty (N, H, W, C) stack")
    if len(images) != len(labels):
        raise ValidationError("images and labels disagree on length")
    if labels.min() < 0 or labels.max() >= spec.class_count:
        raise ValidationError("labels out of range for spec.class_count")
    if config.learning_rate <= 0:
        raise ValidationError("learning rate must be positive")
    if config.epochs < 0:
        raise ValidationError("epochs must be >= 0")

    rng = np.random.default_rng(config.seed)
    weights = init_weights(spec, rng)
    moment1 = {i: [np.zeros_like(w), np.zeros_like(b)] for i, (w, b) in weights.params.items()}
    moment2 = {i: [np.zeros_like(w), np.zeros_like(b)] for i, (w, b) in weights.params.items()}
    n = len(images)
    eye = np.eye(spec.class_count)
    eps = 1e-8
    step = 0

    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            x, y = images[batch], labels[batch]
            trace = forward(weights, spec, x, train_rng=rng)
            probs = _softmax(trace.logits)
            dlogits = (probs - eye[y]) / len(batch)
            _, grads = _backprop(trace, weights, spec, dlogits, None, True)
            step += 1
            c1 = 1.0 - config.beta1 ** step
            c2 = 1.0 - config.beta2 ** step
            new_params = {}
            for i, wb in weights.params.items():
                updated = []
                for slot, (param, g) in enumerate(zip(wb, grads[i])):
                    m = moment1[i][slot] = config.beta1 * moment1[i][slot] + (1 - config.beta1) * g
                    v = moment2[i][slot] = config.beta2 * moment2[i][slot] + (1 - config.beta2) * g * g
                    updated.append(param - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + eps))
                new_params[i] = tuple(updated)
            weights = NetworkWeights(new_params)
    return weights


def predict_logits(weights, spec, images) -> np.ndarray:
    return forward(weights, spec, np.asarray(images, dtype=np.float64)).logits


def accuracy(weights, spec, images, labels) -> float:
    logits = predict_logits(weights, spec, images)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# serialization (magic "NPSW", version 1, little-endian)

WEIGHTS_MAGIC = b"NPSW"
WEIGHTS_VERSION = 1


def _layer_to_json(layer):
    if isinstance(layer, Conv):
        return {"kind": "conv", "in": layer.in_channels, "out": layer.out_channels,
                "kernel": layer.kernel, "stride": layer.stride, "pad": layer.pad}
    if isinstance(layer, Relu):
        return {"kind": "relu"}
    if isinstance(layer, MaxPool):
        return {"kind": "maxpool", "window": layer.window, "stride": layer.stride}
    if isinstance(layer, Dense):
        return {"kind": "dense", "in": layer.in_dim, "out": layer.out_dim}
    return {"kind": "dropout", "rate": layer.rate}


def _layer_from_json(d):
    kind = d["kind"]
    if kind == "conv":
        return Conv(d["in"], d["out"], d["kernel"], d["stride"], d["pad"])
    if kind == "relu":
        return Relu()
    if kind == "maxpool":
        return MaxPool(d["window"], d["stride"])
    if kind == "dense":
        return Dense(d["in"], d["out"])
    if kind == "dropout":
        return Dropout(d["rate"])
    raise FormatError(f"unknown layer kind {kind!r}")


def save_weights(path, weights: NetworkWeights, spec: NetworkSpec) -> None:
    """Write weights + embedded spec; round-trips bit-exactly."""
    weights.check_against(spec)
    header = {
        "layers": [_layer_to_json(l) for l in spec.layers],
        "class_count": spec.class_count,
        "input_shape": list(spec.input_shape),
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(WEIGHTS_VERSION.to_bytes(2, "little"))
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        for i in weights.param_layers():
            w, b = weights.params[i]
            f.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_weights(path):
    """Read a weight file back into (weights, spec); rejects corrupt files."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    version = int.from_bytes(buf.read(2), "little")
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    hlen_raw = buf.read(4)
    if len(hlen_raw) != 4:
        raise FormatError("truncated header length")
    hlen = int.from_bytes(hlen_raw, "little")
    blob = buf.read(hlen)
    if len(blob) != hlen:
        raise FormatError("truncated header block")
    try:
        header = json.loads(blob.decode("utf-8"))
        layers = tuple(_layer_from_json(d) for d in header["layers"])
        spec = NetworkSpec(layers, header["class_count"], tuple(header["input_shape"]))
    except (ValidationError, FormatError):
        raise
    except Exception as exc:
        raise FormatError(f"corrupt spec block: {exc}") from exc
    params = {}
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer, (Conv, Dense)):
            continue
        wshape, bshape = _param_shapes(layer)
        for shape, slot in ((wshape, 0), (bshape, 1)):
            nbytes = int(np.prod(shape)) * 8
            raw = buf.read(nbytes)
            if len(raw) != nbytes:
                raise FormatError(f"truncated parameters for layer {i}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            params.setdefault(i, [None, None])[slot] = arr
        params[i] = tuple(params[i])
    if buf.read(1):
        raise FormatError("trailing bytes after parameters")
    weights = NetworkWeights(params)
    weights.check_against(spec)
    return weights, spec


# ---------------------------------------------------------------------------
# receptive fields


def receptive_field(spec: NetworkSpec, layer_index: int, position) -> tuple:
    """Input rectangle feeding one spatial unit of a layer's output.

    Returns (row0, col0, n_rows, n_cols) clipped to the image bounds.
    ``position`` indexes the (row, col) grid of the layer's output.
    """
    shape = spec.output_shape(layer_index)
    if len(shape) != 3:
        raise ValidationError(f"layer {layer_index} output is not spatial")
    r, c = int(position[0]), int(position[1])
    if not (0 <= r < shape[0] and 0 <= c < shape[1]):
        raise ValidationError(f"position {position} outside grid {shape[:2]}")
    r0, r1, c0, c1 = r, r, c, c
    for i in range(layer_index, -1, -1):
        layer = spec.layers[i]
        if isinstance(layer, (Conv, MaxPool)):
            k = layer.kernel if isinstance(layer, Conv) else layer.window
            s = layer.stride
            p = layer.pad if isinstance(layer, Conv) else 0
            r0, r1 = r0 * s - p, r1 * s - p + k - 1
            c0, c1 = c0 * s - p, c1 * s - p + k - 1
        elif isinstance(layer, Dense):
            raise ValidationError("receptive fields are undefined past a dense layer")
    h, w = spec.input_shape[:2]
    r0c, r1c = max(r0, 0), min(r1, h - 1)
    c0c, c1c = max(c0, 0), min(c1, w - 1)
    return (r0c, c0c, r1c - r0c + 1, c1c - c0c + 1)


def receptive_field_unclipped(spec: NetworkSpec, layer_index: int, position) -> tuple:
    """Like receptive_field but without clipping (may extend past borders)."""
    shape = spec.output_shape(layer_index)
    r, c = int(position[0]), int(position[1])
    if not (0 <= r < shape[0] and 0 <= c < shape[1]):
        raise ValidationError(f"position {position} outside grid {shape[:2]}")
    r0, r1, c0, c1 = r, r, c, c
    for i in range(layer_index, -1, -1):
        layer = spec.layers[i]
        if isinstance(layer, (Conv, MaxPool)):
            k = layer.kernel if isinstance(layer, Conv) else layer.window
            s = layer.stride
            p = layer.pad if isinstance(layer, Conv) else 0
            r0, r1 = r0 * s - p, r1 * s - p + k - 1
            c0, c1 = c0 * s - p, c1 * s - p + k - 1
    return (r0, c0, r1 - r0 + 1, c1 - c0 + 1)
