"""The lightweight CNN: configuration, parameters, forward and backward passes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ShapeMismatch
from . import layers as L

PAPER_PARAM_REFERENCE = 472_000  # "approximately 472K parameters"


@dataclass(frozen=True)
class NetworkConfig:
    input_channels: int = 3
    conv_widths: tuple = (64, 128, 128)
    kernel_size: int = 3
    dense_widths: tuple = (256, 128)
    output_units: int = 7
    activation: str = "relu"
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3
    image_size: int = 28

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(self.conv_widths))
        object.__setattr__(self, "dense_widths", tuple(self.dense_widths))
        object.__setattr__(self, "activation", self.activation.lower())
        if self.output_units != 7:
            raise ValueError("output_units must be 7")
        if len(self.conv_widths) != 3 or len(self.dense_widths) != 2:
            raise ValueError("expected three conv widths and two dense widths")
        if self.input_channels not in (2, 3):
            raise ValueError("input_channels must be 2 or 3")
        if self.activation not in L.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        d["dense_widths"] = list(self.dense_widths)
        return d

    @property
    def flat_features(self) -> int:
        s = self.image_size
        for _ in self.conv_widths:
            s //= 2
        return s * s * self.conv_widths[-1]


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple]:
    """Trainable tensor shapes in a fixed (manifest) order."""
    shapes = {}
    cin, k = cfg.input_channels, cfg.kernel_size
    for i, cout in enumerate(cfg.conv_widths, 1):
        shapes[f"conv{i}/kernel"] = (k, k, cin, cout)
        shapes[f"conv{i}/bias"] = (cout,)
        shapes[f"bn{i}/gamma"] = (cout,)
        shapes[f"bn{i}/beta"] = (cout,)
        cin = cout
    fin = cfg.flat_features
    for i, units in enumerate(cfg.dense_widths, 1):
        shapes[f"dense{i}/kernel"] = (fin, units)
        shapes[f"dense{i}/bias"] = (units,)
        fin = units
    shapes["output/kernel"] = (fin, cfg.output_units)
    shapes["output/bias"] = (cfg.output_units,)
    return shapes


def state_shapes(cfg: NetworkConfig) -> dict[str, tuple]:
    out = {}
    for i, c in enumerate(cfg.conv_widths, 1):
        out[f"bn{i}/moving_mean"] = (c,)
        out[f"bn{i}/moving_variance"] = (c,)
    return out


def param_count(cfg: NetworkConfig) -> int:
    """Closed-form trainable parameter total (conv + batch-norm scale/shift + dense)."""
    k = cfg.kernel_size
    total, cin = 0, cfg.input_channels
    for cout in cfg.conv_widths:
        total += k * k * cin * cout + cout + 2 * cout
        cin = cout
    fin = cfg.flat_features
    for units in (*cfg.dense_widths, cfg.output_units):
        total += fin * units + units
        fin = units
    return total


@dataclass
class NetworkParams:
    config: NetworkConfig
    weights: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)
    seed: int | None = None

    def trainable_count(self) -> int:
        return sum(int(w.size) for w in self.weights.values())

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.weights.items()},
                             {k: v.copy() for k, v in self.state.items()}, self.seed)

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.astype(dtype) for k, v in self.weights.items()},
                             {k: v.astype(dtype) for k, v in self.state.items()}, self.seed)


def glorot_limit(shape) -> float:
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        fan_in, fan_out = shape[2] * receptive, shape[3] * receptive
    else:
        fan_in, fan_out = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(cfg: NetworkConfig, seed: int, dtype=np.float32) -> NetworkParams:
    """Glorot-uniform kernels, zero biases, unit BN scale, zero BN shift."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("/kernel"):
            lim = glorot_limit(shape)
            weights[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
        elif name.endswith("/gamma"):
            weights[name] = np.ones(shape, dtype=dtype)
        else:
            weights[name] = np.zeros(shape, dtype=dtype)
    state = {name: (np.zeros if name.endswith("mean") else np.ones)(shape, dtype=dtype)
             for name, shape in state_shapes(cfg).items()}
    return NetworkParams(cfg, weights, state, seed)


def forward(params: NetworkParams, x, train: bool, update_state: bool = True):
    """Logits for a batch ``x`` (B x H x W x C, already scaled).

    Returns ``(logits, caches)``; ``caches`` is ``None`` in inference mode. In
    train mode the batch-norm running statistics are updated in place unless
    ``update_state`` is false.
    """
    cfg, w, st = params.config, params.weights, params.state
    if x.ndim != 4 or x.shape[3] != cfg.input_channels:
        raise ShapeMismatch(f"network expects N x H x W x {cfg.input_channels}, got {x.shape}")
    caches = [] if train else None
    h = x
    for i in range(1, len(cfg.conv_widths) + 1):
        h, c_conv = L.conv2d_forward(h, w[f"conv{i}/kernel"], w[f"conv{i}/bias"])
        h, c_bn, mean, var = L.batchnorm_forward(
            h, w[f"bn{i}/gamma"], w[f"bn{i}/beta"], st[f"bn{i}/moving_mean"],
            st[f"bn{i}/moving_variance"], train=train, momentum=cfg.bn_momentum, eps=cfg.bn_epsilon)
        if train and update_state:
            st[f"bn{i}/moving_mean"], st[f"bn{i}/moving_variance"] = mean, var
        h, c_act = L.activation_forward(h, cfg.activation)
        h, c_pool = L.maxpool2_forward(h)
        if train:
            caches.append((c_conv, c_bn, c_act, c_pool))
    pooled_shape = h.shape
    h = h.reshape(len(h), -1)
    for i in range(1, len(cfg.dense_widths) + 1):
        h, c_dense = L.dense_forward(h, w[f"dense{i}/kernel"], w[f"dense{i}/bias"])
        h, c_act = L.activation_forward(h, cfg.activation)
        if train:
            caches.append((c_dense, c_act))
    logits, c_out = L.dense_forward(h, w["output/kernel"], w["output/bias"])
    L.check_finite("forward", logits)
    if train:
        caches.append((c_out, pooled_shape))
    return logits, caches


def backward(params: NetworkParams, dlogits, caches) -> dict:
    """Gradients of every trainable tensor, keyed like ``params.weights``."""
    cfg = params.config
    grads = {}
    n_conv, n_dense = len(cfg.conv_widths), len(cfg.dense_widths)
    c_out, pooled_shape = caches[-1]
    dh, grads["output/kernel"], grads["output/bias"] = L.dense_backward(dlogits, c_out)
    for i in range(n_dense, 0, -1):
        c_dense, c_act = caches[n_conv + i - 1]
        dh = L.activation_backward(dh, c_act)
        dh, grads[f"dense{i}/kernel"], grads[f"dense{i}/bias"] = L.dense_backward(dh, c_dense)
    dh = dh.reshape(pooled_shape)
    for i in range(n_conv, 0, -1):
        c_conv, c_bn, c_act, c_pool = caches[i - 1]
        dh = L.maxpool2_backward(dh, c_pool)
        dh = L.activation_backward(dh, c_act)
        dh, grads[f"bn{i}/gamma"], grads[f"bn{i}/beta"] = L.batchnorm_backward(dh, c_bn)
        dh, grads[f"conv{i}/kernel"], grads[f"conv{i}/bias"] = L.conv2d_backward(dh, c_conv)
    L.check_finite("backward", *grads.values())
    return grads


def loss_and_grads(params: NetworkParams, x, y, update_state: bool = True):
    logits, caches = forward(params, x, train=True, update_state=update_state)
    loss, dlogits, probs = L.softmax_xent(logits, y)
    return loss, backward(params, dlogits, caches), probs


def predict(params: NetworkParams, x, batch_size: int = 256) -> np.ndarray:
    """Inference-mode class ids (argmax, lowest id on ties)."""
    out = np.empty(len(x), dtype=np.int64)
    for s in range(0, len(x), batch_size):
        logits, _ = forward(params, x[s:s + batch_size], train=False)
        out[s:s + batch_size] = np.argmax(logits, axis=1)
    return out


def recalibrate_batchnorm(params: NetworkParams, x, batch_size: int = 256) -> None:
    """Replace the running batch-norm statistics with exact population statistics of ``x``.

    Layers are processed in order, each seeing the already recalibrated layers
    before it. Useful when too few training steps were taken for the momentum
    average to forget its initial values.
    """
    cfg, w, st = params.config, params.weights, params.state
    for i in range(1, len(cfg.conv_widths) + 1):
        total = sq = 0.0
        count = 0
        for s in range(0, len(x), batch_size):
            h = x[s:s + batch_size]
            for j in range(1, i + 1):
                h, _ = L.conv2d_forward(h, w[f"conv{j}/kernel"], w[f"conv{j}/bias"])
                if j == i:
                    break
                h, _, _, _ = L.batchnorm_forward(h, w[f"bn{j}/gamma"], w[f"bn{j}/beta"],
                                                 st[f"bn{j}/moving_mean"], st[f"bn{j}/moving_variance"],
                                                 train=False, eps=cfg.bn_epsilon)
                h, _ = L.activation_forward(h, cfg.activation)
                h, _ = L.maxpool2_forward(h)
            h = h.astype(np.float64).reshape(-1, h.shape[-1])
            total = total + h.sum(axis=0)
            sq = sq + (h * h).sum(axis=0)
            count += len(h)
        mean = total / count
        dtype = st[f"bn{i}/moving_mean"].dtype
        st[f"bn{i}/moving_mean"] = mean.astype(dtype)
        st[f"bn{i}/moving_variance"] = np.maximum(sq / count - mean * mean, 0.0).astype(dtype)
