"""Compact convolutional regressor for the BBB range length, written in numpy.

Input per building: a 2-channel chip (normalized amplitude, footprint mask)
plus the geometric features (FBB range extent, FBB azimuth extent, cos of
the incidence angle). The conv stack is global-average-pooled, joined with
the features, and an fc head regresses one scalar: the predicted BBB length
in meters. Height then follows from the layover model.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import Projection, layover_factor_from_cos


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, message: str, layer: str | None = None, step: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    chip_px: int = 128
    conv_layers: tuple[tuple[int, int, int], ...] = ((8, 5, 2), (16, 3, 2), (32, 3, 2))
    fc_widths: tuple[int, ...] = (64, 1)
    extra_features: int = 3
    activation: str = "relu"
    seed: int = 0
    in_channels: int = 2
    # fixed (not learned) input and output scales keep meter-valued
    # quantities near unit range
    feature_scale: tuple[float, ...] = (0.05, 0.05, 1.0)
    target_scale: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "conv_layers", tuple(tuple(int(v) for v in c) for c in self.conv_layers))
        object.__setattr__(self, "fc_widths", tuple(int(v) for v in self.fc_widths))
        object.__setattr__(self, "feature_scale", tuple(float(v) for v in self.feature_scale))
        if not self.fc_widths or self.fc_widths[-1] != 1:
            raise ConfigError("the final fc layer must have width 1")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}")
        if self.chip_px <= 0 or self.in_channels <= 0:
            raise ConfigError("chip_px and in_channels must be positive")
        if len(self.feature_scale) != self.extra_features:
            raise ConfigError("feature_scale needs one entry per extra feature")
        size = self.chip_px
        for i, (out_c, k, s) in enumerate(self.conv_layers):
            if out_c <= 0 or k <= 0 or s <= 0:
                raise ConfigError(f"conv{i}: channels, kernel and stride must be positive")
            size = conv_output_size(size, k, s)
            if size <= 0:
                raise ConfigError(f"conv{i}: spatial size collapses to {size}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "conv_layers" in d:
            d["conv_layers"] = tuple(tuple(c) for c in d["conv_layers"])
        for key in ("fc_widths", "feature_scale"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [list(c) for c in self.conv_layers]
        d["fc_widths"] = list(self.fc_widths)
        d["feature_scale"] = list(self.feature_scale)
        return d


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    pad = kernel // 2
    return (size + 2 * pad - kernel) // stride + 1


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration order."""
    shapes = []
    c = config.in_channels
    for i, (out_c, k, _) in enumerate(config.conv_layers):
        shapes.append((f"conv{i}.w", (out_c, c, k, k)))
        shapes.append((f"conv{i}.b", (out_c,)))
        c = out_c
    width = c + config.extra_features
    for j, out in enumerate(config.fc_widths):
        shapes.append((f"fc{j}.w", (width, out)))
        shapes.append((f"fc{j}.b", (out,)))
        width = out
    return shapes


def _glorot_bound(shape) -> float:
    if len(shape) == 4:
        out_c, in_c, k, _ = shape
        fan_in, fan_out = in_c * k * k, out_c * k * k
    else:
        fan_in, fan_out = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


@dataclass
class TrainState:
    config: ModelConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    seed: int = 0
    loss_history: list[float] = field(default_factory=list)
    clamp_count: int = 0

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "TrainState":
        return TrainState(
            self.config,
            {k: p.copy() for k, p in self.params.items()},
            {k: p.copy() for k, p in self.m.items()},
            {k: p.copy() for k, p in self.v.items()},
            self.step,
            self.seed,
            list(self.loss_history),
            self.clamp_count,
        )


def init(config: ModelConfig) -> TrainState:
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config):
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            bound = _glorot_bound(shape)
            params[name] = rng.uniform(-bound, bound, size=shape)
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    return TrainState(config, params, zeros, {k: z.copy() for k, z in zeros.items()}, seed=config.seed)


# ---------------------------------------------------------------- batches


def batch_arrays(samples: Sequence, dtype=np.float64):
    """Stack samples into (chips[N, 2, S, S], features[N, F], targets[N])."""
    chips = np.stack([np.stack([s.chip_amp, s.chip_mask]) for s in samples]).astype(dtype)
    feats = np.stack([s.features for s in samples]).astype(dtype)
    targets = np.array([s.target_lbbb_m for s in samples], dtype=dtype)
    return chips, feats, targets


def _as_batch(batch, dtype=np.float64):
    if isinstance(batch, tuple):
        return np.asarray(batch[0], dtype=dtype), np.asarray(batch[1], dtype=dtype)
    if len(batch) == 0:
        raise ShapeError("empty batch")
    chips, feats, _ = batch_arrays(batch, dtype)
    return chips, feats


# ---------------------------------------------------------------- layers


def _conv_forward(x, w, b, stride):
    n, c, h, wd = x.shape
    out_c, _, k, _ = w.shape
    pad = k // 2
    oh, ow = conv_output_size(h, k, stride), conv_output_size(wd, k, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    out = cols @ w.reshape(out_c, -1).T + b
    return out.reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, x_shape, w, stride, need_dx):
    n, c, h, wd = x_shape
    out_c, _, k, _ = w.shape
    pad = k // 2
    _, _, oh, ow = dout.shape
    dm = dout.transpose(0, 2, 3, 1).reshape(-1, out_c)
    dw = (dm.T @ cols).reshape(w.shape)
    db = dm.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dm @ w.reshape(out_c, -1)).reshape(n, oh, ow, c, k, k)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, pad : pad + h, pad : pad + wd], dw, db


def _check_finite(arr, layer, step=None):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {layer}", layer=layer, step=step)


def _forward(state: TrainState, chips, feats, keep_cache: bool):
    cfg = state.config
    p = state.params
    if chips.ndim != 4 or chips.shape[1:] != (cfg.in_channels, cfg.chip_px, cfg.chip_px):
        raise ShapeError(
            f"conv0: expected chips of shape (N, {cfg.in_channels}, {cfg.chip_px}, {cfg.chip_px}), got {chips.shape}"
        )
    if feats.shape != (chips.shape[0], cfg.extra_features):
        raise ShapeError(f"fc0: expected features of shape ({chips.shape[0]}, {cfg.extra_features}), got {feats.shape}")
    cache = []
    x = chips
    for i, (_, _, stride) in enumerate(cfg.conv_layers):
        z, cols = _conv_forward(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride)
        a = np.maximum(z, 0.0)
        if keep_cache:
            cache.append((x.shape, cols, z))
        x = a
    pooled = x.mean(axis=(2, 3))
    h = np.concatenate([pooled, feats * np.asarray(cfg.feature_scale, dtype=feats.dtype)], axis=1)
    fc_cache = []
    n_fc = len(cfg.fc_widths)
    for j in range(n_fc):
        z = h @ p[f"fc{j}.w"] + p[f"fc{j}.b"]
        if keep_cache:
            fc_cache.append((h, z))
        h = np.maximum(z, 0.0) if j < n_fc - 1 else z
    out = h[:, 0] * cfg.target_scale
    return out, (cache, x.shape, fc_cache)


def forward(state: TrainState, batch, dtype=np.float64) -> np.ndarray:
    """Predicted BBB range length (m) per sample.

    ``batch`` is a list of samples or a ``(chips, features)`` tuple.
    ``dtype=np.float32`` gives the single-precision inference path.
    """
    chips, feats = _as_batch(batch, dtype)
    if dtype != np.float64:
        cast = TrainState(state.config, {k: v.astype(dtype) for k, v in state.params.items()})
        out, _ = _forward(cast, chips, feats, keep_cache=False)
    else:
        out, _ = _forward(state, chips, feats, keep_cache=False)
    _check_finite(out, "output")
    return out


def mse_loss(predictions, targets) -> float:
    pred = np.asarray(predictions, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ShapeError(f"predictions {pred.shape} and targets {tgt.shape} differ")
    if pred.size == 0:
        raise ShapeError("mse of an empty batch")
    return float(np.mean((tgt - pred) ** 2))


def loss_and_gradients(state: TrainState, batch, targets=None):
    """Return (loss, gradients) of the batch MSE with respect to every parameter."""
    if isinstance(batch, tuple):
        chips, feats = np.asarray(batch[0], np.float64), np.asarray(batch[1], np.float64)
        if targets is None:
            raise ShapeError("targets are required with array batches")
    else:
        chips, feats, tgt = batch_arrays(batch)
        targets = tgt if targets is None else targets
    targets = np.asarray(targets, dtype=np.float64)
    cfg = state.config
    p = state.params
    out, (cache, pooled_shape, fc_cache) = _forward(state, chips, feats, keep_cache=True)
    loss = mse_loss(out, targets)
    n = out.shape[0]
    grads: dict[str, np.ndarray] = {}

    dh = (2.0 / n) * (out - targets)[:, None] * cfg.target_scale
    for j in reversed(range(len(cfg.fc_widths))):
        h_in, z = fc_cache[j]
        if j < len(cfg.fc_widths) - 1:
            dh = dh * (z > 0)
        grads[f"fc{j}.w"] = h_in.T @ dh
        grads[f"fc{j}.b"] = dh.sum(axis=0)
        dh = dh @ p[f"fc{j}.w"].T
        _check_finite(dh, f"fc{j}")

    n_pool = pooled_shape[1]
    dpooled = dh[:, :n_pool]
    hh, ww = pooled_shape[2], pooled_shape[3]
    dx = np.broadcast_to(dpooled[:, :, None, None] / (hh * ww), pooled_shape)
    for i in reversed(range(len(cfg.conv_layers))):
        x_shape, cols, z = cache[i]
        dz = dx * (z > 0)
        dx, dw, db = _conv_backward(dz, cols, x_shape, p[f"conv{i}.w"], cfg.conv_layers[i][2], need_dx=i > 0)
        grads[f"conv{i}.w"] = dw
        grads[f"conv{i}.b"] = db
        _check_finite(dw, f"conv{i}")
    ordered = {name: grads[name] for name, _ in param_shapes(cfg)}
    return loss, ordered


def backward(state: TrainState, batch, targets=None) -> dict[str, np.ndarray]:
    return loss_and_gradients(state, batch, targets)[1]


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    seed: int = 0
    max_steps: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        return cls(**d)


def adam_step(state: TrainState, grads: dict[str, np.ndarray], hyper: TrainHyper) -> None:
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1**t
    c2 = 1.0 - hyper.beta2**t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        state.params[name] -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


def train(state: TrainState, dataset, hyper: TrainHyper = TrainHyper(), callback=None) -> TrainState:
    """Mini-batch Adam on the MSE loss; returns a new state.

    ``dataset`` is a list of samples or a ``(chips, features, targets)``
    tuple. Each epoch shuffles with a generator derived from (seed, epoch).
    ``callback(state, epoch)`` runs after every step; returning True stops
    training early.
    """
    if isinstance(dataset, tuple):
        chips, feats, targets = (np.asarray(a, np.float64) for a in dataset)
    else:
        if len(dataset) == 0:
            raise ShapeError("cannot train on an empty dataset")
        chips, feats, targets = batch_arrays(dataset)
    n = len(targets)
    if n == 0:
        raise ShapeError("cannot train on an empty dataset")
    state = state.copy()
    for epoch in range(hyper.epochs):
        rng = np.random.default_rng(np.random.SeedSequence(hyper.seed, spawn_key=(epoch,)))
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            if hyper.max_steps is not None and len(state.loss_history) >= hyper.max_steps:
                return state
            idx = order[start : start + hyper.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                try:
                    loss, grads = loss_and_gradients(state, (chips[idx], feats[idx]), targets[idx])
                except NumericError as exc:
                    raise NumericError(f"{exc} at step {state.step}", exc.layer, state.step) from exc
            if not math.isfinite(loss):
                raise NumericError(f"loss diverged at step {state.step}", step=state.step)
            state.loss_history.append(loss)
            adam_step(state, grads, hyper)
            if callback is not None and callback(state, epoch) is True:
                return state
    return state


def predict_lbbb(state: TrainState, samples, batch_size: int = 256, dtype=np.float64) -> np.ndarray:
    out = []
    for start in range(0, len(samples), batch_size):
        out.append(forward(state, samples[start : start + batch_size], dtype=dtype))
    return np.concatenate(out) if out else np.zeros(0)


def height_from_prediction(state: TrainState, lbbb_pred: float, sample, projection=None) -> float:
    """h = max(0, L_BBB - L_FBB) / factor; undershoots bump ``state.clamp_count``."""
    proj = Projection(projection or getattr(sample, "projection", "cos"))
    diff = lbbb_pred - sample.fbb_extent_u_m
    if diff < 0:
        state.clamp_count += 1
        return 0.0
    return diff / layover_factor_from_cos(sample.cos_theta, proj)


def predict_height(state: TrainState, sample, projection=None) -> float:
    (lbbb,) = forward(state, [sample])
    return height_from_prediction(state, float(lbbb), sample, projection)


def predict_heights(state: TrainState, samples, projection=None, batch_size: int = 256) -> np.ndarray:
    preds = predict_lbbb(state, samples, batch_size)
    return np.array([height_from_prediction(state, float(p), s, projection) for p, s in zip(preds, samples)])


# ---------------------------------------------------------------- checkpoints


def _ckpt_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    for suffix in (".json", ".bin"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return p.with_name(name + ".json"), p.with_name(name + ".bin")


def save_checkpoint(state: TrainState, path, **extra) -> tuple[Path, Path]:
    json_path, bin_path = _ckpt_paths(path)
    header = {
        "config": state.config.to_dict(),
        "step": state.step,
        "seed": state.seed,
        "dtype": "f64le",
        "params": [{"name": n, "shape": list(s)} for n, s in param_shapes(state.config)],
        **extra,
    }
    json_path.write_text(json.dumps(header, indent=1), encoding="utf-8")
    blob = b"".join(np.ascontiguousarray(state.params[n], dtype="<f8").tobytes() for n, _ in param_shapes(state.config))
    bin_path.write_bytes(blob)
    return json_path, bin_path


def load_checkpoint(path) -> tuple[TrainState, dict]:
    json_path, bin_path = _ckpt_paths(path)
    header = json.loads(json_path.read_text(encoding="utf-8"))
    config = ModelConfig.from_dict(header["config"])
    blob = bin_path.read_bytes()
    params = {}
    offset = 0
    for name, shape in param_shapes(config):
        count = int(np.prod(shape))
        if offset + 8 * count > len(blob):
            raise ShapeError(f"{bin_path}: truncated at parameter {name} (byte {offset})")
        params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(blob):
        raise ShapeError(f"{bin_path}: {len(blob) - offset} trailing bytes")
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    state = TrainState(config, params, zeros, {k: z.copy() for k, z in zeros.items()}, header["step"], header["seed"])
    return state, header


def write_loss_csv(state: TrainState, path, comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(state.loss_history, start=1):
            w.writerow([i, repr(float(loss))])
