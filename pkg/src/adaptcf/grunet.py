"""Single-layer GRU regressor mapping recent leader/follower states to model parameters.

Cell update, per frame::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    h~ = tanh(W_h x + U_h (r * h) + b_h)
    h  = (1 - z) * h + z * h~

The last hidden state feeds an affine head with a sigmoid per output, so
predictions live in (0, 1) and are mapped through the parameter bound box.
Gradients come from hand-written backpropagation through time.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .calib import TRAIN, LabelDataset
from .carfollow import KRAUSS, ModelKind, ParamSchedule, get_model
from .errors import ConfigError, DataError, StateError
from .trajdata import Trajectory, VehiclePair, slice_windows

logger = logging.getLogger(__name__)

FORMAT_NAME = "adaptcf-gru"
FORMAT_VERSION = 1
INPUT_FEATURES = ("v_leader", "v_follower", "gap", "dv")
GATES = ("z", "r", "h")
WEIGHT_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h", "W_o", "b_o")
TARGET_CLIP = 1e-6


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def frame_features(leader: Trajectory, follower: Trajectory) -> np.ndarray:
    """Per-frame raw inputs: leader speed, follower speed, bumper gap, speed difference."""
    gap = leader.position - leader.length - follower.position
    return np.column_stack([leader.velocity, follower.velocity, gap,
                            leader.velocity - follower.velocity])


@dataclass(eq=False)
class GruModel:
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray
    W_o: np.ndarray
    b_o: np.ndarray
    model_kind: str = KRAUSS.name
    bounds: np.ndarray | None = None
    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None

    def __post_init__(self):
        H, D = self.W_z.shape
        M = self.W_o.shape[0]
        shapes = {"W_z": (H, D), "W_r": (H, D), "W_h": (H, D), "U_z": (H, H), "U_r": (H, H),
                  "U_h": (H, H), "b_z": (H,), "b_r": (H,), "b_h": (H,), "W_o": (M, H), "b_o": (M,)}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ConfigError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)
        if self.bounds is None:
            self.bounds = get_model(self.model_kind).bounds
        self.bounds = np.asarray(self.bounds, dtype=float)
        if self.bounds.shape != (M, 2):
            raise ConfigError(f"bounds shape {self.bounds.shape} does not match {M} outputs")

    @classmethod
    def init(cls, input_dim: int = 4, hidden_dim: int = 32, output_dim: int | None = None,
             seed: int = 0, model_kind: str = KRAUSS.name, bounds=None) -> "GruModel":
        """Glorot-uniform input weights, orthogonal recurrent weights, zero biases."""
        if output_dim is None:
            output_dim = get_model(model_kind).n_params
        if min(input_dim, hidden_dim, output_dim) < 1:
            raise ConfigError("model dimensions must be positive")
        rng = np.random.default_rng(seed)

        def glorot(rows, cols):
            lim = np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-lim, lim, size=(rows, cols))

        def orthogonal(n):
            q, r = np.linalg.qr(rng.standard_normal((n, n)))
            return q * np.sign(np.diag(r))

        H = hidden_dim
        return cls(glorot(H, input_dim), glorot(H, input_dim), glorot(H, input_dim),
                   orthogonal(H), orthogonal(H), orthogonal(H),
                   np.zeros(H), np.zeros(H), np.zeros(H),
                   glorot(output_dim, H), np.zeros(output_dim), model_kind, bounds)

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W_o.shape[0]

    @property
    def is_fitted(self) -> bool:
        return self.x_min is not None and self.x_max is not None

    def weights(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in WEIGHT_NAMES}

    def copy(self) -> "GruModel":
        return GruModel(**{n: w.copy() for n, w in self.weights().items()}, model_kind=self.model_kind,
                        bounds=self.bounds.copy(),
                        x_min=None if self.x_min is None else self.x_min.copy(),
                        x_max=None if self.x_max is None else self.x_max.copy())

    # scaling helpers
    def scale_inputs(self, X: np.ndarray) -> np.ndarray:
        if not self.is_fitted:
            raise StateError("model has no input scaling statistics; train it first")
        span = np.where(self.x_max > self.x_min, self.x_max - self.x_min, 1.0)
        return (np.asarray(X, float) - self.x_min) / span

    def scale_targets(self, params: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return np.clip((np.asarray(params, float) - lo) / (hi - lo), TARGET_CLIP, 1 - TARGET_CLIP)

    def unscale_outputs(self, y: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        return lo + np.asarray(y, float) * (hi - lo)


def _check_input(model: GruModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != model.input_dim:
        raise ConfigError(f"input must be (batch, frames, {model.input_dim}); got {X.shape}")
    if X.shape[1] < 1:
        raise ConfigError("input sequence must have at least one frame")
    return X


def _forward(model: GruModel, X: np.ndarray, h0: np.ndarray | None = None):
    """Batched forward pass on scaled inputs of shape (B, L, D); returns output and cache."""
    B, L, _ = X.shape
    h = np.zeros((B, model.hidden_dim)) if h0 is None else np.broadcast_to(h0, (B, model.hidden_dim)).copy()
    cache = []
    for t in range(L):
        x = X[:, t]
        z = _sigmoid(x @ model.W_z.T + h @ model.U_z.T + model.b_z)
        r = _sigmoid(x @ model.W_r.T + h @ model.U_r.T + model.b_r)
        h_tilde = np.tanh(x @ model.W_h.T + (r * h) @ model.U_h.T + model.b_h)
        h_new = (1.0 - z) * h + z * h_tilde
        cache.append((x, h, z, r, h_tilde))
        h = h_new
    y = _sigmoid(h @ model.W_o.T + model.b_o)
    return y, h, cache


def gru_forward(model: GruModel, input_sequence: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """Scaled output for already-scaled inputs; (L, D) gives (M,), (B, L, D) gives (B, M)."""
    single = np.asarray(input_sequence).ndim == 2
    y, _, _ = _forward(model, _check_input(model, input_sequence), h0)
    return y[0] if single else y


def hidden_trajectory(model: GruModel, input_sequence: np.ndarray, h0: np.ndarray | None = None) -> np.ndarray:
    """Hidden state after every frame, shape (L, H); exposes the recurrence for probing."""
    X = _check_input(model, input_sequence)
    _, h_last, cache = _forward(model, X, h0)
    states = [c[1][0] for c in cache[1:]] + [h_last[0]]
    return np.array(states)


def loss_and_grads(model: GruModel, X: np.ndarray, T: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over batch and outputs, with BPTT gradients."""
    X = _check_input(model, X)
    T = np.atleast_2d(np.asarray(T, float))
    B = X.shape[0]
    y, h, cache = _forward(model, X)
    diff = y - T
    loss = float(np.mean(diff ** 2))

    g = {name: np.zeros_like(w) for name, w in model.weights().items()}
    d_out = 2.0 * diff / diff.size * y * (1.0 - y)
    g["W_o"] = d_out.T @ h
    g["b_o"] = d_out.sum(0)
    dh = d_out @ model.W_o
    for x, h_prev, z, r, h_tilde in reversed(cache):
        dz = dh * (h_tilde - h_prev)
        dh_prev = dh * (1.0 - z)
        da_h = dh * z * (1.0 - h_tilde ** 2)
        g["W_h"] += da_h.T @ x
        g["U_h"] += da_h.T @ (r * h_prev)
        g["b_h"] += da_h.sum(0)
        d_rh = da_h @ model.U_h
        dh_prev += d_rh * r
        da_r = d_rh * h_prev * r * (1.0 - r)
        g["W_r"] += da_r.T @ x
        g["U_r"] += da_r.T @ h_prev
        g["b_r"] += da_r.sum(0)
        dh_prev += da_r @ model.U_r
        da_z = dz * z * (1.0 - z)
        g["W_z"] += da_z.T @ x
        g["U_z"] += da_z.T @ h_prev
        g["b_z"] += da_z.sum(0)
        dh_prev += da_z @ model.U_z
        dh = dh_prev
    return loss, g


def gradient_check(model: GruModel, sample: tuple[np.ndarray, np.ndarray], step: float = 1e-5) -> float:
    """Largest relative gap between BPTT and central-difference gradients over all weights.

    Relative error is |a - n| / max(|a|, |n|); when both are below 1e-8 the
    absolute difference is used instead.
    """
    X, T = sample
    _, grads = loss_and_grads(model, X, T)
    worst = 0.0
    for name, w in model.weights().items():
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = w[idx]
            w[idx] = orig + step
            up, _ = loss_and_grads(model, X, T)
            w[idx] = orig - step
            down, _ = loss_and_grads(model, X, T)
            w[idx] = orig
            num = (up - down) / (2.0 * step)
            ana = grads[name][idx]
            scale = max(abs(ana), abs(num))
            err = abs(ana - num) / scale if scale >= 1e-8 else abs(ana - num)
            worst = max(worst, err)
    return worst


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 1
    val_split: float = 0.1
    learning_rate: float = 1e-3
    seed: int = 0
    gradient_clip: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.val_split < 1:
            raise ConfigError("val_split must be in [0, 1)")
        if self.learning_rate <= 0 or self.gradient_clip <= 0:
            raise ConfigError("learning_rate and gradient_clip must be positive")


@dataclass
class SampleSet:
    """Raw inputs (N, L, D) and unscaled parameter targets (N, M)."""

    inputs: np.ndarray
    targets: np.ndarray
    keys: list[tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class TrainResult:
    model: GruModel
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int


def build_samples(pairs: Sequence[VehiclePair], labels: LabelDataset, split: str | None = TRAIN) -> SampleSet:
    """Pair each labelled window's own frames with its BO label."""
    by_id = {p.pair_id: p for p in pairs}
    inputs, targets, keys = [], [], []
    for w in labels.windows:
        if split is not None and w.split != split:
            continue
        pair = by_id.get(w.pair_id)
        if pair is None:
            raise DataError(f"labels reference pair {w.pair_id} which is not loaded")
        sub = pair.between(w.start_frame, w.start_frame + w.length)
        inputs.append(frame_features(sub.leader, sub.follower))
        targets.append(w.params)
        keys.append((*w.pair_id, w.index))
    if not inputs:
        return SampleSet(np.empty((0, 0, len(INPUT_FEATURES))), np.empty((0, 0)), [])
    lengths = {len(x) for x in inputs}
    if len(lengths) != 1:
        raise DataError(f"windows of different lengths {sorted(lengths)} cannot be batched")
    return SampleSet(np.array(inputs), np.array(targets), keys)


def _adam_step(model: GruModel, grads, state, cfg: TrainConfig) -> None:
    state["t"] += 1
    t = state["t"]
    for name, g in grads.items():
        m = state["m"][name]
        v = state["v"][name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        getattr(model, name)[...] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


def train(model: GruModel, samples: SampleSet, config: TrainConfig = TrainConfig()) -> TrainResult:
    """Fit ``model`` in place on ``samples`` and return the best-validation snapshot.

    The last ``val_split`` share of samples (in their given order) is held
    out. Input scaling statistics come from the fitting share only.
    """
    n = len(samples)
    if n < 2:
        raise DataError(f"training needs at least 2 samples, got {n}")
    n_fit = int(n * (1.0 - config.val_split))
    if n_fit < 1 or (config.val_split > 0 and n_fit >= n):
        raise DataError(f"{n} samples cannot be split with val_split={config.val_split}")
    if samples.targets.shape[1] != model.output_dim or samples.inputs.shape[2] != model.input_dim:
        raise ConfigError("sample dimensions do not match the model")

    raw_fit = samples.inputs[:n_fit]
    model.x_min = raw_fit.min(axis=(0, 1))
    model.x_max = raw_fit.max(axis=(0, 1))
    X = model.scale_inputs(samples.inputs)
    T = model.scale_targets(samples.targets)
    X_fit, T_fit, X_val, T_val = X[:n_fit], T[:n_fit], X[n_fit:], T[n_fit:]

    rng = np.random.default_rng(config.seed)
    state = {"t": 0, "m": {k: np.zeros_like(w) for k, w in model.weights().items()},
             "v": {k: np.zeros_like(w) for k, w in model.weights().items()}}
    train_curve, val_curve = [], []
    best, best_loss, best_epoch = model.copy(), np.inf, 0
    for epoch in range(config.epochs):
        order = rng.permutation(n_fit)
        for k in range(0, n_fit, config.batch_size):
            idx = order[k:k + config.batch_size]
            _, grads = loss_and_grads(model, X_fit[idx], T_fit[idx])
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > config.gradient_clip:
                for g in grads.values():
                    g *= config.gradient_clip / norm
            _adam_step(model, grads, state, config)
        tr = float(np.mean((gru_forward(model, X_fit) - T_fit) ** 2))
        va = float(np.mean((gru_forward(model, X_val) - T_val) ** 2)) if len(X_val) else tr
        train_curve.append(tr)
        val_curve.append(va)
        if va < best_loss:
            best, best_loss, best_epoch = model.copy(), va, epoch
    logger.info("trained %d epochs, best validation loss %.4g at epoch %d",
                config.epochs, best_loss, best_epoch)
    return TrainResult(best, train_curve, val_curve, best_epoch)


def predict_params(model: GruModel, raw_sequence: np.ndarray) -> np.ndarray:
    """Unscaled parameter vector for one raw feature sequence (L, D)."""
    return model.unscale_outputs(gru_forward(model, model.scale_inputs(raw_sequence)))


def predict_schedule(model: GruModel, pair: VehiclePair, window_len: int = 5, stride: int | None = None,
                     bounds=None, defaults=None) -> ParamSchedule:
    """Window-by-window parameters: window j uses the prediction from window j-1's frames.

    Window 0 gets the model kind's defaults. ``bounds`` overrides the box
    stored with the model.
    """
    if not model.is_fitted:
        raise StateError("model is untrained; run train first")
    if bounds is not None:
        model = model.copy()
        model.bounds = np.asarray(bounds, dtype=float)
    kind: ModelKind = get_model(model.model_kind)
    first = np.asarray(kind.defaults if defaults is None else defaults, dtype=float)
    windows = slice_windows(pair, window_len, stride)
    rows = [first]
    if len(windows) > 1:
        X = np.array([frame_features(w.leader_slice, w.follower_slice) for w in windows[:-1]])
        rows.extend(model.unscale_outputs(gru_forward(model, model.scale_inputs(X))))
    return ParamSchedule.from_windows([w.start_frame for w in windows], window_len, np.array(rows))


def save_model(model: GruModel, path: str | Path) -> None:
    if not model.is_fitted:
        raise StateError("refusing to save an untrained model")
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "model_kind": model.model_kind,
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "output_dim": model.output_dim,
        "input_features": list(INPUT_FEATURES),
        "bounds": model.bounds.tolist(),
        "x_min": model.x_min.tolist(),
        "x_max": model.x_max.tolist(),
        "weights": {name: w.tolist() for name, w in model.weights().items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_model(path: str | Path) -> GruModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT_NAME:
        raise DataError(f"{path} is not a GRU model file")
    if doc.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: model format version {doc.get('version')} unsupported "
                        f"(expected {FORMAT_VERSION})")
    w = {name: np.array(doc["weights"][name], dtype=float) for name in WEIGHT_NAMES}
    model = GruModel(**w, model_kind=doc["model_kind"], bounds=np.array(doc["bounds"]),
                     x_min=np.array(doc["x_min"]), x_max=np.array(doc["x_max"]))
    if (model.input_dim, model.hidden_dim, model.output_dim) != (doc["input_dim"], doc["hidden_dim"],
                                                                   doc["output_dim"]):
        raise DataError(f"{path}: stored dimensions disagree with weight shapes")
    return model
