"""GRU encoder-decoder forecaster with hand-written backpropagation.

The encoder is a stack of GRU layers run over the history window (infection
value plus plan vector per day). The decoder GRU starts from the top encoder
layer's final state, consumes one planned-response vector per future day and
emits a scalar forecast through three fully connected layers
(FC1 -> ReLU -> FC2 -> ReLU -> FC3). Forecasts are never fed back as inputs.

All computations are batched: a batch of ``B`` samples is processed as
``(B, features)`` row blocks, and the loss is the batch mean of per-sample MSE.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .numerics import ParamStore, SeededRng, derive_seed, relu, seeded_init, sgd_step, sigmoid

GRU_PARAM_ORDER = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


@dataclass
class ModelConfig:
    plan_dim: int = 6
    hidden_size: int = 32
    history_len: int = 14
    horizon: int = 7
    num_encoder_layers: int = 3
    fc_widths: tuple[int, int] = (32, 16)

    def __post_init__(self) -> None:
        self.fc_widths = tuple(int(w) for w in self.fc_widths)
        for name in ("plan_dim", "hidden_size", "history_len", "horizon", "num_encoder_layers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if len(self.fc_widths) != 2 or min(self.fc_widths) < 1:
            raise ConfigError("fc_widths must hold two positive integers")

    @property
    def input_dim(self) -> int:
        return 1 + self.plan_dim


@dataclass
class Sample:
    history: np.ndarray       # (history_len, 1 + K): [value, plan vector] per day
    future_plans: np.ndarray  # (horizon, K)
    targets: np.ndarray       # (horizon,)


@dataclass
class GruLayerParams:
    """Views onto the nine tensors of one GRU layer; biases are (H, 1) columns."""

    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_h: np.ndarray
    U_h: np.ndarray
    b_h: np.ndarray

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, grads: bool = False) -> GruLayerParams:
        get = store.grad if grads else store.value
        return cls(**{k: get(f"{prefix}.{k}") for k in GRU_PARAM_ORDER})

    @property
    def hidden_size(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]


@dataclass
class GruCache:
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    h_tilde: np.ndarray


def _as_rows(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(1, -1) if v.ndim == 1 else v


def gru_cell_forward(x: np.ndarray, h_prev: np.ndarray, p: GruLayerParams) -> tuple[np.ndarray, GruCache]:
    """One GRU step. ``x`` is (B, D) or (D,), ``h_prev`` is (B, H) or (H,).

    z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
    h~ = tanh(W_h x + U_h (r*h) + b_h), h' = (1 - z) * h + z * h~.
    """
    vector_in = np.ndim(x) == 1
    x = _as_rows(x)
    h_prev = _as_rows(h_prev)
    if x.shape[1] != p.input_size or h_prev.shape[1] != p.hidden_size or x.shape[0] != h_prev.shape[0]:
        raise ShapeError(
            f"GRU layer ({p.input_size} -> {p.hidden_size}) got x{x.shape}, h{h_prev.shape}"
        )
    z = sigmoid(x @ p.W_z.T + h_prev @ p.U_z.T + p.b_z.T)
    r = sigmoid(x @ p.W_r.T + h_prev @ p.U_r.T + p.b_r.T)
    h_tilde = np.tanh(x @ p.W_h.T + (r * h_prev) @ p.U_h.T + p.b_h.T)
    h = (1.0 - z) * h_prev + z * h_tilde
    cache = GruCache(x, h_prev, z, r, h_tilde)
    return (h[0] if vector_in else h), cache


def gru_cell_backward(dh: np.ndarray, cache: GruCache, p: GruLayerParams,
                      g: GruLayerParams) -> tuple[np.ndarray, np.ndarray]:
    """Backprop one GRU step; accumulates into ``g`` and returns ``(dx, dh_prev)``."""
    x, h_prev, z, r, h_tilde = cache.x, cache.h_prev, cache.z, cache.r, cache.h_tilde
    d_a_h = dh * z * (1.0 - h_tilde * h_tilde)
    d_a_z = dh * (h_tilde - h_prev) * z * (1.0 - z)
    rh = r * h_prev
    d_rh = d_a_h @ p.U_h
    d_a_r = d_rh * h_prev * r * (1.0 - r)

    g.W_h += d_a_h.T @ x
    g.U_h += d_a_h.T @ rh
    g.b_h += d_a_h.sum(axis=0)[:, None]
    g.W_z += d_a_z.T @ x
    g.U_z += d_a_z.T @ h_prev
    g.b_z += d_a_z.sum(axis=0)[:, None]
    g.W_r += d_a_r.T @ x
    g.U_r += d_a_r.T @ h_prev
    g.b_r += d_a_r.sum(axis=0)[:, None]

    dx = d_a_z @ p.W_z + d_a_r @ p.W_r + d_a_h @ p.W_h
    dh_prev = dh * (1.0 - z) + d_rh * r + d_a_z @ p.U_z + d_a_r @ p.U_r
    return dx, dh_prev


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean of squared componentwise differences."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


@dataclass
class SampleArrays:
    """A list of samples stacked into batch arrays."""

    history: np.ndarray       # (M, T, 1 + K)
    future_plans: np.ndarray  # (M, horizon, K)
    targets: np.ndarray       # (M, horizon)

    def __len__(self) -> int:
        return self.history.shape[0]

    def take(self, idx) -> SampleArrays:
        return SampleArrays(self.history[idx], self.future_plans[idx], self.targets[idx])


def stack_samples(samples: Sequence[Sample] | SampleArrays) -> SampleArrays:
    if isinstance(samples, SampleArrays):
        return samples
    if not samples:
        raise ValueError("no samples to stack")
    return SampleArrays(
        np.stack([s.history for s in samples]).astype(np.float64),
        np.stack([s.future_plans for s in samples]).astype(np.float64),
        np.stack([np.asarray(s.targets, dtype=np.float64).reshape(-1) for s in samples]),
    )


@dataclass
class _ForwardCache:
    batch: int
    encoder: list[list[GruCache]]
    decoder: list[GruCache] = field(default_factory=list)
    fc: list[tuple[np.ndarray, ...]] = field(default_factory=list)


class Seq2seqModel:
    """GRU seq2seq forecaster owning its parameters and a seeded shuffle generator."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.seed = seed
        self.rng = SeededRng(derive_seed(seed, "shuffle"))
        self.params = ParamStore()
        self._cache: _ForwardCache | None = None
        self._build()

    def _build(self) -> None:
        cfg = self.config
        H = cfg.hidden_size
        index = 0

        def add(name: str, rows: int, cols: int, scheme: str) -> None:
            nonlocal index
            self.params.add(name, seeded_init((rows, cols), derive_seed(self.seed, "init", index), scheme))
            index += 1

        def add_gru(prefix: str, in_dim: int) -> None:
            for gate in "zrh":
                add(f"{prefix}.W_{gate}", H, in_dim, "uniform-scaled")
                add(f"{prefix}.U_{gate}", H, H, "uniform-scaled")
                add(f"{prefix}.b_{gate}", H, 1, "zeros")

        for layer in range(cfg.num_encoder_layers):
            add_gru(f"encoder.{layer}", cfg.input_dim if layer == 0 else H)
        add_gru("decoder.gru", cfg.plan_dim)
        widths = [H, *cfg.fc_widths, 1]
        for i in range(3):
            add(f"decoder.fc.{i}.weight", widths[i + 1], widths[i], "uniform-scaled")
            add(f"decoder.fc.{i}.bias", widths[i + 1], 1, "zeros")

        self.encoder = [GruLayerParams.from_store(self.params, f"encoder.{l}")
                        for l in range(cfg.num_encoder_layers)]
        self.encoder_grads = [GruLayerParams.from_store(self.params, f"encoder.{l}", grads=True)
                              for l in range(cfg.num_encoder_layers)]
        self.decoder_gru = GruLayerParams.from_store(self.params, "decoder.gru")
        self.decoder_gru_grads = GruLayerParams.from_store(self.params, "decoder.gru", grads=True)
        self.decoder_fc = [(self.params.value(f"decoder.fc.{i}.weight"), self.params.value(f"decoder.fc.{i}.bias"))
                           for i in range(3)]
        self.decoder_fc_grads = [(self.params.grad(f"decoder.fc.{i}.weight"), self.params.grad(f"decoder.fc.{i}.bias"))
                                 for i in range(3)]

    # -- forward ----------------------------------------------------------

    def encode(self, history: np.ndarray) -> list[np.ndarray]:
        """Run the encoder stack; returns each layer's final hidden state.

        ``history`` is (T, 1+K) for one sample or (B, T, 1+K) for a batch.
        """
        single = np.ndim(history) == 2
        history = np.asarray(history, dtype=np.float64)
        if single:
            history = history[None]
        cfg = self.config
        if history.ndim != 3 or history.shape[1] != cfg.history_len or history.shape[2] != cfg.input_dim:
            raise ShapeError(
                f"history must be ({cfg.history_len}, {cfg.input_dim}) per sample, got {history.shape[-2:]}"
            )
        B = history.shape[0]
        layer_inputs = [history[:, t, :] for t in range(cfg.history_len)]
        finals: list[np.ndarray] = []
        caches: list[list[GruCache]] = []
        for p in self.encoder:
            h = np.zeros((B, cfg.hidden_size))
            outputs, layer_cache = [], []
            for x in layer_inputs:
                h, c = gru_cell_forward(x, h, p)
                outputs.append(h)
                layer_cache.append(c)
            finals.append(h)
            caches.append(layer_cache)
            layer_inputs = outputs
        self._cache = _ForwardCache(B, caches)
        return [f[0] for f in finals] if single else finals

    def decode(self, hidden: Sequence[np.ndarray], future_plans: np.ndarray) -> np.ndarray:
        """Unroll the decoder over the planned responses; returns (horizon,) or (B, horizon)."""
        single = np.ndim(future_plans) == 2
        plans = np.asarray(future_plans, dtype=np.float64)
        if single:
            plans = plans[None]
        cfg = self.config
        if plans.ndim != 3 or plans.shape[1] != cfg.horizon or plans.shape[2] != cfg.plan_dim:
            raise ShapeError(
                f"future_plans must be ({cfg.horizon}, {cfg.plan_dim}) per sample, got {plans.shape[-2:]}"
            )
        h = _as_rows(hidden[-1])
        if h.shape[0] != plans.shape[0]:
            raise ShapeError(f"hidden batch {h.shape[0]} does not match plan batch {plans.shape[0]}")
        if self._cache is None or self._cache.batch != h.shape[0]:
            self._cache = _ForwardCache(h.shape[0], [])
        cache = self._cache
        cache.decoder, cache.fc = [], []
        (W1, b1), (W2, b2), (W3, b3) = self.decoder_fc
        preds = np.empty((plans.shape[0], cfg.horizon))
        for t in range(cfg.horizon):
            h, c = gru_cell_forward(plans[:, t, :], h, self.decoder_gru)
            a1 = h @ W1.T + b1.T
            o1 = relu(a1)
            a2 = o1 @ W2.T + b2.T
            o2 = relu(a2)
            y = o2 @ W3.T + b3.T
            preds[:, t] = y[:, 0]
            cache.decoder.append(c)
            cache.fc.append((h, a1, o1, a2, o2))
        return preds[0] if single else preds

    def forward(self, history: np.ndarray, future_plans: np.ndarray) -> np.ndarray:
        return self.decode(self.encode(history), future_plans)

    def predict(self, sample: Sample) -> np.ndarray:
        return self.forward(sample.history, sample.future_plans)

    # -- backward ---------------------------------------------------------

    def backward(self, pred: np.ndarray, targets: np.ndarray) -> float:
        """Accumulate d(loss)/d(param) into the gradient buffers.

        The loss is the batch mean of per-sample MSE, so gradients are batch
        means. Must follow a matching :meth:`forward`; the cache is consumed.
        Returns the loss.
        """
        cache = self._cache
        pred2 = _as_rows(pred)
        targets2 = _as_rows(targets)
        if cache is None or not cache.encoder or not cache.decoder:
            raise StateError("backward called without a preceding forward pass")
        if pred2.shape != targets2.shape or pred2.shape[0] != cache.batch:
            raise StateError(
                f"forward cache holds batch {cache.batch}, got predictions {pred2.shape} "
                f"and targets {targets2.shape}"
            )
        self._cache = None
        B, T_out = pred2.shape
        diff = pred2 - targets2
        loss = float(np.mean(diff * diff))
        dy = 2.0 * diff / (B * T_out)

        (W1, _), (W2, _), (W3, _) = self.decoder_fc
        (gW1, gb1), (gW2, gb2), (gW3, gb3) = self.decoder_fc_grads
        dh_next = np.zeros((B, self.config.hidden_size))
        for t in reversed(range(T_out)):
            h, a1, o1, a2, o2 = cache.fc[t]
            dy_t = dy[:, t:t + 1]
            gW3 += dy_t.T @ o2
            gb3 += dy_t.sum(axis=0)[:, None]
            da2 = (dy_t @ W3) * (a2 > 0)
            gW2 += da2.T @ o1
            gb2 += da2.sum(axis=0)[:, None]
            da1 = (da2 @ W2) * (a1 > 0)
            gW1 += da1.T @ h
            gb1 += da1.sum(axis=0)[:, None]
            dh = da1 @ W1 + dh_next
            _, dh_next = gru_cell_backward(dh, cache.decoder[t], self.decoder_gru, self.decoder_gru_grads)

        d_from_above: list[np.ndarray] | None = None
        top = len(self.encoder) - 1
        for layer in reversed(range(len(self.encoder))):
            layer_cache = cache.encoder[layer]
            dh = dh_next if layer == top else np.zeros((B, self.config.hidden_size))
            d_inputs: list[np.ndarray] = [None] * len(layer_cache)  # type: ignore[list-item]
            for t in reversed(range(len(layer_cache))):
                if d_from_above is not None:
                    dh = dh + d_from_above[t]
                dx, dh = gru_cell_backward(dh, layer_cache[t], self.encoder[layer], self.encoder_grads[layer])
                d_inputs[t] = dx
            d_from_above = d_inputs
        return loss

    # -- training ---------------------------------------------------------

    def loss_and_grad(self, batch: SampleArrays) -> float:
        pred = self.forward(batch.history, batch.future_plans)
        return self.backward(pred, batch.targets)

    def evaluate(self, samples: Sequence[Sample] | SampleArrays) -> float:
        """Mean per-sample MSE over ``samples``; NaN for an empty set."""
        if len(samples) == 0:
            return float("nan")
        data = stack_samples(samples)
        pred = self.forward(data.history, data.future_plans)
        self._cache = None
        return mse_loss(pred, data.targets)

    def train_epoch(self, samples: Sequence[Sample] | SampleArrays, batch_size: int = 60,
                    lr: float = 0.005) -> float:
        """One shuffled pass of mini-batch SGD; returns the mean of the batch losses."""
        if len(samples) == 0:
            raise ValueError("train_epoch needs at least one sample")
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        data = stack_samples(samples)
        order = np.array(self.rng.permutation(len(data)), dtype=np.intp)
        losses = []
        for start in range(0, len(order), batch_size):
            batch = data.take(order[start:start + batch_size])
            self.params.zero_grad()
            losses.append(self.loss_and_grad(batch))
            sgd_step(self.params, lr)
        return float(np.mean(losses))


def forward(model: Seq2seqModel, sample: Sample) -> np.ndarray:
    return model.predict(sample)


def backward(model: Seq2seqModel, sample: Sample, pred: np.ndarray) -> float:
    return model.backward(pred, sample.targets)
