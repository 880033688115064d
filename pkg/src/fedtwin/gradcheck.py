"""Finite-difference verification of the hand-written backward pass.

The oracle differentiates an independent re-implementation of the forward
pass: a per-sample loop written directly from the GRU/FC equations and
evaluated in extended precision (``numpy.longdouble``). Central differences
of a float64 loss lose about ``eps_machine * |loss| / eps`` to rounding,
roughly 1e-11 here, which would swamp a 1e-6 relative comparison for gradient
components near 1e-8. The wider format pushes that noise below 1e-14.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, Sample, Seq2seqModel
from .numerics import ParamStore, SeededRng, derive_seed, numeric_gradient

EXT = np.longdouble
REL_TOL = 1e-6
ABS_FLOOR = 1e-8  # below this |analytic| the comparison is absolute


def reference_loss(params: ParamStore, sample: Sample, num_encoder_layers: int) -> np.longdouble:
    """MSE of one sample computed from scratch in extended precision."""
    v = {e.name: e.value.astype(EXT) for e in params}

    def sig(a):
        return 1 / (1 + np.exp(-a))

    def cell(prefix, x, h):
        z = sig(v[prefix + ".W_z"] @ x + v[prefix + ".U_z"] @ h + v[prefix + ".b_z"][:, 0])
        r = sig(v[prefix + ".W_r"] @ x + v[prefix + ".U_r"] @ h + v[prefix + ".b_r"][:, 0])
        cand = np.tanh(v[prefix + ".W_h"] @ x + v[prefix + ".U_h"] @ (r * h) + v[prefix + ".b_h"][:, 0])
        return (1 - z) * h + z * cand

    hidden = v["encoder.0.U_z"].shape[0]
    seq = [row.astype(EXT) for row in np.asarray(sample.history)]
    h = np.zeros(hidden, dtype=EXT)
    for layer in range(num_encoder_layers):
        h = np.zeros(hidden, dtype=EXT)
        out = []
        for x in seq:
            h = cell(f"encoder.{layer}", x, h)
            out.append(h)
        seq = out
    total = EXT(0)
    targets = np.asarray(sample.targets, dtype=EXT).reshape(-1)
    for t, plan in enumerate(np.asarray(sample.future_plans)):
        h = cell("decoder.gru", plan.astype(EXT), h)
        a = np.maximum(v["decoder.fc.0.weight"] @ h + v["decoder.fc.0.bias"][:, 0], 0)
        a = np.maximum(v["decoder.fc.1.weight"] @ a + v["decoder.fc.1.bias"][:, 0], 0)
        y = v["decoder.fc.2.weight"] @ a + v["decoder.fc.2.bias"][:, 0]
        total += (y[0] - targets[t]) ** 2
    return total / len(targets)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Per-component error: relative where |analytic| >= 1e-8, absolute otherwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    diff = np.abs(analytic - np.asarray(numeric, dtype=np.float64))
    big = np.abs(analytic) >= ABS_FLOOR
    out = diff.copy()
    out[big] = diff[big] / np.abs(analytic[big])
    return out


def random_case(seed: int, hidden_size: int = 4, plan_dim: int = 2,
                fc_widths: tuple[int, int] = (4, 3)) -> tuple[Seq2seqModel, Sample]:
    """A tiny model with every parameter (biases included) drawn from U(-0.5, 0.5), plus one sample."""
    config = ModelConfig(plan_dim=plan_dim, hidden_size=hidden_size, fc_widths=fc_widths)
    model = Seq2seqModel(config, seed=seed)
    rng = SeededRng(derive_seed(seed, "gradcheck"))
    for entry in model.params:
        flat = [rng.uniform(-0.5, 0.5) for _ in range(entry.value.size)]
        entry.value[...] = np.array(flat).reshape(entry.value.shape)

    def bits(n: int) -> list[float]:
        return [float(rng.randrange(2)) for _ in range(n)]

    T, H = config.history_len, config.horizon
    history = np.array([[rng.random()] + bits(plan_dim) for _ in range(T)])
    plans = np.array([bits(plan_dim) for _ in range(H)])
    targets = np.array([rng.random() for _ in range(H)])
    return model, Sample(history, plans, targets)


@dataclass
class GradCheckResult:
    max_error: float
    worst_param: str
    n_models: int
    n_components: int

    @property
    def passed(self) -> bool:
        return self.max_error <= REL_TOL


def check_model(model: Seq2seqModel, sample: Sample, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Per-parameter error arrays comparing backward() with central differences."""
    model.params.zero_grad()
    pred = model.predict(sample)
    model.backward(pred, sample.targets)
    analytic = {e.name: e.grad.copy() for e in model.params}
    model.params.zero_grad()
    layers = model.config.num_encoder_layers
    numeric = numeric_gradient(lambda p: reference_loss(p, sample, layers), model.params, eps)
    return {name: relative_errors(analytic[name], numeric[name]) for name in analytic}


def run_gradcheck(n_models: int = 20, seed: int = 0, eps: float = 1e-5, hidden_size: int = 4,
                  plan_dim: int = 2) -> GradCheckResult:
    worst, worst_name, components = 0.0, "", 0
    for i in range(n_models):
        model, sample = random_case(derive_seed(seed, "case", i), hidden_size, plan_dim)
        for name, err in check_model(model, sample, eps).items():
            components += err.size
            if err.max() > worst:
                worst, worst_name = float(err.max()), name
    return GradCheckResult(worst, worst_name, n_models, components)
