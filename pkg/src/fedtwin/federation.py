"""Synchronous FedAvg rounds over simulated clients.

A round distributes the global parameters, lets every client with data train
locally for ``E`` epochs, aggregates the returned parameters weighted by each
client's training-set size, installs the result and evaluates it on every
client's held-out split.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import ClientDataset
from .errors import ConfigError, ProtocolError, RegistrationError, RoundAborted
from .model import ModelConfig, Sample, Seq2seqModel, SampleArrays, stack_samples
from .numerics import derive_seed

log = logging.getLogger(__name__)

Manifest = list[tuple[str, int, int]]


@dataclass
class ClientUpdate:
    client_id: int
    round: int
    manifest: Manifest
    values: list[np.ndarray]
    m: int

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ProtocolError(f"client {self.client_id}: update must carry m >= 1, got {self.m}")


@dataclass
class Skip:
    client_id: int
    round: int
    reason: str


@dataclass
class ClientMetrics:
    client_id: int
    m: int
    train_mse: float
    test_mse: float
    status: str = "ok"   # ok | no-data | disconnected | <other skip reason>


@dataclass
class RoundReport:
    round: int
    mode: str
    clients: list[ClientMetrics]
    weights: dict[int, float]
    global_test_mse: float

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "mode": self.mode,
            "global_test_mse": _json_float(self.global_test_mse),
            "weights": {str(k): v for k, v in sorted(self.weights.items())},
            "clients": [
                {**asdict(c), "train_mse": _json_float(c.train_mse), "test_mse": _json_float(c.test_mse)}
                for c in self.clients
            ],
        }


def _json_float(x: float) -> float | None:
    return None if x is None or not math.isfinite(x) else x


def fedavg(updates: Sequence[ClientUpdate]) -> list[np.ndarray]:
    """Sample-count weighted mean of client parameters.

    Summation runs left to right in ascending ``client_id`` order, so the
    result does not depend on arrival order.
    """
    if not updates:
        raise ProtocolError("fedavg needs at least one update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    first = ordered[0]
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids in updates: {ids}")
    for u in ordered[1:]:
        if u.round != first.round:
            raise ProtocolError(f"update from client {u.client_id} is for round {u.round}, expected {first.round}")
        if [tuple(e) for e in u.manifest] != [tuple(e) for e in first.manifest]:
            raise ProtocolError(f"client {u.client_id} sent a manifest that differs from client {first.client_id}")
    total = sum(u.m for u in ordered)
    weights = [u.m / total for u in ordered]
    out = []
    for k in range(len(first.values)):
        acc = weights[0] * np.asarray(ordered[0].values[k], dtype=np.float64)
        for w, u in zip(weights[1:], ordered[1:]):
            acc = acc + w * np.asarray(u.values[k], dtype=np.float64)
        out.append(acc)
    return out


class ClientNode:
    """One simulated region: its private train/test split and its own model."""

    def __init__(self, client_id: int, train: ClientDataset | Sequence[Sample],
                 test: ClientDataset | Sequence[Sample] = (), model_config: ModelConfig | None = None,
                 seed: int = 0, local_epochs: int = 2):
        self.client_id = int(client_id)
        self.train = list(train.samples if isinstance(train, ClientDataset) else train)
        self.test = list(test.samples if isinstance(test, ClientDataset) else test)
        self.region = train.region if isinstance(train, ClientDataset) else f"client{client_id:02d}"
        self.local_epochs = local_epochs
        self.model = Seq2seqModel(model_config, seed=derive_seed(seed, "client", self.client_id))
        self.last_received: list[np.ndarray] | None = None
        self.last_received_round: int | None = None
        self._train_arrays: SampleArrays | None = stack_samples(self.train) if self.train else None
        self._test_arrays: SampleArrays | None = stack_samples(self.test) if self.test else None
        self._scratch: Seq2seqModel | None = None

    @property
    def m(self) -> int:
        return len(self.train)

    def receive(self, values: Sequence[np.ndarray], round_: int) -> None:
        self.last_received = [np.array(v, copy=True) for v in values]
        self.last_received_round = round_
        self.model.params.load(values)

    def local_train(self, global_values: Sequence[np.ndarray], round_: int, lr: float,
                    batch_size: int, epochs: int | None = None) -> ClientUpdate | Skip:
        """Load the global model, train locally and report the result with m."""
        epochs = self.local_epochs if epochs is None else epochs
        self.receive(global_values, round_)
        if self.m == 0:
            return Skip(self.client_id, round_, "no-data")
        for _ in range(epochs):
            self.model.train_epoch(self._train_arrays, batch_size, lr)
        return ClientUpdate(self.client_id, round_, self.model.params.manifest(),
                            self.model.params.values(), self.m)

    def train_local_only(self, epochs: int, lr: float, batch_size: int) -> None:
        """Continue training the local model in isolation (no global model)."""
        if self.m == 0:
            return
        for _ in range(epochs):
            self.model.train_epoch(self._train_arrays, batch_size, lr)

    def evaluate(self, values: Sequence[np.ndarray] | None = None) -> tuple[float, float]:
        """(train MSE, test MSE) of ``values``, or of the local model when None."""
        model = self.model
        if values is not None:
            if self._scratch is None:
                self._scratch = Seq2seqModel(self.model.config, seed=0)
            model = self._scratch
            model.params.load(values)
        train = model.evaluate(self._train_arrays) if self._train_arrays is not None else float("nan")
        test = model.evaluate(self._test_arrays) if self._test_arrays is not None else float("nan")
        return train, test


@dataclass
class ServerState:
    model_config: ModelConfig
    global_values: list[np.ndarray]
    manifest: Manifest
    round: int = 0
    client_ids: list[int] = field(default_factory=list)
    strategy: str = "fedavg"
    history: list[list[np.ndarray]] = field(default_factory=list)  # global values after each round

    @classmethod
    def initialize(cls, model_config: ModelConfig, seed: int = 0) -> ServerState:
        model = Seq2seqModel(model_config, seed=derive_seed(seed, "global"))
        return cls(model_config, model.params.values(), model.params.manifest())

    def register_client(self, client: ClientNode) -> ServerState:
        """Admit a client; it starts from the current global model on its first round."""
        if client.client_id in self.client_ids:
            raise RegistrationError(f"client id {client.client_id} is already registered")
        self.client_ids.append(client.client_id)
        return self


def register_client(server: ServerState, client: ClientNode) -> ServerState:
    return server.register_client(client)


def _weights(metrics: Sequence[ClientMetrics]) -> dict[int, float]:
    participants = [c for c in metrics if c.status == "ok"]
    total = sum(c.m for c in participants)
    return {c.client_id: c.m / total for c in participants} if total else {}


def make_report(round_: int, mode: str, metrics: list[ClientMetrics]) -> RoundReport:
    weights = _weights(metrics)
    by_id = {c.client_id: c for c in metrics}
    global_test = 0.0
    for cid in sorted(weights):
        global_test += weights[cid] * by_id[cid].test_mse
    if not weights:
        global_test = float("nan")
    return RoundReport(round_, mode, sorted(metrics, key=lambda c: c.client_id), weights, global_test)


def run_round(server: ServerState, clients: Sequence[ClientNode], lr: float = 0.005,
              batch_size: int = 60, workers: int = 1) -> RoundReport:
    """One synchronous round: distribute, train locally, FedAvg, install, evaluate."""
    active = sorted((c for c in clients if c.client_id in server.client_ids), key=lambda c: c.client_id)
    if not active:
        raise RoundAborted("no registered clients")
    next_round = server.round + 1
    snapshot = [v.copy() for v in server.global_values]

    def train(c: ClientNode) -> ClientUpdate | Skip:
        return c.local_train(snapshot, next_round, lr, batch_size)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(train, active))
    else:
        results = [train(c) for c in active]

    updates = [r for r in results if isinstance(r, ClientUpdate)]
    if not updates:
        raise RoundAborted(f"round {next_round}: every client skipped")
    server.global_values = fedavg(updates)
    server.round = next_round
    server.history.append([v.copy() for v in server.global_values])

    metrics = []
    for c, r in zip(active, results):
        train_mse, test_mse = c.evaluate(server.global_values)
        status = "ok" if isinstance(r, ClientUpdate) else r.reason
        metrics.append(ClientMetrics(c.client_id, c.m, train_mse, test_mse, status))
    report = make_report(server.round, "federated", metrics)
    log.info("round %d: weighted test MSE %.6g", server.round, report.global_test_mse)
    return report


@dataclass
class FederationConfig:
    rounds: int = 20
    local_epochs: int = 2
    lr: float = 0.005
    batch_size: int = 60
    mode: str = "federated"              # federated | local-only
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain_client: int | None = None   # client id whose train set pre-trains the global model
    pretrain_epochs: int = 0
    workers: int = 1

    def validate(self) -> None:
        errors = []
        if self.rounds < 0:
            errors.append("rounds: must be >= 0")
        if self.local_epochs < 0:
            errors.append("local_epochs: must be >= 0")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            errors.append("lr: must be a positive number")
        if self.batch_size < 1:
            errors.append("batch_size: must be >= 1")
        if self.mode not in ("federated", "local-only"):
            errors.append(f"mode: unknown mode {self.mode!r}")
        if self.pretrain_epochs < 0:
            errors.append("pretrain_epochs: must be >= 0")
        if self.workers < 1:
            errors.append("workers: must be >= 1")
        if errors:
            raise ConfigError("; ".join(errors))


@dataclass
class FederationResult:
    reports: list[RoundReport]
    global_values: list[np.ndarray]
    manifest: Manifest
    client_values: dict[int, list[np.ndarray]]


def build_clients(splits: Sequence[tuple[ClientDataset, ClientDataset]], config: FederationConfig) -> list[ClientNode]:
    return [ClientNode(i, train, test, config.model, config.seed, config.local_epochs)
            for i, (train, test) in enumerate(splits)]


def run_federation(config: FederationConfig, splits: Sequence[tuple[ClientDataset, ClientDataset]],
                   clients: Sequence[ClientNode] | None = None) -> FederationResult:
    """Run ``config.rounds`` rounds (or the local-only baseline) over the given client splits.

    Client ``i`` is ``splits[i]``. In ``local-only`` mode every client starts
    from the same initial global model and trains alone for ``rounds * E``
    epochs; one report is produced per ``E`` epochs so both modes line up.
    """
    config.validate()
    if clients is None:
        clients = build_clients(splits, config)
    server = ServerState.initialize(config.model, config.seed)

    if config.pretrain_client is not None and config.pretrain_epochs > 0:
        donor = next((c for c in clients if c.client_id == config.pretrain_client), None)
        if donor is None or donor.m == 0:
            raise ConfigError(f"pretrain_client: client {config.pretrain_client} has no training data")
        pre = Seq2seqModel(config.model, seed=derive_seed(config.seed, "global"))
        pre.params.load(server.global_values)
        for _ in range(config.pretrain_epochs):
            pre.train_epoch(donor._train_arrays, config.batch_size, config.lr)
        server.global_values = pre.params.values()

    reports: list[RoundReport] = []
    if config.mode == "local-only":
        for c in clients:
            c.receive(server.global_values, 0)
        for r in range(1, config.rounds + 1):
            metrics = []
            for c in clients:
                c.train_local_only(config.local_epochs, config.lr, config.batch_size)
                train_mse, test_mse = c.evaluate()
                metrics.append(ClientMetrics(c.client_id, c.m, train_mse, test_mse,
                                             "ok" if c.m else "no-data"))
            reports.append(make_report(r, "local-only", metrics))
        return FederationResult(reports, server.global_values, server.manifest,
                                {c.client_id: c.model.params.values() for c in clients})

    for c in clients:
        server.register_client(c)
    for _ in range(config.rounds):
        reports.append(run_round(server, clients, config.lr, config.batch_size, config.workers))
    return FederationResult(reports, server.global_values, server.manifest,
                            {c.client_id: c.model.params.values() for c in clients})
