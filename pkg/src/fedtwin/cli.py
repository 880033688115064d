"""Command-line experiment runner.

Commands: ``prepare``, ``compare``, ``scale``, ``gradcheck``, ``serve`` and
``client``. Settings come from, in increasing priority, the dataclass
defaults, an INI file (``--config``, section ``[experiment]``), ``FEDTWIN_*``
environment variables and the command-line flags.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, fields
from pathlib import Path

from . import data as D
from .errors import CheckFailed, ConfigError, FedTwinError
from .federation import (ClientNode, FederationConfig, RoundReport, ServerState,
                         run_federation)
from .gradcheck import REL_TOL, run_gradcheck
from .model import ModelConfig
from .transport import connect, serialize_params, serve

log = logging.getLogger("fedtwin")

ENV_PREFIX = "FEDTWIN_"
SECTION = "experiment"

COMPARE_COLUMNS = ("round", "client_id", "mode", "train_mse", "test_mse",
                   "local_final_test_mse", "federated_final_test_mse")
SCALE_COLUMNS = ("n_clients", "probe_test_mse", "mean_test_mse", "probe_local_test_mse")
CLIENTS_COLUMNS = ("client_id", "region", "m", "m_train", "m_test", "scale_min", "scale_max")


@dataclass
class ExperimentConfig:
    mode: str = "federated"            # federated | local-only | scale-sweep
    source: str = "synthetic"          # synthetic | files
    n_clients: int = 6
    days: int = 120
    cases: str = ""                    # region,date,confirmed CSV (source=files)
    actions: str = ""                  # region,plan,start,end CSV (source=files)
    cumulative: bool = False
    plans: tuple[str, ...] = D.DEFAULT_PLANS
    seed: int = 0
    rounds: int = 20
    local_epochs: int = 2
    lr: float = 0.005
    batch_size: int = 60
    hidden_size: int = 16
    fc_widths: tuple[int, ...] = (32, 16)
    test_fraction: float = 0.2
    client_counts: tuple[int, ...] = (2, 4, 8)
    workers: int = 1
    pretrain_client: int = -1          # -1 disables pre-training
    pretrain_epochs: int = 0
    address: str = "127.0.0.1:7070"
    client_id: int = 0
    accept_timeout: float = 60.0
    connect_timeout: float = 10.0
    out: str = "out"

    def validate(self) -> None:
        errors = []
        if self.mode not in ("federated", "local-only", "scale-sweep"):
            errors.append(f"mode: unknown value {self.mode!r}")
        if self.source not in ("synthetic", "files"):
            errors.append(f"source: unknown value {self.source!r}")
        if self.source == "files" and not (self.cases and self.actions):
            errors.append("cases/actions: both paths are required when source=files")
        if self.n_clients < 1:
            errors.append("n_clients: must be >= 1")
        if self.days < D.MIN_SPAN:
            errors.append(f"days: must be >= {D.MIN_SPAN}")
        if not self.plans:
            errors.append("plans: at least one plan name is required")
        if any(n < 1 for n in self.client_counts) or not self.client_counts:
            errors.append("client_counts: every entry must be >= 1")
        if not 0.0 <= self.test_fraction < 1.0:
            errors.append("test_fraction: must lie in [0, 1)")
        if not (self.accept_timeout > 0 and self.connect_timeout > 0):
            errors.append("accept_timeout/connect_timeout: must be positive")
        if errors:
            raise ConfigError("; ".join(errors))
        self.model_config()
        self.federation_config().validate()

    def model_config(self) -> ModelConfig:
        if len(self.fc_widths) != 2:
            raise ConfigError("fc_widths: expected two widths, e.g. 32,16")
        return ModelConfig(plan_dim=len(self.plans), hidden_size=self.hidden_size,
                           fc_widths=tuple(self.fc_widths))

    def federation_config(self, mode: str = "federated") -> FederationConfig:
        return FederationConfig(
            rounds=self.rounds, local_epochs=self.local_epochs, lr=self.lr,
            batch_size=self.batch_size, mode=mode, seed=self.seed, model=self.model_config(),
            pretrain_client=self.pretrain_client if self.pretrain_client >= 0 else None,
            pretrain_epochs=self.pretrain_epochs, workers=self.workers)


# --------------------------------------------------------------------------
# Configuration loading
# --------------------------------------------------------------------------

def _convert(f: dataclasses.Field, text: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "tuple[int, ...]":
            return tuple(int(p) for p in text.split(",") if p.strip())
        if kind == "tuple[str, ...]":
            return tuple(p.strip() for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"{f.name}: cannot parse {text!r} as {kind}") from None


def load_config(path: str | None = None, env: dict[str, str] | None = None,
                overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Merge defaults, INI file, environment and explicit overrides (lowest to highest)."""
    env = os.environ if env is None else env
    by_name = {f.name: f for f in fields(ExperimentConfig)}
    raw: dict[str, str] = {}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not parser.has_section(SECTION):
            raise ConfigError(f"{path}: missing [{SECTION}] section")
        for key, value in parser.items(SECTION):
            if key not in by_name:
                raise ConfigError(f"{path}: unknown key {key!r}")
            raw[key] = value
    for key, value in env.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name not in by_name:
                raise ConfigError(f"{key}: unknown setting {name!r}")
            raw[name] = value
    raw.update(overrides or {})
    values = {name: _convert(by_name[name], text) for name, text in raw.items()}
    config = ExperimentConfig(**values)
    config.validate()
    return config


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------

def load_datasets(config: ExperimentConfig, n_clients: int | None = None) -> list[D.ClientDataset]:
    """Client datasets in client-id order; synthetic client ``i`` depends only on (seed, i)."""
    catalog = D.PlanCatalog(tuple(config.plans))
    if config.source == "synthetic":
        return D.gen_synthetic(n_clients or config.n_clients, config.days, catalog, config.seed)
    records = D.ingest_cases(config.cases, cumulative=config.cumulative)
    intervals = D.ingest_actions(config.actions)
    datasets = D.build_client_datasets(records, intervals, catalog)
    if n_clients is not None:
        if n_clients > len(datasets):
            raise ConfigError(f"client_counts: {n_clients} clients requested, files hold {len(datasets)} regions")
        datasets = datasets[:n_clients]
    return datasets


def split_all(datasets: Sequence[D.ClientDataset], test_fraction: float):
    return [D.train_test_split(ds, test_fraction) for ds in datasets]


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------

def fmt(x: float | int | str | None) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_jsonl(path: Path, reports: Sequence[RoundReport]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_dict(), sort_keys=True, allow_nan=False) + "\n")


def _outdir(config: ExperimentConfig) -> Path:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_prepare(config: ExperimentConfig) -> int:
    """Write the windowed dataset (combined.csv) and per-client sizes (clients.csv).

    For synthetic data the raw inputs are also written as cases.csv and
    actions.csv, so the same run can be repeated with ``source=files``.
    """
    out = _outdir(config)
    catalog = D.PlanCatalog(tuple(config.plans))
    if config.source == "synthetic":
        effects = D.shared_effects(catalog, config.seed)
        case_rows, action_rows = [], []
        for i in range(config.n_clients):
            client = D.synthesize_client(i, config.days, catalog, effects, config.seed)
            records, intervals = D.synthetic_to_records(client, catalog)
            case_rows += [(r.region, r.date.isoformat(), r.confirmed) for r in records]
            action_rows += [(iv.region, iv.plan_name, iv.start.isoformat(), iv.end.isoformat() if iv.end else "")
                            for iv in intervals]
        write_csv(out / "cases.csv", ("region", "date", "confirmed"), case_rows)
        write_csv(out / "actions.csv", ("region", "plan", "start", "end"), action_rows)
    datasets = load_datasets(config)

    offsets = [f"t{d:+d}" if d else "t" for d in range(-D.HISTORY_LEN + 1, D.HORIZON + 1)]
    header = ["region", "date"] + [f"data_{o}" for o in offsets] + [f"plan_{o}" for o in offsets]
    combined, clients = [], []
    for cid, ds in enumerate(datasets):
        train, test = D.train_test_split(ds, config.test_fraction)
        clients.append((cid, ds.region, ds.m, train.m, test.m, ds.scaler.min, ds.scaler.max))
        for day, s in zip(ds.dates, ds.samples):
            values = [float(v) for v in s.history[:, 0]] + [float(v) for v in s.targets.reshape(-1)]
            plan_rows = list(s.history[:, 1:]) + list(s.future_plans)
            bits = ["".join(str(int(b)) for b in row) for row in plan_rows]
            combined.append([ds.region, day.isoformat()] + values + bits)
    write_csv(out / "combined.csv", header, combined)
    write_csv(out / "clients.csv", CLIENTS_COLUMNS, clients)
    print(f"prepared {len(datasets)} clients, {len(combined)} samples -> {out}")
    return 0


def _final_test(report: RoundReport) -> dict[int, float]:
    return {c.client_id: c.test_mse for c in report.clients}


def cmd_compare(config: ExperimentConfig) -> int:
    """Local-only versus federated training at a matched epoch budget."""
    splits = split_all(load_datasets(config), config.test_fraction)
    if len(splits) < 2:
        raise ConfigError(f"compare needs at least 2 clients, got {len(splits)}")
    local = run_federation(config.federation_config("local-only"), splits)
    fed = run_federation(config.federation_config("federated"), splits)
    rows = []
    for mode, result in (("local-only", local), ("federated", fed)):
        for rep in result.reports:
            rows += [(rep.round, c.client_id, mode, c.train_mse, c.test_mse, None, None) for c in rep.clients]
    loc_final = _final_test(local.reports[-1]) if local.reports else {}
    fed_final = _final_test(fed.reports[-1]) if fed.reports else {}
    wins = 0
    for cid in range(len(splits)):
        lf, ff = loc_final.get(cid, math.nan), fed_final.get(cid, math.nan)
        wins += ff <= lf
        rows.append(("final", cid, "summary", None, None, lf, ff))
    out = _outdir(config)
    write_csv(out / "compare.csv", COMPARE_COLUMNS, rows)
    write_jsonl(out / "rounds.jsonl", local.reports + fed.reports)
    print(f"federated <= local-only on {wins}/{len(splits)} clients -> {out / 'compare.csv'}")
    return 0


def cmd_scale(config: ExperimentConfig) -> int:
    """Federations of growing size that always contain the probe client 0."""
    counts = list(config.client_counts)
    fed_cfg = config.federation_config("federated")
    probe_split = split_all(load_datasets(config, 1), config.test_fraction)
    baseline = run_federation(config.federation_config("local-only"), probe_split)
    probe_local = _final_test(baseline.reports[-1])[0] if baseline.reports else math.nan
    rows, reports = [], []
    for n in counts:
        splits = split_all(load_datasets(config, n), config.test_fraction)
        result = run_federation(fed_cfg, splits)
        reports += result.reports
        last = result.reports[-1] if result.reports else None
        probe = _final_test(last)[0] if last else math.nan
        tests = [c.test_mse for c in last.clients if not math.isnan(c.test_mse)] if last else []
        mean = sum(tests) / len(tests) if tests else math.nan
        rows.append((n, probe, mean, probe_local))
        log.info("N=%d probe=%.6g mean=%.6g", n, probe, mean)
    out = _outdir(config)
    write_csv(out / "scale.csv", SCALE_COLUMNS, rows)
    write_jsonl(out / "rounds.jsonl", reports)
    print(f"scale sweep {counts} -> {out / 'scale.csv'}")
    return 0


def cmd_gradcheck(config: ExperimentConfig) -> int:
    result = run_gradcheck(n_models=20, seed=config.seed)
    print(f"gradcheck: {result.n_models} models, {result.n_components} components, "
          f"max relative error {result.max_error:.3e} ({result.worst_param})")
    if not result.passed:
        raise CheckFailed(f"max relative error {result.max_error:.3e} exceeds {REL_TOL:g}")
    return 0


def cmd_serve(config: ExperimentConfig) -> int:
    server = ServerState.initialize(config.model_config(), config.seed)
    try:
        result = serve(config.address, config.n_clients, config.rounds, server.manifest,
                       server.global_values, accept_timeout=config.accept_timeout,
                       on_listening=lambda a: print(f"listening on {a[0]}:{a[1]}", flush=True))
    except OSError as exc:
        raise ConfigError(f"cannot listen on {config.address}: {exc.strerror or exc}") from None
    out = _outdir(config)
    write_jsonl(out / "rounds.jsonl", result.reports)
    (out / "global.bin").write_bytes(serialize_params(result.manifest, result.global_values))
    print(f"served {result.rounds_completed}/{config.rounds} rounds -> {out}")
    return 0 if result.rounds_completed == config.rounds else 3


def cmd_client(config: ExperimentConfig) -> int:
    datasets = load_datasets(config)
    if not 0 <= config.client_id < len(datasets):
        raise ConfigError(f"client_id: {config.client_id} is outside 0..{len(datasets) - 1}")
    train, test = D.train_test_split(datasets[config.client_id], config.test_fraction)
    node = ClientNode(config.client_id, train, test, config.model_config(), config.seed, config.local_epochs)
    try:
        return connect(config.address, node, config.lr, config.batch_size, timeout=config.connect_timeout)
    except OSError as exc:
        print(f"error: cannot reach server at {config.address}: {exc.strerror or exc}", file=sys.stderr)
        return 3


COMMANDS = {
    "prepare": cmd_prepare,
    "compare": cmd_compare,
    "scale": cmd_scale,
    "gradcheck": cmd_gradcheck,
    "serve": cmd_serve,
    "client": cmd_client,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtwin", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="INI file with an [experiment] section")
    parser.add_argument("--seed", help="master seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--address", help="host:port for serve/client")
    parser.add_argument("--client-id", dest="client_id", help="client id for the client command")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return ConfigError.exit_code
        overrides[key.strip()] = value
    for name in ("seed", "out", "address", "client_id"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    try:
        unknown = sorted(set(overrides) - {f.name for f in fields(ExperimentConfig)})
        if unknown:
            raise ConfigError(f"unknown setting(s): {', '.join(unknown)}")
        config = load_config(args.config, overrides=overrides)
        with warnings.catch_warnings():
            warnings.simplefilter("default", D.DataWarning)
            return COMMANDS[args.command](config)
    except FedTwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
