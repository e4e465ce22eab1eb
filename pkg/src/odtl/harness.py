"""Experiment orchestration and metrics.

One experiment = one split strategy over one dataset.  For every round the
network is trained offline on the round's offline train/validation sets,
deployed in the requested numeric mode, scored on the test set, and
optionally adapted on the round's post-deployment stream and scored again on
the same test set.
"""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as M
from .dataset import WindowedDataset
from .engine import OdtlConfig, OdtlEngine
from .errors import DomainError, OdtlError, ShapeError
from .numerics import NumericMode
from .splits import SplitPlan, SplitRound, Strategy, make_l1po, make_l1po2, make_l1so
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

REPORT_HEADER = "# odtl-report v1"


@dataclass(frozen=True)
class OdtlSchedule:
    epochs: int = 1
    learning_rate: float = 0.002
    momentum: float = 0.9
    shuffle_seed: int = 0
    tile_size: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise DomainError("an ODTL schedule needs at least one epoch")
        OdtlConfig(self.learning_rate, self.momentum, self.tile_size)

    def engine_config(self) -> OdtlConfig:
        return OdtlConfig(self.learning_rate, self.momentum, self.tile_size)


PRESETS: dict[str, OdtlSchedule] = {
    "recgym": OdtlSchedule(epochs=1, learning_rate=0.002, momentum=0.9),
    "qvar": OdtlSchedule(epochs=5, learning_rate=0.002, momentum=0.5),
    "ultra": OdtlSchedule(epochs=1, learning_rate=0.002, momentum=0.5),
}


def preset(name: str, shuffle_seed: int = 0) -> OdtlSchedule:
    try:
        return replace(PRESETS[name], shuffle_seed=shuffle_seed)
    except KeyError:
        raise DomainError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def uicd_loss(acc_l1so: float, acc_l1po: float) -> float:
    """Accuracy lost to unseen users: mean L1SO accuracy minus mean L1PO accuracy."""
    return acc_l1so - acc_l1po


def count_macs(topology: M.Topology) -> int:
    """Multiply-accumulates per inference (conv layers plus the dense layer)."""
    total = sum(3 * s.in_channels * s.out_channels * topology.input_width
                for s in topology.conv_specs())
    return total + topology.num_classes * topology.feature_dim


def count_update_params(topology: M.Topology) -> int:
    return topology.num_classes * topology.feature_dim + topology.num_classes


@dataclass
class Embeddings:
    users: np.ndarray
    labels: np.ndarray
    vectors: np.ndarray

    def __len__(self):
        return len(self.labels)

    def to_csv(self) -> str:
        lines = ["user_id,label," + ",".join(f"f{j}" for j in range(self.vectors.shape[1]))]
        for u, y, v in zip(self.users, self.labels, self.vectors):
            lines.append(f"{u},{y}," + ",".join(repr(float(a)) for a in v))
        return "\n".join(lines) + "\n"


def export_embeddings(params: M.ModelParams, ds: WindowedDataset, indices=None) -> Embeddings:
    topo = params.topology
    if (ds.channels, ds.width) != (topo.input_channels, topo.input_width):
        raise ShapeError("dataset windows do not match the model topology")
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices, dtype=np.int64)
    vectors = [M.backbone(params, ds.windows[idx[i:i + 64]]) for i in range(0, len(idx), 64)]
    vecs = np.concatenate(vectors) if vectors else np.zeros((0, topo.feature_dim), np.float32)
    return Embeddings(ds.users[idx].copy(), ds.labels[idx].copy(), vecs)


# ------------------------------------------------------------------ reports

@dataclass
class RoundRecord:
    round_id: int
    user: int | None
    status: str
    n_train: int
    n_val: int
    n_odtl: int
    n_test: int
    acc_oft: float | None = None
    acc_odtl: float | None = None
    updates: int = 0
    error: str = ""
    test_digest: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _fmt(v) -> str:
    if v is None:
        return "na"
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentReport:
    strategy: Strategy
    numeric_mode: NumericMode
    rounds: list[RoundRecord]
    macs_per_inference: int
    params_per_update: int
    odtl_enabled: bool = False
    schedule: OdtlSchedule | None = None

    @property
    def ok_rounds(self) -> list[RoundRecord]:
        return [r for r in self.rounds if r.ok]

    @property
    def failed(self) -> int:
        return sum(not r.ok for r in self.rounds)

    @property
    def mean_acc_oft(self) -> float | None:
        return _mean(r.acc_oft for r in self.ok_rounds)

    @property
    def mean_acc_odtl(self) -> float | None:
        if not self.odtl_enabled:
            return None
        return _mean(r.acc_odtl for r in self.ok_rounds)

    @property
    def odtl_gain(self) -> float | None:
        after, before = self.mean_acc_odtl, self.mean_acc_oft
        if after is None or before is None:
            return None
        return after - before

    @property
    def updates_performed(self) -> int:
        return sum(r.updates for r in self.ok_rounds)

    def records(self) -> list[dict]:
        out = []
        for r in self.rounds:
            out.append({
                "record": "round", "strategy": self.strategy.value,
                "mode": self.numeric_mode.short_name, "round": r.round_id,
                "user": r.user, "status": r.status, "n_train": r.n_train, "n_val": r.n_val,
                "n_odtl": r.n_odtl, "n_test": r.n_test, "acc_oft": r.acc_oft,
                "acc_odtl": r.acc_odtl, "updates": r.updates, "test_digest": r.test_digest,
                **({"error": r.error.replace(" ", "_")} if r.error else {}),
            })
        agg = {
            "record": "aggregate", "strategy": self.strategy.value,
            "mode": self.numeric_mode.short_name, "rounds": len(self.rounds),
            "failed": self.failed, "mean_acc_oft": self.mean_acc_oft,
            "mean_acc_odtl": self.mean_acc_odtl, "odtl_gain": self.odtl_gain,
            "macs_per_inference": self.macs_per_inference,
            "params_per_update": self.params_per_update,
            "updates_performed": self.updates_performed,
        }
        if self.schedule is not None:
            agg.update(odtl_epochs=self.schedule.epochs, odtl_lr=self.schedule.learning_rate,
                       odtl_momentum=self.schedule.momentum)
        out.append(agg)
        return out

    def to_text(self) -> str:
        return format_records(self.records())


@dataclass
class StudyReport:
    """L1SO + L1PO (the drift gap) and L1PO-2 with ODTL (the recovery)."""

    l1so: ExperimentReport
    l1po: ExperimentReport
    l1po2: ExperimentReport

    @property
    def uicd_loss(self) -> float:
        return uicd_loss(self.l1so.mean_acc_oft, self.l1po.mean_acc_oft)

    @property
    def odtl_gain(self) -> float | None:
        return self.l1po2.odtl_gain

    @property
    def recovered_fraction(self) -> float | None:
        if self.odtl_gain is None or self.uicd_loss <= 0:
            return None
        return self.odtl_gain / self.uicd_loss

    @property
    def failed(self) -> int:
        return self.l1so.failed + self.l1po.failed + self.l1po2.failed

    def to_text(self) -> str:
        recs = self.l1so.records() + self.l1po.records() + self.l1po2.records()
        recs.append({"record": "study", "acc_l1so": self.l1so.mean_acc_oft,
                     "acc_l1po": self.l1po.mean_acc_oft, "uicd_loss": self.uicd_loss,
                     "acc_l1po2_oft": self.l1po2.mean_acc_oft,
                     "acc_l1po2_odtl": self.l1po2.mean_acc_odtl,
                     "odtl_gain": self.odtl_gain, "recovered_fraction": self.recovered_fraction})
        return format_records(recs)


def format_records(records: list[dict]) -> str:
    lines = [REPORT_HEADER]
    lines += [" ".join(f"{k}={_fmt(v)}" for k, v in rec.items()) for rec in records]
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> list[dict[str, str]]:
    """Read key=value report lines back as string dicts (header/comments skipped)."""
    out = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        out.append(dict(field.split("=", 1) for field in line.split()))
    return out


# --------------------------------------------------------------- execution

def _digest(indices) -> str:
    return hashlib.sha1(np.asarray(indices, dtype="<i8").tobytes()).hexdigest()[:12]


def _cache_key(rnd: SplitRound, config: TrainConfig) -> str:
    h = hashlib.sha1()
    h.update(np.asarray(rnd.offline_train, dtype="<i8").tobytes())
    h.update(b"|")
    h.update(np.asarray(rnd.offline_val, dtype="<i8").tobytes())
    h.update(repr(config).encode())
    return h.hexdigest()


def accuracy(params: M.ModelParams, windows, labels) -> float:
    if len(labels) == 0:
        raise DomainError("cannot score an empty test set")
    pred = M.predict_batched(params, windows)
    return float(np.mean(pred == np.asarray(labels)))


def round_train_config(config: TrainConfig, seed: int, round_id: int) -> TrainConfig:
    derived = int(np.random.SeedSequence([seed, round_id, 7]).generate_state(1)[0])
    return replace(config, seed=derived)


def _run_round(ds: WindowedDataset, topology: M.Topology, config: TrainConfig,
               rnd: SplitRound, round_id: int, seed: int, mode: NumericMode,
               schedule: OdtlSchedule | None, pretrained: M.ModelParams | None):
    record = RoundRecord(round_id, rnd.user, "ok", len(rnd.offline_train), len(rnd.offline_val),
                         len(rnd.odtl_train), len(rnd.test), test_digest=_digest(rnd.test))
    trained = pretrained
    try:
        if trained is None:
            cfg = round_train_config(config, seed, round_id)
            trained, _ = train(ds.windows[rnd.offline_train], ds.labels[rnd.offline_train],
                               ds.windows[rnd.offline_val], ds.labels[rnd.offline_val],
                               topology, cfg)
        deployed = M.deploy(trained, mode)
        test_x, test_y = ds.windows[rnd.test], ds.labels[rnd.test]
        record.acc_oft = accuracy(deployed, test_x, test_y)
        if schedule is not None:
            engine = OdtlEngine(deployed, schedule.engine_config())
            rng = np.random.default_rng(np.random.SeedSequence([schedule.shuffle_seed, seed, round_id]))
            stream = np.asarray(rnd.odtl_train, dtype=np.int64)
            for _ in range(schedule.epochs):
                for i in stream[rng.permutation(len(stream))]:
                    engine.learn_one(ds.windows[i], int(ds.labels[i]))
            record.updates = engine.updates
            record.acc_odtl = (record.acc_oft if engine.updates == 0
                               else accuracy(deployed, test_x, test_y))
    except (OdtlError, FloatingPointError, ArithmeticError) as exc:
        log.warning("round %d failed: %s", round_id, exc)
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
    return record, trained


def make_split(ds: WindowedDataset, strategy: Strategy | str, seed: int,
               config: TrainConfig, train_fraction: float = 0.4) -> SplitPlan:
    strategy = Strategy(strategy)
    vf = config.validation_fraction
    if strategy is Strategy.L1SO:
        return make_l1so(ds, len(ds.user_ids), seed, vf)
    if strategy is Strategy.L1PO:
        return make_l1po(ds, seed, vf)
    return make_l1po2(ds, train_fraction, seed, vf)


def run_experiment(ds: WindowedDataset, topology: M.Topology, config: TrainConfig,
                   strategy: Strategy | str, schedule: OdtlSchedule | None = None,
                   mode: NumericMode | str = NumericMode.FULL32, seed: int = 0,
                   jobs: int = 1, model_cache: dict | None = None,
                   plan: SplitPlan | None = None) -> ExperimentReport:
    """Run every round of one split strategy.

    ``model_cache`` maps (offline sets, train config) to trained models so
    experiments sharing offline splits (L1PO and L1PO-2, or two numeric
    modes) train each round once.
    """
    strategy = Strategy(strategy)
    mode = NumericMode.parse(mode)
    if (ds.channels, ds.width, ds.classes) != (topology.input_channels, topology.input_width,
                                               topology.num_classes):
        raise ShapeError("dataset does not match topology")
    plan = plan or make_split(ds, strategy, seed, config)
    jobs_args = []
    for r, rnd in enumerate(plan.rounds):
        key = _cache_key(rnd, round_train_config(config, seed, r))
        pre = model_cache.get(key) if model_cache is not None else None
        jobs_args.append((key, (ds, topology, config, rnd, r, seed, mode, schedule, pre)))

    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_round_star, [a for _, a in jobs_args]))
    else:
        results = [_run_round(*a) for _, a in jobs_args]

    records = []
    for (key, _), (record, trained) in zip(jobs_args, results):
        records.append(record)
        if model_cache is not None and trained is not None:
            model_cache[key] = trained
    return ExperimentReport(strategy, mode, records, count_macs(topology),
                            count_update_params(topology), odtl_enabled=schedule is not None,
                            schedule=schedule)


def _run_round_star(args):
    return _run_round(*args)


def run_study(ds: WindowedDataset, topology: M.Topology, config: TrainConfig,
              schedule: OdtlSchedule, mode: NumericMode | str = NumericMode.FULL32,
              seed: int = 0, jobs: int = 1, model_cache: dict | None = None) -> StudyReport:
    cache = {} if model_cache is None else model_cache
    l1so = run_experiment(ds, topology, config, Strategy.L1SO, None, mode, seed, jobs, cache)
    l1po = run_experiment(ds, topology, config, Strategy.L1PO, None, mode, seed, jobs, cache)
    l1po2 = run_experiment(ds, topology, config, Strategy.L1PO2, schedule, mode, seed, jobs, cache)
    return StudyReport(l1so, l1po, l1po2)
