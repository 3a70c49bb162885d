"""Federated training loop: broadcast, local SGD, weighting, aggregation, evaluation."""

from __future__ import annotations

import csv
import enum
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import (
    AggregationWeights,
    DiscoParams,
    aggregate,
    dataset_size_weights,
    disco_weights,
    equal_weights,
    fednova_disco_weights,
    fednova_step_scale,
    relative_sizes,
    scaled_server_step,
    server_momentum_step,
)
from .distributions import CategoryDistribution, client_discrepancies, from_counts, uniform_target
from .model import ModelParams, ModelShape, TrainerConfig, init_params, local_train, per_class_accuracy, predict
from .partition import LabeledDataset, PartitionPlan
from .secure_sum import make_shares, unmask_sum


class Strategy(str, enum.Enum):
    DATASET_SIZE = "dataset_size"
    EQUAL = "equal"
    DISCO = "disco"
    FEDNOVA_DISCO = "fednova_disco"

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        if isinstance(value, Strategy):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown weight strategy {value!r}; expected one of {choices}") from None


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)


@dataclass(frozen=True)
class FederationConfig:
    """One federated run.

    ``participants`` is ``None`` for full participation, else the number of
    clients sampled per round. ``target`` is ``"uniform"``, ``"global"`` (the
    global category distribution, gathered with the masked secure sum) or an
    explicit :class:`CategoryDistribution`.
    """

    num_clients: int
    rounds: int
    strategy: Strategy = Strategy.DATASET_SIZE
    disco: DiscoParams = field(default_factory=DiscoParams)
    participants: int | None = None
    server_momentum: float = 0.0
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    hidden: int = 0
    target: "str | CategoryDistribution" = "uniform"
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.participants is not None and not 1 <= self.participants <= self.num_clients:
            raise ValueError("participants per round must lie in [1, num_clients]")
        if not 0 <= self.server_momentum < 1:
            raise ValueError("server_momentum must lie in [0, 1)")
        if isinstance(self.target, str) and self.target not in ("uniform", "global"):
            raise ValueError("target must be 'uniform', 'global' or a CategoryDistribution")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def as_dict(self) -> dict:
        target = self.target if isinstance(self.target, str) else [float(x) for x in self.target.probs]
        return {
            "num_clients": self.num_clients,
            "rounds": self.rounds,
            "strategy": self.strategy.value,
            "disco": {"a": self.disco.a, "b": self.disco.b, "metric": self.disco.metric.value},
            "participants": self.participants,
            "server_momentum": self.server_momentum,
            "trainer": {
                "eta": self.trainer.eta,
                "tau": self.trainer.tau,
                "epochs": self.trainer.epochs,
                "batch_size": self.trainer.batch_size,
                "prox_mu": self.trainer.prox_mu,
                "seed": self.trainer.seed,
            },
            "hidden": self.hidden,
            "target": target,
            "seed": self.seed,
            "threads": self.threads,
        }


@dataclass
class RoundMetrics:
    round: int
    global_accuracy: float
    per_category_accuracy: np.ndarray
    per_client_accuracy: np.ndarray
    accuracy_variance_across_clients: float
    weights_used: np.ndarray
    participants: list[int]
    wall_ms: int = 0


@dataclass
class RunResult:
    config: FederationConfig
    metrics: list[RoundMetrics]
    final_params: ModelParams
    discrepancies: np.ndarray
    target: CategoryDistribution
    plan_digest: str

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].global_accuracy

    def accuracy_curve(self) -> np.ndarray:
        return np.array([m.global_accuracy for m in self.metrics])

    def manifest(self) -> dict:
        return {
            "version": __version__,
            "config": self.config.as_dict(),
            "plan_sha256": self.plan_digest,
            "target": [float(x) for x in self.target.probs],
            "discrepancies": [float(x) for x in self.discrepancies],
            "final_accuracy": self.final_accuracy,
            "rounds": len(self.metrics),
        }


def sample_participants(num_clients: int, m: int, round_index: int, seed: int) -> list[int]:
    """Uniform sample of ``m`` clients without replacement, sorted; fixed by (seed, round)."""
    if not 1 <= m <= num_clients:
        raise ValueError(f"cannot sample {m} of {num_clients} clients")
    if m == num_clients:
        return list(range(num_clients))
    rng = np.random.default_rng([int(seed), 0x5A3, int(round_index)])
    return sorted(int(k) for k in rng.choice(num_clients, size=m, replace=False))


def resolve_target(config: FederationConfig, counts: np.ndarray, num_classes: int) -> CategoryDistribution:
    if isinstance(config.target, CategoryDistribution):
        if config.target.num_categories != num_classes:
            raise ValueError("target distribution has the wrong number of categories")
        return config.target
    if config.target == "uniform":
        return uniform_target(num_classes)
    if counts.shape[0] == 1:
        return from_counts(counts[0], num_classes)
    global_counts = unmask_sum(make_shares(counts, derive_seed(config.seed, 0x5EC)))
    return from_counts(global_counts, num_classes)


def compute_weights(
    config: FederationConfig,
    sizes: np.ndarray,
    discrepancies: np.ndarray,
    steps: np.ndarray,
) -> tuple[AggregationWeights, float]:
    """Weights over the given clients and the server step scale (1 except FedNova)."""
    n = relative_sizes(sizes)
    strategy = config.strategy
    if strategy is Strategy.DATASET_SIZE:
        return dataset_size_weights(n), 1.0
    if strategy is Strategy.EQUAL:
        return equal_weights(n.size), 1.0
    if strategy is Strategy.DISCO:
        return disco_weights(n, discrepancies, config.disco), 1.0
    q = disco_weights(n, discrepancies, config.disco).p
    return fednova_disco_weights(n, discrepancies, steps, config.disco), fednova_step_scale(q, steps)


def client_accuracies(per_category: np.ndarray, dists: list[CategoryDistribution]) -> np.ndarray:
    """Expected accuracy of the global model on each client's label mix."""
    acc = np.nan_to_num(per_category, nan=0.0)
    return np.array([float(np.dot(d.probs, acc)) for d in dists])


def run(
    config: FederationConfig,
    data: LabeledDataset,
    plan: PartitionPlan,
    test_set: LabeledDataset,
    on_round=None,
) -> RunResult:
    """Run ``config.rounds`` rounds of federated training.

    Discrepancies are computed once, before round 1, for all clients. Each
    round then samples participants (if configured), trains them from the
    current global model, weights them with ``n_k`` renormalized over the
    participants, aggregates, applies server momentum and evaluates.
    """
    if plan.num_clients != config.num_clients:
        raise ValueError(f"plan has {plan.num_clients} clients but config expects {config.num_clients}")
    if len(test_set) == 0:
        raise ValueError("test set is empty")
    plan.validate(len(data))
    C = data.num_classes
    client_data = [data.subset(idx) for idx in plan.assignments]
    counts = plan.client_counts(data.labels, C)
    dists = [from_counts(row, C) for row in counts]
    target = resolve_target(config, counts, C)
    d_all = client_discrepancies(dists, target, config.disco.metric)
    sizes_all = plan.sizes()
    steps_all = np.array([config.trainer.steps_for(int(s)) for s in sizes_all])

    shape = ModelShape(data.num_features, C, config.hidden)
    global_params = init_params(shape, derive_seed(config.seed, 0x1A17))
    velocity = np.zeros(shape.size)
    metrics: list[RoundMetrics] = []
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None

    try:
        for r in range(1, config.rounds + 1):
            start = time.perf_counter()
            if config.participants is None:
                chosen = list(range(config.num_clients))
            else:
                chosen = sample_participants(config.num_clients, config.participants, r, config.seed)

            def train(k: int, w0: ModelParams = global_params, r: int = r) -> ModelParams:
                cfg = replace(config.trainer, seed=derive_seed(config.seed, config.trainer.seed, r, k))
                return local_train(w0, client_data[k], cfg)

            locals_ = list(pool.map(train, chosen)) if pool else [train(k) for k in chosen]
            weights, scale = compute_weights(config, sizes_all[chosen], d_all[chosen], steps_all[chosen])
            new_params = scaled_server_step(global_params, aggregate(locals_, weights), scale)
            if config.server_momentum > 0:
                new_params, velocity = server_momentum_step(global_params, new_params, velocity, config.server_momentum)
            global_params = new_params

            per_cat = per_class_accuracy(global_params, test_set)
            global_acc = float(np.mean(predict(global_params, test_set.features) == test_set.labels))
            per_client = client_accuracies(per_cat, dists)
            full_weights = np.zeros(config.num_clients)
            full_weights[chosen] = weights.p
            metrics.append(
                RoundMetrics(
                    round=r,
                    global_accuracy=global_acc,
                    per_category_accuracy=per_cat,
                    per_client_accuracy=per_client,
                    accuracy_variance_across_clients=float(np.var(per_client)),
                    weights_used=full_weights,
                    participants=chosen,
                    wall_ms=int(round((time.perf_counter() - start) * 1000)),
                )
            )
            if on_round is not None:
                on_round(metrics[-1])
    finally:
        if pool is not None:
            pool.shutdown()

    return RunResult(config, metrics, global_params, d_all, target, plan.digest())


def rounds_to_target(metrics, target_accuracy: float) -> int | None:
    """First round whose global accuracy reaches ``target_accuracy`` (None if never)."""
    for m in metrics:
        if m.global_accuracy >= target_accuracy:
            return m.round
    return None


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def metrics_header(num_classes: int, num_clients: int) -> list[str]:
    return [
        "round",
        "global_accuracy",
        *[f"category_acc_{c}" for c in range(num_classes)],
        *[f"client_acc_{k}" for k in range(num_clients)],
        "client_acc_variance",
        *[f"weight_{k}" for k in range(num_clients)],
        "wall_ms",
    ]


def write_metrics_csv(path, metrics: list[RoundMetrics], with_timing: bool = True) -> None:
    """One row per round, floats at 17 significant digits.

    With ``with_timing=False`` the ``wall_ms`` column is written as 0 so that
    two runs of the same config produce byte-identical files.
    """
    if not metrics:
        raise ValueError("no metrics to write")
    C = metrics[0].per_category_accuracy.size
    K = metrics[0].weights_used.size
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(C, K))
        for m in metrics:
            writer.writerow(
                [
                    m.round,
                    _fmt(m.global_accuracy),
                    *[_fmt(x) for x in m.per_category_accuracy],
                    *[_fmt(x) for x in m.per_client_accuracy],
                    _fmt(m.accuracy_variance_across_clients),
                    *[_fmt(x) for x in m.weights_used],
                    m.wall_ms if with_timing else 0,
                ]
            )


def read_metrics_csv(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_manifest(path, result: RunResult, extra: dict | None = None) -> None:
    doc = result.manifest()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
