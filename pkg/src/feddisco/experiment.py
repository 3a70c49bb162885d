"""Experiment specs (INI files), batch runs over arms x seeds, and bound-simulation configs."""

from __future__ import annotations

import configparser
import json
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .aggregation import DiscoParams
from .bound_sim import BoundParams, BoundTrajectory, WdVariant, minimize_reformulated
from .distributions import Metric, client_discrepancies, from_counts, uniform_target
from .engine import FederationConfig, RunResult, Strategy, derive_seed, rounds_to_target, run, write_manifest, write_metrics_csv
from .model import TrainerConfig
from .partition import (
    LabeledDataset,
    PartitionPlan,
    biased_partition_niid2,
    dirichlet_partition,
    exponential_class_counts,
    synth_gaussian_mixture,
)


class ConfigError(ValueError):
    """Invalid config; the message starts with the offending ``section.key``."""


def _err(path: str, msg: str) -> ConfigError:
    return ConfigError(f"{path}: {msg}")


class _Section:
    """Typed reads from one INI section that remember which keys were used."""

    def __init__(self, name: str, items: dict[str, str]):
        self.name = name
        self.items = dict(items)
        self.used: set[str] = set()

    def _raw(self, key: str, default):
        self.used.add(key)
        value = self.items.get(key)
        if value is None or value.strip() == "":
            if default is _REQUIRED:
                raise _err(f"{self.name}.{key}", "missing required key")
            return None, default
        return value.strip(), None

    def get_int(self, key: str, default=None):
        raw, dflt = self._raw(key, default)
        if raw is None:
            return dflt
        try:
            return int(raw)
        except ValueError:
            raise _err(f"{self.name}.{key}", f"expected an integer, got {raw!r}") from None

    def get_float(self, key: str, default=None):
        raw, dflt = self._raw(key, default)
        if raw is None:
            return dflt
        try:
            if "/" in raw:
                num, den = raw.split("/", 1)
                value = float(num) / float(den)
            else:
                value = float(raw)
        except (ValueError, ZeroDivisionError):
            raise _err(f"{self.name}.{key}", f"expected a number, got {raw!r}") from None
        if not math.isfinite(value):
            raise _err(f"{self.name}.{key}", "must be finite")
        return value

    def get_str(self, key: str, default=None):
        raw, dflt = self._raw(key, default)
        return dflt if raw is None else raw

    def get_bool(self, key: str, default=None):
        raw, dflt = self._raw(key, default)
        if raw is None:
            return dflt
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise _err(f"{self.name}.{key}", f"expected a boolean, got {raw!r}")

    def check_unused(self) -> None:
        extra = sorted(set(self.items) - self.used)
        if extra:
            raise _err(f"{self.name}.{extra[0]}", "unknown key")


_REQUIRED = object()


@dataclass(frozen=True)
class DataSpec:
    num_classes: int = 10
    num_features: int = 5
    samples_per_class: int = 500
    test_samples_per_class: int = 200
    class_separation: float = 3.0


@dataclass(frozen=True)
class ScenarioSpec:
    """``niid1`` (Dirichlet), ``niid2`` (biased/unbiased) or ``imbalance``
    (exponential class sizes, then Dirichlet)."""

    kind: str = "niid1"
    num_clients: int = 10
    beta: float = 0.5
    biased_fraction: float = 5 / 6
    imbalance_ratio: float = 1.0
    test_matches_global: bool = False


@dataclass(frozen=True)
class ArmSpec:
    name: str
    config: FederationConfig


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    data: DataSpec
    scenario: ScenarioSpec
    arms: tuple[ArmSpec, ...]
    repeats: int = 1
    seed: int = 0
    output_dir: str | None = None
    target_accuracy: float | None = None
    target_reference_arm: str | None = None
    target_reference_round: int | None = None

    def resolved(self) -> dict:
        return {
            "name": self.name,
            "repeats": self.repeats,
            "seed": self.seed,
            "data": self.data.__dict__.copy(),
            "scenario": self.scenario.__dict__.copy(),
            "target_accuracy": self.target_accuracy,
            "target_reference_arm": self.target_reference_arm,
            "target_reference_round": self.target_reference_round,
            "arms": {a.name: a.config.as_dict() for a in self.arms},
        }


_FEDERATION_KEYS = (
    "rounds", "participants", "server_momentum", "target", "hidden", "lr", "epochs", "tau",
    "batch_size", "prox_mu", "strategy", "a", "b", "metric",
)


def _federation(section: _Section, base: dict, num_clients: int) -> FederationConfig:
    values = dict(base)
    values["rounds"] = section.get_int("rounds", values.get("rounds", _REQUIRED))
    values["participants"] = section.get_int("participants", values.get("participants", 0))
    values["server_momentum"] = section.get_float("server_momentum", values.get("server_momentum", 0.0))
    values["target"] = section.get_str("target", values.get("target", "uniform"))
    values["hidden"] = section.get_int("hidden", values.get("hidden", 0))
    values["lr"] = section.get_float("lr", values.get("lr", 0.01))
    values["epochs"] = section.get_int("epochs", values.get("epochs", 1))
    values["tau"] = section.get_int("tau", values.get("tau"))
    values["batch_size"] = section.get_int("batch_size", values.get("batch_size", 64))
    values["prox_mu"] = section.get_float("prox_mu", values.get("prox_mu", 0.0))
    values["strategy"] = section.get_str("strategy", values.get("strategy", "dataset_size"))
    values["a"] = section.get_float("a", values.get("a", 0.5))
    values["b"] = section.get_float("b", values.get("b", 0.1))
    values["metric"] = section.get_str("metric", values.get("metric", "kl"))
    section.check_unused()

    def where(key: str) -> str:
        return f"{section.name if key in section.items else 'federation'}.{key}"

    checks = {
        "rounds": (values["rounds"] >= 1, "must be >= 1"),
        "participants": (0 <= values["participants"] <= num_clients, f"must lie in [0, {num_clients}] (0 = all)"),
        "server_momentum": (0 <= values["server_momentum"] < 1, "must lie in [0, 1)"),
        "target": (values["target"] in ("uniform", "global"), "expected uniform or global"),
        "hidden": (values["hidden"] >= 0, "must be >= 0"),
        "lr": (values["lr"] >= 0, "must be >= 0"),
        "epochs": (values["epochs"] is None or values["epochs"] >= 1, "must be >= 1"),
        "tau": (values["tau"] is None or values["tau"] >= 1, "must be >= 1"),
        "batch_size": (values["batch_size"] >= 1, "must be >= 1"),
        "prox_mu": (values["prox_mu"] >= 0, "must be >= 0"),
        "a": (values["a"] >= 0, "must be >= 0"),
    }
    for key, (ok, msg) in checks.items():
        if not ok:
            raise _err(where(key), msg)
    for key, parse in (("strategy", Strategy.parse), ("metric", Metric.parse)):
        try:
            parse(values[key])
        except ValueError as exc:
            raise _err(where(key), str(exc)) from None

    def build():
        return FederationConfig(
            num_clients=num_clients,
            rounds=values["rounds"],
            strategy=Strategy.parse(values["strategy"]),
            disco=DiscoParams(values["a"], values["b"], Metric.parse(values["metric"])),
            participants=values["participants"] or None,
            server_momentum=values["server_momentum"],
            trainer=TrainerConfig(
                eta=values["lr"],
                tau=values["tau"],
                epochs=None if values["tau"] else values["epochs"],
                batch_size=values["batch_size"],
                prox_mu=values["prox_mu"],
            ),
            hidden=values["hidden"],
            target=values["target"],
        )

    try:
        return build()
    except ValueError as exc:
        raise _err(section.name, str(exc)) from None


def _federation_defaults(section: _Section) -> dict:
    out = {}
    for key in _FEDERATION_KEYS:
        if key in section.items and section.items[key].strip():
            out[key] = section.items[key]
    return out


def parse_experiment(text: str, source: str = "<spec>") -> ExperimentSpec:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None

    known = {"experiment", "data", "scenario", "federation"}
    for name in parser.sections():
        if name not in known and not name.startswith("arm:"):
            raise _err(name, "unknown section")
    for name in ("experiment", "scenario"):
        if not parser.has_section(name):
            raise _err(name, "missing section")

    exp = _Section("experiment", parser["experiment"])
    name = exp.get_str("name", _REQUIRED)
    repeats = exp.get_int("repeats", 1)
    seed = exp.get_int("seed", 0)
    output_dir = exp.get_str("output_dir", None)
    target_accuracy = exp.get_float("target_accuracy", None)
    ref_arm = exp.get_str("target_reference_arm", None)
    ref_round = exp.get_int("target_reference_round", None)
    exp.check_unused()
    if repeats < 1:
        raise _err("experiment.repeats", "must be >= 1")
    if (ref_arm is None) != (ref_round is None):
        raise _err("experiment.target_reference_arm", "set together with target_reference_round")

    ds = _Section("data", parser["data"] if parser.has_section("data") else {})
    data = DataSpec(
        num_classes=ds.get_int("num_classes", 10),
        num_features=ds.get_int("num_features", 5),
        samples_per_class=ds.get_int("samples_per_class", 500),
        test_samples_per_class=ds.get_int("test_samples_per_class", 200),
        class_separation=ds.get_float("class_separation", 3.0),
    )
    ds.check_unused()
    if data.num_classes < 2:
        raise _err("data.num_classes", "must be >= 2")
    if data.samples_per_class < 1 or data.test_samples_per_class < 1:
        raise _err("data.samples_per_class", "sample counts must be >= 1")

    sc = _Section("scenario", parser["scenario"])
    scenario = ScenarioSpec(
        kind=sc.get_str("kind", _REQUIRED).lower(),
        num_clients=sc.get_int("num_clients", 10),
        beta=sc.get_float("beta", 0.5),
        biased_fraction=sc.get_float("biased_fraction", 5 / 6),
        imbalance_ratio=sc.get_float("imbalance_ratio", 1.0),
        test_matches_global=sc.get_bool("test_matches_global", False),
    )
    sc.check_unused()
    if scenario.kind not in ("niid1", "niid2", "imbalance"):
        raise _err("scenario.kind", f"expected niid1, niid2 or imbalance, got {scenario.kind!r}")
    if scenario.num_clients < 2:
        raise _err("scenario.num_clients", "must be >= 2")
    if scenario.beta <= 0:
        raise _err("scenario.beta", "must be > 0")
    if not 0 < scenario.biased_fraction < 1:
        raise _err("scenario.biased_fraction", "must lie strictly between 0 and 1")
    if scenario.imbalance_ratio < 1:
        raise _err("scenario.imbalance_ratio", "must be >= 1")

    fed_items = parser["federation"] if parser.has_section("federation") else {}
    fed = _Section("federation", fed_items)
    base = _federation_defaults(fed)
    unknown = sorted(set(fed.items) - set(_FEDERATION_KEYS))
    if unknown:
        raise _err(f"federation.{unknown[0]}", "unknown key")
    base_typed = {}
    probe = _Section("federation", base)
    # parse the shared defaults once so type errors point at [federation]
    for key, getter in (
        ("rounds", probe.get_int), ("participants", probe.get_int), ("server_momentum", probe.get_float),
        ("target", probe.get_str), ("hidden", probe.get_int), ("lr", probe.get_float), ("epochs", probe.get_int),
        ("tau", probe.get_int), ("batch_size", probe.get_int), ("prox_mu", probe.get_float),
        ("strategy", probe.get_str), ("a", probe.get_float), ("b", probe.get_float), ("metric", probe.get_str),
    ):
        if key in base:
            base_typed[key] = getter(key, None)

    arms = []
    for sect in parser.sections():
        if not sect.startswith("arm:"):
            continue
        arm_name = sect[4:].strip()
        if not arm_name:
            raise _err(sect, "arm needs a name")
        cfg = _federation(_Section(sect, parser[sect]), base_typed, scenario.num_clients)
        arms.append(ArmSpec(arm_name, cfg))
    if not arms:
        raise ConfigError("experiment: define at least one [arm:NAME] section")
    if ref_arm is not None and ref_arm not in {a.name for a in arms}:
        raise _err("experiment.target_reference_arm", f"no arm named {ref_arm!r}")
    if ref_round is not None and any(ref_round > a.config.rounds for a in arms):
        raise _err("experiment.target_reference_round", "exceeds the number of rounds")

    return ExperimentSpec(
        name=name,
        data=data,
        scenario=scenario,
        arms=tuple(arms),
        repeats=repeats,
        seed=seed,
        output_dir=output_dir,
        target_accuracy=target_accuracy,
        target_reference_arm=ref_arm,
        target_reference_round=ref_round,
    )


def load_experiment(path) -> ExperimentSpec:
    path = Path(path)
    return parse_experiment(path.read_text(), str(path))


@dataclass
class Scenario:
    train: LabeledDataset
    test: LabeledDataset
    plan: PartitionPlan


def build_scenario(spec: ExperimentSpec, repeat_seed: int) -> Scenario:
    """Data, test set and partition for one repeat; shared by every arm."""
    d, sc = spec.data, spec.scenario
    C = d.num_classes
    if sc.kind == "imbalance":
        train_counts = exponential_class_counts(d.samples_per_class, sc.imbalance_ratio, C)
    else:
        train_counts = np.full(C, d.samples_per_class)
    if sc.kind == "imbalance" and sc.test_matches_global:
        test_counts = exponential_class_counts(d.test_samples_per_class, sc.imbalance_ratio, C)
    else:
        test_counts = np.full(C, d.test_samples_per_class)
    train = synth_gaussian_mixture(C, d.num_features, train_counts, d.class_separation, derive_seed(repeat_seed, 1))
    test = synth_gaussian_mixture(C, d.num_features, test_counts, d.class_separation, derive_seed(repeat_seed, 2))
    part_seed = derive_seed(repeat_seed, 3)
    if sc.kind == "niid2":
        plan = biased_partition_niid2(train.labels, sc.num_clients, sc.biased_fraction, part_seed, C)
    else:
        plan = dirichlet_partition(train.labels, sc.num_clients, sc.beta, part_seed, C)
    return Scenario(train, test, plan)


@dataclass
class ArmSummary:
    arm: str
    final_accuracies: list[float]
    rounds_to_target: list[int | None] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.final_accuracies))

    @property
    def std(self) -> float:
        vals = self.final_accuracies
        return float(statistics.stdev(vals)) if len(vals) > 1 else 0.0

    @property
    def median_rounds(self) -> float | None:
        if not self.rounds_to_target:
            return None
        # a run that never reaches the target counts as infinitely slow
        vals = [math.inf if r is None else r for r in self.rounds_to_target]
        return float(statistics.median(vals))


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    summaries: list[ArmSummary]
    runs: dict[tuple[str, int], RunResult]
    targets: list[float | None]
    out_dir: Path

    def summary(self, arm: str) -> ArmSummary:
        return next(s for s in self.summaries if s.arm == arm)

    def table(self) -> str:
        lines = [f"{'arm':<16} {'runs':>4}  {'final acc (mean ± std, %)':>26}  {'rounds→target (median)':>22}"]
        for s in self.summaries:
            rt = s.median_rounds
            rt_txt = "-" if rt is None else ("never" if math.isinf(rt) else f"{rt:g}")
            lines.append(f"{s.arm:<16} {len(s.final_accuracies):>4}  {100 * s.mean:>17.2f} ± {100 * s.std:<6.2f}  {rt_txt:>22}")
        return "\n".join(lines)


def repeat_seeds(spec: ExperimentSpec) -> list[int]:
    return [spec.seed + r for r in range(spec.repeats)]


def run_experiment(
    spec: ExperimentSpec,
    out_dir=None,
    threads: int = 1,
    write_files: bool = True,
) -> ExperimentResult:
    """Run every arm on every repeat, write per-run CSV + manifest, and summarize.

    If any run fails the remaining ones are cancelled, files already written
    stay on disk, and the error propagates.
    """
    out = Path(out_dir if out_dir is not None else (spec.output_dir or "runs")) / spec.name
    seeds = repeat_seeds(spec)
    scenarios = {s: build_scenario(spec, s) for s in seeds}
    jobs = [(arm, s) for s in seeds for arm in spec.arms]

    def job(arm: ArmSpec, s: int) -> RunResult:
        sc = scenarios[s]
        cfg = replace(arm.config, seed=s)
        result = run(cfg, sc.train, sc.plan, sc.test)
        if write_files:
            run_dir = out / arm.name / f"seed_{s}"
            run_dir.mkdir(parents=True, exist_ok=True)
            write_metrics_csv(run_dir / "metrics.csv", result.metrics)
            write_manifest(
                run_dir / "manifest.json",
                result,
                {"experiment": spec.resolved(), "arm": arm.name, "repeat_seed": s},
            )
            (run_dir / "plan.json").write_text(sc.plan.to_json())
        return result

    runs: dict[tuple[str, int], RunResult] = {}
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            futures = {(a.name, s): pool.submit(job, a, s) for a, s in jobs}
            try:
                for key, fut in futures.items():
                    runs[key] = fut.result()
            except BaseException:
                for fut in futures.values():
                    fut.cancel()
                raise
    else:
        for a, s in jobs:
            runs[(a.name, s)] = job(a, s)

    targets: list[float | None] = []
    for s in seeds:
        if spec.target_reference_arm is not None:
            ref = runs[(spec.target_reference_arm, s)]
            targets.append(ref.metrics[spec.target_reference_round - 1].global_accuracy)
        else:
            targets.append(spec.target_accuracy)

    summaries = []
    for arm in spec.arms:
        accs = [runs[(arm.name, s)].final_accuracy for s in seeds]
        rtt = []
        if any(t is not None for t in targets):
            rtt = [rounds_to_target(runs[(arm.name, s)].metrics, t) for s, t in zip(seeds, targets)]
        summaries.append(ArmSummary(arm.name, accs, rtt))

    result = ExperimentResult(spec, summaries, runs, targets, out)
    if write_files:
        out.mkdir(parents=True, exist_ok=True)
        _write_summary(result)
    return result


def _write_summary(result: ExperimentResult) -> None:
    import csv

    seeds = repeat_seeds(result.spec)
    with open(result.out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "runs", "mean_final_accuracy", "std_final_accuracy", "median_rounds_to_target"])
        for s in result.summaries:
            mr = s.median_rounds
            w.writerow([s.arm, len(s.final_accuracies), format(s.mean, ".17g"), format(s.std, ".17g"), "" if mr is None else mr])
    doc = {
        "experiment": result.spec.resolved(),
        "seeds": seeds,
        "targets": result.targets,
        "arms": {
            s.arm: {
                "final_accuracies": s.final_accuracies,
                "mean": s.mean,
                "std": s.std,
                "rounds_to_target": s.rounds_to_target,
                "median_rounds_to_target": s.median_rounds,
            }
            for s in result.summaries
        },
    }
    (result.out_dir / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def partition_stats(spec: ExperimentSpec, repeat_seed: int | None = None) -> list[dict]:
    """Per-client size, category distribution and discrepancy under every metric."""
    seed = spec.seed if repeat_seed is None else repeat_seed
    sc = build_scenario(spec, seed)
    C = spec.data.num_classes
    counts = sc.plan.client_counts(sc.train.labels, C)
    dists = [from_counts(row, C) for row in counts]
    target = uniform_target(C)
    d = {m: client_discrepancies(dists, target, m) for m in Metric}
    sizes = sc.plan.sizes()
    rows = []
    for k, dist in enumerate(dists):
        row = {"client": k, "size": int(sizes[k]), "n": float(sizes[k] / sizes.sum())}
        row.update({f"d_{m.value}": float(d[m][k]) for m in Metric})
        row.update({f"p_{c}": float(dist.probs[c]) for c in range(C)})
        rows.append(row)
    return rows


# --- bound simulation configs ---------------------------------------------

_BOUND_KEYS = {"K", "n", "d", "tau", "eta", "L", "B", "sigma", "F_gap", "lambda", "T", "wd_variant", "steps", "step_size"}


@dataclass(frozen=True)
class BoundSimConfig:
    params: BoundParams
    steps: int = 400
    step_size: float = 1e-3


def _vector(sec: _Section, key: str, K: int) -> np.ndarray:
    raw = sec.get_str(key, _REQUIRED)
    path = f"{sec.name}.{key}"
    low = raw.lower()
    if low == "uniform":
        return np.full(K, 1.0 / K)
    if low.startswith("linspace"):
        parts = low.split()
        if len(parts) != 3:
            raise _err(path, "linspace needs a start and a stop, e.g. 'linspace 0.05 0.5'")
        try:
            return np.linspace(float(parts[1]), float(parts[2]), K)
        except ValueError:
            raise _err(path, f"bad linspace bounds in {raw!r}") from None
    try:
        vec = np.array([float(x) for x in raw.replace(",", " ").split()], dtype=np.float64)
    except ValueError:
        raise _err(path, f"expected numbers, 'uniform' or 'linspace A B', got {raw!r}") from None
    if vec.size != K:
        raise _err(path, f"expected {K} values, got {vec.size}")
    return vec


def parse_bound_config(text: str, source: str = "<bound>") -> BoundSimConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if not parser.has_section("bound"):
        raise _err("bound", "missing section")
    for name in parser.sections():
        if name != "bound":
            raise _err(name, "unknown section")
    sec = _Section("bound", parser["bound"])
    unknown = sorted(set(sec.items) - _BOUND_KEYS)
    if unknown:
        raise _err(f"bound.{unknown[0]}", "unknown key")
    K = sec.get_int("K", 10)
    if K < 1:
        raise _err("bound.K", "must be >= 1")
    n = _vector(sec, "n", K) if "n" in sec.items else np.full(K, 1.0 / K)
    d = _vector(sec, "d", K) if "d" in sec.items else np.linspace(0.05, 0.5, K)
    kwargs = dict(
        n=n,
        d=d,
        tau=sec.get_int("tau", 5),
        eta=sec.get_float("eta", 0.02),
        L=sec.get_float("L", 1.0),
        B=sec.get_float("B", 1.0),
        sigma=sec.get_float("sigma", 1.0),
        F_gap=sec.get_float("F_gap", 1.0),
        lam=sec.get_float("lambda", 0.01),
        T=sec.get_int("T", 100),
    )
    try:
        kwargs["wd_variant"] = WdVariant.parse(sec.get_str("wd_variant", "times_k"))
    except ValueError as exc:
        raise _err("bound.wd_variant", str(exc)) from None
    steps = sec.get_int("steps", 400)
    step_size = sec.get_float("step_size", 1e-3)
    if steps < 1:
        raise _err("bound.steps", "must be >= 1")
    if not step_size > 0:
        raise _err("bound.step_size", "must be > 0")
    try:
        params = BoundParams(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"bound: {exc}") from None
    return BoundSimConfig(params, steps, step_size)


def load_bound_config(path) -> BoundSimConfig:
    path = Path(path)
    return parse_bound_config(path.read_text(), str(path))


def run_bound_sim(cfg: BoundSimConfig, out_path=None) -> BoundTrajectory:
    traj = minimize_reformulated(cfg.params, cfg.steps, cfg.step_size)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        traj.write_csv(out_path)
    return traj
