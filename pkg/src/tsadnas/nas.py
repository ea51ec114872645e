"""NSGA-II search over genomes: sorting, crowding, variation and the trial loop."""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import TimeSeriesDataset
from .errors import ContractError, SearchError, TrainingError
from .genome import GENES, Genome, sample_genome
from .pipeline import ScoringConfig, train_and_evaluate
from .training import TrainConfig

SCHEMA_VERSION = 1
# (F1, parameter count)
DIRECTIONS = ("max", "min")
STATUSES = ("completed", "pruned", "failed")
POLICIES = ("best_f1", "min_params", "knee")


# ------------------------------------------------------------ dominance


def _as_minimization(points, directions) -> np.ndarray:
    if any(d not in ("max", "min") for d in directions):
        raise ContractError(f"directions must be 'max' or 'min', got {directions}")
    try:
        P = np.asarray(points, dtype=np.float64)
    except ValueError:
        P = None
    if P is None or P.ndim != 2:
        raise ContractError("objective vectors must all have the same arity")
    if P.shape[1] != len(directions):
        raise ContractError(
            f"objective arity {P.shape[1]} does not match {len(directions)} directions")
    sign = np.array([-1.0 if d == "max" else 1.0 for d in directions])
    return P * sign


def dominates(a, b, directions=DIRECTIONS) -> bool:
    """True when ``a`` is no worse than ``b`` everywhere and strictly better somewhere."""
    A = _as_minimization([a, b], directions)
    return bool(np.all(A[0] <= A[1]) and np.any(A[0] < A[1]))


def non_dominated_sort(points, directions=DIRECTIONS) -> list[list[int]]:
    """Partition point indices into fronts ``F1, F2, ...`` (fast NSGA-II sort)."""
    if len(points) == 0:
        return []
    P = _as_minimization(points, directions)
    le = (P[:, None, :] <= P[None, :, :]).all(axis=2)
    lt = (P[:, None, :] < P[None, :, :]).any(axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    count = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(count == 0)
    while current.size:
        fronts.append([int(i) for i in current])
        count = count - dom[current].sum(axis=0)
        count[current] = -1
        current = np.flatnonzero(count == 0)
    return fronts


def front_ranks(points, directions=DIRECTIONS) -> np.ndarray:
    """1-based front index of every point."""
    ranks = np.zeros(len(points), dtype=np.int64)
    for k, front in enumerate(non_dominated_sort(points, directions), start=1):
        ranks[front] = k
    return ranks


def crowding_distance(front) -> np.ndarray:
    """Normalized NSGA-II crowding distance; boundary points get ``inf``."""
    F = np.asarray(front, dtype=np.float64)
    if F.ndim != 2 or len(F) == 0:
        raise ContractError("crowding distance needs a nonempty 2-d front")
    n = len(F)
    d = np.zeros(n)
    if n <= 2:
        return np.full(n, math.inf)
    for j in range(F.shape[1]):
        order = np.argsort(F[:, j], kind="stable")
        col = F[order, j]
        span = col[-1] - col[0]
        d[order[0]] = d[order[-1]] = math.inf
        if span > 0:
            d[order[1:-1]] += (col[2:] - col[:-2]) / span
    return d


# -------------------------------------------------------------- records


@dataclass
class TrialRecord:
    trial_id: int
    generation: int
    slot: int
    genome: Genome
    seed: int
    status: str
    f1: float = math.nan
    parameter_count: int = 0
    training_time_seconds: float = math.nan
    precision: float = math.nan
    recall: float = math.nan
    epochs_run: int = 0
    stop_reason: str | None = None
    reason: str | None = None

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ContractError(f"status must be one of {STATUSES}")
        if self.status == "completed" and not (math.isfinite(self.f1) and self.parameter_count > 0):
            raise ContractError("completed trials need finite objectives")
        if self.status != "completed" and not self.reason:
            raise ContractError("pruned and failed trials need a reason")

    @property
    def completed(self) -> bool:
        return self.status == "completed"

    @property
    def objectives(self) -> tuple[float, float]:
        return (self.f1, float(self.parameter_count))

    def to_dict(self, with_time: bool = False) -> dict:
        """Ledger form. Wall-clock time is left out unless asked for, so ledgers are reproducible."""
        d = {
            "schema_version": SCHEMA_VERSION,
            "trial_id": self.trial_id,
            "generation": self.generation,
            "slot": self.slot,
            "seed": self.seed,
            "status": self.status,
            "reason": self.reason,
            "f1": None if math.isnan(self.f1) else self.f1,
            "parameter_count": self.parameter_count,
            "precision": None if math.isnan(self.precision) else self.precision,
            "recall": None if math.isnan(self.recall) else self.recall,
            "epochs_run": self.epochs_run,
            "stop_reason": self.stop_reason,
            "genome": self.genome.to_dict(),
        }
        if with_time:
            d["training_time_seconds"] = self.training_time_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict, time_seconds: float | None = None) -> "TrialRecord":
        nan = lambda v: math.nan if v is None else float(v)  # noqa: E731
        t = d.get("training_time_seconds", time_seconds)
        return cls(
            trial_id=int(d["trial_id"]), generation=int(d["generation"]), slot=int(d["slot"]),
            genome=Genome.from_dict(d["genome"]), seed=int(d["seed"]), status=d["status"],
            f1=nan(d.get("f1")), parameter_count=int(d.get("parameter_count") or 0),
            training_time_seconds=nan(t), precision=nan(d.get("precision")),
            recall=nan(d.get("recall")), epochs_run=int(d.get("epochs_run") or 0),
            stop_reason=d.get("stop_reason"), reason=d.get("reason"),
        )


def write_ledger(records: Sequence[TrialRecord], path, timings_path=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    if timings_path is not None:
        with open(timings_path, "w", encoding="utf-8") as fh:
            for r in records:
                t = r.training_time_seconds
                fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "trial_id": r.trial_id,
                                     "training_time_seconds": None if math.isnan(t) else t}) + "\n")


def read_ledger(path, timings_path=None) -> list[TrialRecord]:
    times: dict[int, float] = {}
    if timings_path is not None and Path(timings_path).exists():
        for line in Path(timings_path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                row = json.loads(line)
                times[int(row["trial_id"])] = row["training_time_seconds"]
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(TrialRecord.from_dict(d, times.get(int(d["trial_id"]))))
    return out


# ------------------------------------------------------------ population


@dataclass
class ParetoFront:
    """Completed records with their rank and crowding distance (within their own front)."""

    records: list[TrialRecord]
    ranks: np.ndarray
    crowding: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[TrialRecord]) -> "ParetoFront":
        done = [r for r in records if r.completed]
        ranks = np.zeros(len(done), dtype=np.int64)
        crowd = np.zeros(len(done))
        if done:
            pts = np.array([r.objectives for r in done])
            for k, front in enumerate(non_dominated_sort(pts), start=1):
                ranks[front] = k
                crowd[front] = crowding_distance(pts[front])
        return cls(done, ranks, crowd)

    @property
    def front(self) -> list[TrialRecord]:
        return [r for r, k in zip(self.records, self.ranks) if k == 1]

    def write_csv(self, path, rank1_only: bool = False) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["trial_id", "f1", "parameter_count", "training_time", "rank",
                        "crowding_distance"])
            order = sorted(range(len(self.records)),
                           key=lambda i: (self.ranks[i], -self.records[i].f1,
                                          self.records[i].parameter_count))
            for i in order:
                if rank1_only and self.ranks[i] != 1:
                    continue
                r = self.records[i]
                w.writerow([r.trial_id, repr(r.f1), r.parameter_count,
                            repr(r.training_time_seconds), int(self.ranks[i]),
                            repr(float(self.crowding[i]))])


def select_survivors(records: Sequence[TrialRecord], size: int) -> list[TrialRecord]:
    """Elitist truncation: fill by front rank, break the last front by crowding distance."""
    pf = ParetoFront.from_records(records)
    order = sorted(range(len(pf.records)),
                   key=lambda i: (pf.ranks[i], -pf.crowding[i], pf.records[i].trial_id))
    return [pf.records[i] for i in order[:size]]


def tournament(pf: ParetoFront, rng: np.random.Generator) -> TrialRecord:
    i, j = (int(v) for v in rng.integers(0, len(pf.records), size=2))
    ki = (pf.ranks[i], -pf.crowding[i])
    kj = (pf.ranks[j], -pf.crowding[j])
    return pf.records[j] if kj < ki else pf.records[i]


def crossover(a: Genome, b: Genome, rng: np.random.Generator) -> Genome:
    """Uniform crossover: every gene comes from either parent with equal odds."""
    take_b = rng.random(len(GENES)) < 0.5
    values = {g.name: getattr(b if tb else a, g.name) for g, tb in zip(GENES, take_b)}
    return a.with_(**values)


def mutate(g: Genome, rng: np.random.Generator, p_mutation: float) -> Genome:
    hit = rng.random(len(GENES)) < p_mutation
    values = {gene.name: gene.sample(rng) for gene, h in zip(GENES, hit) if h}
    return g.with_(**values) if values else g


def evolve(population: Sequence[TrialRecord], rng: np.random.Generator, n_offspring: int,
           p_crossover: float = 0.9, p_mutation: float | None = None) -> list[Genome]:
    """Offspring by binary tournament on (rank, crowding), uniform crossover and resampling mutation."""
    pf = ParetoFront.from_records(population)
    if len(pf.records) < 2:
        raise SearchError("evolution needs at least two completed trials")
    if p_mutation is None:
        p_mutation = 1.0 / len(GENES)
    kids = []
    for _ in range(n_offspring):
        a = tournament(pf, rng).genome
        b = tournament(pf, rng).genome
        child = crossover(a, b, rng) if rng.random() < p_crossover else a
        child = mutate(child, rng, p_mutation)
        kids.append(child.validate())
    return kids


def select_from_front(front: Sequence[TrialRecord], policy: str = "best_f1") -> TrialRecord:
    if not front:
        raise ContractError("cannot select from an empty front")
    if policy == "best_f1":
        return min(front, key=lambda r: (-r.f1, r.parameter_count, r.trial_id))
    if policy == "min_params":
        return min(front, key=lambda r: (r.parameter_count, -r.f1, r.trial_id))
    if policy != "knee":
        raise ContractError(f"policy must be one of {POLICIES}, got {policy!r}")
    return front[knee_index([r.objectives for r in front])]


def knee_index(points) -> int:
    """Index of the point farthest from the chord joining the front's extremes.

    Both objectives are rescaled to [0, 1] first. Ties go to the higher first
    objective, so a degenerate front falls back to its best-F1 end.
    """
    P = np.asarray(points, dtype=np.float64)
    span = P.max(axis=0) - P.min(axis=0)
    span[span == 0] = 1.0
    Z = (P - P.min(axis=0)) / span
    a = Z[np.argmin(Z[:, 1])]
    b = Z[np.argmax(Z[:, 1])]
    chord = b - a
    length = math.hypot(*chord)
    if length == 0:
        dist = np.zeros(len(P))
    else:
        dist = np.abs(chord[0] * (Z[:, 1] - a[1]) - chord[1] * (Z[:, 0] - a[0])) / length
    order = np.lexsort((P[:, 1], -P[:, 0], -np.round(dist, 12)))
    return int(order[0])


# ---------------------------------------------------------------- search


@dataclass
class SearchBudget:
    population: int = 20
    generations: int = 5
    per_trial_epochs: int = 5
    per_trial_seconds: float | None = None
    p_crossover: float = 0.9
    p_mutation: float | None = None

    def __post_init__(self):
        if self.population < 2 or self.generations < 1 or self.per_trial_epochs < 1:
            raise ContractError("need population >= 2, generations >= 1, per_trial_epochs >= 1")
        if self.per_trial_seconds is not None and self.per_trial_seconds <= 0:
            raise ContractError("per_trial_seconds must be positive")
        if not 0 <= self.p_crossover <= 1:
            raise ContractError("p_crossover must lie in [0, 1]")
        if self.p_mutation is not None and not 0 <= self.p_mutation <= 1:
            raise ContractError("p_mutation must lie in [0, 1]")


@dataclass
class SearchResult:
    records: list[TrialRecord]
    pareto: ParetoFront
    population: list[TrialRecord] = field(default_factory=list)

    @property
    def front(self) -> list[TrialRecord]:
        return self.pareto.front


def trial_seed(master: int, generation: int, slot: int) -> int:
    return int(np.random.SeedSequence([master, generation, slot]).generate_state(1)[0])


def eval_dataset(ds: TimeSeriesDataset, split: str) -> TimeSeriesDataset:
    """``test`` scores the whole labeled split; ``holdout`` keeps its second half unseen."""
    if split == "test":
        return ds
    if split != "holdout":
        raise ContractError(f"eval_split must be 'test' or 'holdout', got {split!r}")
    half = len(ds.test) // 2
    return replace(ds, test=ds.test[:half], test_labels=ds.test_labels[:half], label_dims=None)


def run_trial(ds: TimeSeriesDataset, genome: Genome, trial_id: int, generation: int, slot: int,
              seed: int, tcfg: TrainConfig, scfg: ScoringConfig) -> TrialRecord:
    """Train, score and evaluate one genome; failures become records, never exceptions."""
    g = genome.bind(ds.n_features)
    base = dict(trial_id=trial_id, generation=generation, slot=slot, genome=g, seed=seed)
    start = time.perf_counter()
    try:
        res = train_and_evaluate(ds, g, replace(tcfg, seed=seed), scfg, model_seed=seed)
    except TrainingError as exc:
        return TrialRecord(**base, status="pruned", reason=f"non-finite loss: {exc}",
                           training_time_seconds=time.perf_counter() - start)
    except Exception as exc:  # recorded, the search goes on
        return TrialRecord(**base, status="failed", reason=f"{type(exc).__name__}: {exc}",
                           training_time_seconds=time.perf_counter() - start)
    rep = res.report
    common = dict(parameter_count=res.model.parameter_count,
                  training_time_seconds=rep.wall_clock_seconds, epochs_run=rep.epochs_run,
                  stop_reason=rep.stop_reason)
    if rep.stop_reason in ("time_budget", "diverged"):
        return TrialRecord(**base, status="pruned", reason=rep.stop_reason, **common)
    ev = res.evaluation
    return TrialRecord(**base, status="completed", f1=ev.f1, precision=ev.precision,
                       recall=ev.recall, **common)


def _run_trial_packed(args):
    return run_trial(*args)


def _limit_threads():
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def run_search(ds: TimeSeriesDataset, budget: SearchBudget, seed: int = 0, jobs: int = 1,
               tcfg: TrainConfig | None = None, scfg: ScoringConfig | None = None,
               eval_split: str = "test",
               on_generation: Callable[[int, list[TrialRecord]], None] | None = None
               ) -> SearchResult:
    """NSGA-II loop: sample, evaluate, then alternate evolve / evaluate / survive.

    Every generation evaluates ``population`` new genomes, so the ledger holds
    ``population * generations`` trials. Genome draws use a generator seeded by
    ``seed``; each trial trains from ``trial_seed(seed, generation, slot)``, so
    results do not depend on ``jobs`` or completion order.
    """
    tcfg = tcfg or TrainConfig()
    tcfg = replace(tcfg, epochs=budget.per_trial_epochs, max_train_seconds=budget.per_trial_seconds)
    scfg = scfg or ScoringConfig()
    ds_eval = eval_dataset(ds, eval_split)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EA4C7]))
    records: list[TrialRecord] = []
    population: list[TrialRecord] = []
    pool = None
    if jobs > 1:
        _limit_threads()
        pool = ProcessPoolExecutor(max_workers=jobs, initializer=_limit_threads)
    try:
        for gen in range(budget.generations):
            done = [r for r in population if r.completed]
            if gen == 0 or len(done) < 2:
                genomes = [sample_genome(rng, ds.n_features) for _ in range(budget.population)]
            else:
                genomes = evolve(done, rng, budget.population, budget.p_crossover,
                                 budget.p_mutation)
            jobs_args = []
            for slot, g in enumerate(genomes):
                tid = gen * budget.population + slot
                jobs_args.append((ds_eval, g, tid, gen, slot, trial_seed(seed, gen, slot),
                                  tcfg, scfg))
            if pool is None:
                batch = [_run_trial_packed(a) for a in jobs_args]
            else:
                batch = list(pool.map(_run_trial_packed, jobs_args))
            records.extend(batch)
            population = select_survivors(population + batch, budget.population)
            if on_generation is not None:
                on_generation(gen, batch)
    finally:
        if pool is not None:
            pool.shutdown()
    pareto = ParetoFront.from_records(records)
    if not pareto.records:
        raise SearchError(f"no trial completed out of {len(records)}")
    return SearchResult(records, pareto, population)
