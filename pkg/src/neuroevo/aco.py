"""Ant-colony search over gate connectivity meshes.

Each ant walks one input->hidden edge, drawn by roulette over pheromone
mass; the union of ant paths forms a candidate mesh. Candidate meshes are
scored by an evaluator (typically: build a network, train it, return test
MAE) and kept in a fitness-ordered population. A new best score reinforces
the pheromones along its mesh's paths; pheromones stay within
[1, max_pheromone] and are never decreased.
"""

from __future__ import annotations

import logging
import time
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from .lstm import DEFAULT_N_INPUTS, Mesh, build_network
from .trainer import train

log = logging.getLogger("neuroevo.aco")

# Safety valve for evaluators that can never succeed; the search itself
# tolerates intermittent failures without counting them as iterations.
MAX_CONSECUTIVE_FAILURES = 100


@dataclass(eq=False)
class Pheromones:
    """Sampling weights for input nodes and input->hidden edges.

    The reduction-side array is carried so serialized state keeps a fixed
    shape, but it is never sampled from nor updated: reduction marks arise
    only as endpoints of sampled edges.
    """

    input: np.ndarray
    m1: np.ndarray
    m2: np.ndarray

    @classmethod
    def init(cls, n: int = DEFAULT_N_INPUTS) -> "Pheromones":
        return cls(np.ones(n), np.ones((n, n)), np.ones(n))

    @property
    def n(self) -> int:
        return self.input.shape[0]

    def copy(self) -> "Pheromones":
        return Pheromones(self.input.copy(), self.m1.copy(), self.m2.copy())

    def in_bounds(self, max_pheromone: float) -> bool:
        return bool(
            (self.input >= 1.0).all() and (self.input <= max_pheromone).all()
            and (self.m1 >= 1.0).all() and (self.m1 <= max_pheromone).all()
            and (self.m2 >= 1.0).all() and (self.m2 <= max_pheromone).all()
        )


@dataclass
class AcoConfig:
    n_ants: int = 200
    n_iterations: int = 1000
    max_pheromone: float = 20.0
    reward_factor: float = 1.15
    seed: int = 0
    population_capacity: int | None = None  # defaults to n_iterations

    def __post_init__(self):
        if self.n_ants < 1:
            raise ValueError("n_ants must be >= 1")
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be >= 0")
        if self.max_pheromone <= 1:
            raise ValueError("max_pheromone must be > 1")
        if self.reward_factor <= 1:
            raise ValueError("reward_factor must be > 1")
        if self.population_capacity is not None and self.population_capacity < 0:
            raise ValueError("population_capacity must be >= 0")

    @property
    def capacity(self) -> int:
        if self.population_capacity is None:
            return self.n_iterations
        return self.population_capacity


@dataclass
class Population:
    """Fitness-ascending archive of evaluated meshes."""

    capacity: int
    entries: list = field(default_factory=list)  # (fitness, mesh), ascending

    def __len__(self) -> int:
        return len(self.entries)

    def fitnesses(self) -> list:
        return [f for f, _ in self.entries]


def roulette(weights, rng) -> int:
    """Cumulative-walk roulette: index i with probability w_i / sum(w)."""
    weights = np.asarray(weights, dtype=np.float64)
    r = rng.uniform(0.0, float(weights.sum()))
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if r < acc:
            return i
    return len(weights) - 1  # r landed on the total mass by rounding


def generate_paths(pher: Pheromones, n_ants: int, rng) -> Mesh:
    """Union of ``n_ants`` sampled input->hidden paths as a mesh.

    Each ant first draws an input node over ``pher.input``, then a hidden
    node over that input's row of ``pher.m1``; duplicates collapse since
    the mesh is a set of marks.
    """
    mesh = Mesh.empty(pher.n)
    for _ in range(n_ants):
        i = roulette(pher.input, rng)
        j = roulette(pher.m1[i], rng)
        mesh.input_mask[i] = 1
        mesh.m1[i, j] = 1
        mesh.m2[j] = 1
    return mesh


def update_pheromones(pher: Pheromones, mesh: Mesh, cfg: AcoConfig) -> Pheromones:
    """Reinforce the marked inputs and edges; returns a new Pheromones.

    Marked values are multiplied by ``cfg.reward_factor`` and clamped to
    ``cfg.max_pheromone``; nothing is ever decreased, and the reduction-side
    array is never touched.
    """
    out = pher.copy()
    marked_in = mesh.input_mask.astype(bool)
    out.input[marked_in] = np.minimum(
        out.input[marked_in] * cfg.reward_factor, cfg.max_pheromone)
    marked_m1 = mesh.m1.astype(bool)
    out.m1[marked_m1] = np.minimum(
        out.m1[marked_m1] * cfg.reward_factor, cfg.max_pheromone)
    return out


def insert_population(pop: Population, fitness: float, mesh: Mesh) -> int:
    """In-order insert by ascending fitness; returns the insertion rank.

    Rank 0 means strictly better than every current entry; ties rank after
    equal-fitness incumbents. Beyond capacity the worst entry is evicted
    (possibly the new one).
    """
    fitness = float(fitness)
    if not np.isfinite(fitness):
        raise ValueError(f"non-finite fitness {fitness!r}")
    rank = bisect_right(pop.entries, fitness, key=lambda e: e[0])
    pop.entries.insert(rank, (fitness, mesh))
    if len(pop.entries) > pop.capacity:
        pop.entries.pop()
    return rank


@dataclass
class IterationLog:
    iteration: int  # 1-based index of the successful evaluation
    fitness: float
    m1_count: int
    m2_count: int
    total_connections: int  # m1 edges plus reduction links
    wall_time_s: float
    rank: int  # insertion rank; 0 triggered a pheromone reward


@dataclass
class EvolutionResult:
    population: Population
    best_mesh: Mesh | None
    best_fitness: float
    pheromones: Pheromones
    logs: list
    failures: int


def local_evaluator(train_data, test_data, arch: str, train_cfg,
                    horizon: int = 1, T: int | None = None):
    """Mesh -> fitness callable: build, train, return test MAE."""
    def evaluate_mesh(mesh: Mesh) -> float:
        net = build_network(arch, mesh, horizon=horizon,
                            seed=train_cfg.seed, T=T)
        report = train(net, train_data, test_data, train_cfg)
        return report.test_mae
    return evaluate_mesh


def evolve(cfg: AcoConfig, evaluator, n_inputs: int = DEFAULT_N_INPUTS,
           on_iteration=None) -> EvolutionResult:
    """Run the sample/evaluate/reinforce loop until n_iterations successes.

    ``evaluator`` maps a Mesh to a finite fitness (lower is better). A
    raised exception or non-finite return is logged and does not count as
    an iteration; the mesh is dropped and a fresh one is sampled.
    ``on_iteration(entry, mesh, pheromones, population)`` is called after
    each successful evaluation with the live state.
    """
    rng = np.random.default_rng(cfg.seed)
    pher = Pheromones.init(n_inputs)
    pop = Population(capacity=cfg.capacity)
    logs = []
    failures = 0
    consecutive_failures = 0
    best_fitness = np.inf
    best_mesh = None
    iteration = 0
    while iteration < cfg.n_iterations:
        mesh = generate_paths(pher, cfg.n_ants, rng)
        t0 = time.perf_counter()
        try:
            fitness = float(evaluator(mesh))
            if not np.isfinite(fitness):
                raise ValueError(f"non-finite fitness {fitness!r}")
        except Exception as exc:
            failures += 1
            consecutive_failures += 1
            log.warning("evaluation failed, resampling: %s", exc)
            if consecutive_failures >= MAX_CONSECUTIVE_FAILURES:
                raise RuntimeError(
                    f"{consecutive_failures} consecutive evaluation failures; "
                    "aborting the run") from exc
            continue
        wall = time.perf_counter() - t0
        consecutive_failures = 0
        iteration += 1
        rank = insert_population(pop, fitness, mesh)
        if rank == 0:
            pher = update_pheromones(pher, mesh, cfg)
        if fitness < best_fitness:
            best_fitness = fitness
            best_mesh = mesh
        entry = IterationLog(
            iteration=iteration, fitness=fitness,
            m1_count=mesh.m1_count, m2_count=mesh.m2_count,
            total_connections=mesh.m1_count + mesh.m2_count,
            wall_time_s=wall, rank=rank,
        )
        logs.append(entry)
        if on_iteration is not None:
            on_iteration(entry, mesh, pher, pop)
        log.info("iteration %d/%d fitness=%g rank=%d m1=%d",
                 iteration, cfg.n_iterations, fitness, rank, mesh.m1_count)
    return EvolutionResult(
        population=pop, best_mesh=best_mesh,
        best_fitness=float(best_fitness), pheromones=pher,
        logs=logs, failures=failures,
    )


LOG_COLUMNS = ("iteration", "fitness", "m1_count", "m2_count",
               "total_connections", "wall_time_s")


def write_evolution_log(logs, path) -> None:
    """Per-iteration CSV with the documented column set."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for e in logs:
            fh.write(f"{e.iteration},{float(e.fitness)!r},{e.m1_count},"
                     f"{e.m2_count},{e.total_connections},"
                     f"{e.wall_time_s:.3f}\n")


def read_evolution_log(path) -> list:
    """Rows of the evolution CSV as dicts with numeric fields parsed."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != list(LOG_COLUMNS):
            raise ValueError(f"unexpected evolution log header: {header}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            rows.append({
                "iteration": int(parts[0]),
                "fitness": float(parts[1]),
                "m1_count": int(parts[2]),
                "m2_count": int(parts[3]),
                "total_connections": int(parts[4]),
                "wall_time_s": float(parts[5]),
            })
    return rows
