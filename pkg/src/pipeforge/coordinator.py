"""Task manager: generates tasks from the bandit and the advisors, consumes results and persists progress."""
from __future__ import annotations

import logging
import math
import time
import uuid
import warnings
from collections import Counter
from typing import Any, Callable

import numpy as np

from pipeforge.bandit import AllExhausted, LpStats, next_logical_pipeline, update_stats
from pipeforge.config import ExperimentConfig, config_from_dict, config_to_dict
from pipeforge.executor import Observation, Task, protocol_from_config
from pipeforge.mobo import Advisor, DomainExhausted, hypervolume, pareto_mask
from pipeforge.mobo.advisor import DuplicateAssignment
from pipeforge.searchspace import LogicalPipeline, PhysicalPipeline, enumerate_logical_pipelines
from pipeforge.store import RunStore, StoreError
from pipeforge.transport.broker import Broker
from pipeforge.transport.framing import Envelope

logger = logging.getLogger(__name__)

WORK_UNIT_SCALE = 1e7
IDLE_WARNING_SECONDS = 30.0


class ConfigMismatch(StoreError):
    """The run directory belongs to a different configuration."""


def observation_cost(record: dict[str, Any], measure: str) -> float:
    if measure == "work_units":
        return float(record.get("work", 0.0)) / WORK_UNIT_SCALE
    return float(record.get("wall_time_seconds", 0.0))


class Coordinator:
    """Single-threaded owner of all run state.

    Queue occupancy counts every generated task that has not completed yet,
    whether it waits in the broker or runs on a worker. New tasks are added
    in batches of ``num_pp_candidates`` whenever that many slots are free
    (the last batch shrinks to the remaining budget).
    """

    def __init__(self, cfg: ExperimentConfig, store: RunStore, broker: Broker, *,
                 clock: Callable[[], float] = time.monotonic, wall_clock: Callable[[], float] = time.time,
                 idle_warning: float = IDLE_WARNING_SECONDS, describe_idle: Callable[[], str] | None = None):
        self.cfg = cfg
        self.store = store
        self.broker = broker
        self.clock = clock
        self.wall_clock = wall_clock
        self.idle_warning = idle_warning
        self.describe_idle = describe_idle
        self.protocol = protocol_from_config(cfg)
        self.run_id = cfg.config_hash()
        self.weights = np.asarray(cfg.weights)
        self.ref_point = np.asarray(cfg.ref_point, dtype=float)

        self.lps: list[LogicalPipeline] = enumerate_logical_pipelines(cfg)
        self.lp_by_id = {lp.id: lp for lp in self.lps}
        self.stats = {lp.id: LpStats(cfg.n_objectives) for lp in self.lps}
        self.advisors: dict[str, Advisor] = {}
        self.issued: Counter[str] = Counter()
        self.domain_done: set[str] = set()
        self.lp_cap = math.ceil(cfg.max_total_pipelines_num / len(self.lps))

        self.tasks: dict[str, Task] = {}
        self.outstanding: dict[str, Task] = {}
        self.completed_ids: set[str] = set()
        self.records: list[dict[str, Any]] = []
        self.generated = 0
        self.selections = 0
        self.best_error = math.inf
        self.best: dict[str, Any] | None = None
        self.stop_generating = False
        self.elapsed_before = 0.0
        self._session_start = clock()

    # -- setup -------------------------------------------------------------

    @property
    def budget(self) -> int:
        return self.cfg.max_total_pipelines_num

    @property
    def completed(self) -> int:
        return len(self.records)

    def initialize(self) -> "Coordinator":
        """Create the run directory, or rebuild state from an existing one."""
        if self.store.exists():
            meta = self.store.read_config()
            if meta.get("config_hash") != self.run_id:
                raise ConfigMismatch(f"{self.store.root} holds a run for config {meta.get('config_hash')}, "
                                     f"not {self.run_id}")
            self._replay()
        else:
            self.store.create(config_to_dict(self.cfg), self.run_id)
            self._write_snapshot()
        return self

    def _replay(self) -> None:
        self.store.repair()
        snapshot = self.store.load_snapshot() or {}
        self.lp_cap = max(self.lp_cap, int(snapshot.get("lp_cap", 0)))
        self.elapsed_before = float(snapshot.get("elapsed_seconds", 0.0))
        for rec in self.store.load_tasks():
            task = Task.from_dict(rec["task"])
            self._register_task(task)
            self.selections = max(self.selections, int(rec.get("selection", 0)))
        for rec in self.store.load_observations():
            if rec["task_id"] in self.outstanding:
                self._apply(rec)
        for lp_id in self.issued:
            if self._advisor(lp_id).exhausted():
                self.domain_done.add(lp_id)
        logger.info("resumed %s: %d generated, %d completed, %d outstanding", self.store.root, self.generated,
                    self.completed, len(self.outstanding))

    def _advisor(self, lp_id: str) -> Advisor:
        adv = self.advisors.get(lp_id)
        if adv is None:
            adv = Advisor(self.lp_by_id[lp_id], self.cfg.weights, self.cfg.ref_point, seed=self.cfg.seed)
            self.advisors[lp_id] = adv
        return adv

    def _register_task(self, task: Task) -> None:
        lp_id = task.pipeline.logical_pipeline_id
        self.tasks[task.task_id] = task
        self.outstanding[task.task_id] = task
        self.generated += 1
        self.issued[lp_id] += 1
        self._advisor(lp_id).mark_suggested(task.pipeline.assignment)

    # -- selection ---------------------------------------------------------

    def status(self, lp_id: str) -> str:
        if lp_id in self.domain_done or self.issued[lp_id] >= self.lp_cap:
            return "exhausted"
        return "active" if self.issued[lp_id] else "unseen"

    def _candidates(self) -> list[tuple[str, LpStats, str]]:
        return [(lp.id, self.stats[lp.id], self.status(lp.id)) for lp in self.lps]

    def _pick_lp(self) -> str:
        rng = np.random.default_rng([self.cfg.seed, 0xB4D17, self.selections])
        try:
            return next_logical_pipeline(self._candidates(), self.cfg.exploration_factor, rng)
        except AllExhausted:
            open_lps = [lp.id for lp in self.lps if lp.id not in self.domain_done]
            if not open_lps:
                raise
            # every LP hit its share of the budget; widen the share so the budget can still be spent
            remaining = self.budget - self.generated
            self.lp_cap += max(1, math.ceil(remaining / len(open_lps)))
            logger.info("per-pipeline cap raised to %d", self.lp_cap)
            return next_logical_pipeline(self._candidates(), self.cfg.exploration_factor, rng)

    def refill(self) -> list[Task]:
        """Generate batches while a whole batch fits in the queue and budget remains."""
        k = self.cfg.num_pp_candidates
        new: list[Task] = []
        while not self.stop_generating:
            remaining = self.budget - self.generated
            if remaining <= 0:
                break
            need = min(k, remaining)
            if self.cfg.queue_size - len(self.outstanding) < need:
                break
            try:
                lp_id = self._pick_lp()
            except AllExhausted:
                logger.warning("search space exhausted after %d tasks", self.generated)
                self.stop_generating = True
                break
            self.selections += 1
            n = min(need, self.lp_cap - self.issued[lp_id])
            adv = self._advisor(lp_id)
            try:
                suggestions = adv.suggest(n)
            except DomainExhausted:
                self.domain_done.add(lp_id)
                continue
            batch = [self._make_task(self.generated + i, lp_id, s.assignment, s.origin)
                     for i, s in enumerate(suggestions)]
            self.store.append_tasks([{"selection": self.selections, "task": t.to_dict()} for t in batch])
            for t in batch:
                self.tasks[t.task_id] = t
                self.outstanding[t.task_id] = t
                self.generated += 1
                self.issued[lp_id] += 1
            if adv.exhausted():
                self.domain_done.add(lp_id)
            new.extend(batch)
        if new:
            self._write_snapshot()
        return new

    def _make_task(self, counter: int, lp_id: str, assignment: dict, origin: str) -> Task:
        """Build the task with generation index ``counter``; ids and seeds derive from it."""
        task_id = str(uuid.uuid5(uuid.NAMESPACE_URL, f"pipeforge:{self.run_id}:{counter}"))
        seed = int(np.random.SeedSequence([self.cfg.seed, counter]).generate_state(1)[0])
        lp = self.lp_by_id[lp_id]
        pp = PhysicalPipeline(f"pp-{counter:06d}", lp_id, dict(assignment), origin, seed, lp.stages)
        return Task(task_id, pp, self.cfg.training_set_fractions_for_halting, self.cfg.weights, self.best_error,
                    seed, self.cfg.seed)

    def envelope(self, task: Task) -> Envelope:
        return Envelope("NewTask", {"task": task.to_dict(), "protocol": self.protocol.to_dict()}, "coordinator", 0)

    def publish(self, tasks: list[Task]) -> None:
        for t in tasks:
            self.broker.publish_task(self.envelope(t))

    # -- completions -------------------------------------------------------

    def on_completion(self, payload: dict[str, Any]) -> bool:
        """Fold one CompletedTask payload into the run. Returns False for duplicates and strays."""
        task_id = payload.get("task_id")
        if task_id in self.completed_ids:
            logger.debug("duplicate completion for %s ignored", task_id)
            return False
        if task_id not in self.outstanding:
            logger.warning("completion for unknown task %s dropped", task_id)
            return False
        obs = Observation.from_dict(payload)
        record = obs.to_dict(volatile=False)
        record["cost"] = observation_cost(payload, self.cfg.cost_measure)
        record["index"] = self.completed
        # write-ahead: the observation is durable before the task leaves the queue
        self.store.append_observation(record)
        self.store.append_timing({"task_id": task_id, "wall_time_seconds": obs.wall_time_seconds,
                                  "worker_id": obs.worker_id, "completed_at": self.wall_clock()})
        self._apply(record)
        self._write_snapshot()
        self.store.append_progress((f"{self.wall_clock():.6f}", self.completed, self._fmt(self.best_error),
                                    f"{self.hypervolume():.12g}"))
        return True

    def _apply(self, record: dict[str, Any]) -> None:
        lp_id = record["lp_id"]
        losses = record["losses"]
        update_stats(self.stats[lp_id], losses, record["cost"], self.cfg.weights, self.cfg.risk_factor)
        pipeline = record.get("pipeline") or {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DuplicateAssignment)
            self._advisor(lp_id).observe(pipeline.get("assignment", {}), losses)
        self.completed_ids.add(record["task_id"])
        self.outstanding.pop(record["task_id"], None)
        self.records.append(record)
        # strict comparison: ties keep the earliest completion
        if record["weighted_error"] < self.best_error:
            self.best_error = record["weighted_error"]
            self.best = record

    @staticmethod
    def _fmt(x: float) -> str:
        return "" if math.isinf(x) else f"{x:.12g}"

    # -- fronts ------------------------------------------------------------

    def losses(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.cfg.n_objectives))
        return np.array([r["losses"] for r in self.records], dtype=float)

    def pareto_records(self) -> list[dict[str, Any]]:
        losses = self.losses()
        if not len(losses):
            return []
        return [self.records[i] for i in np.flatnonzero(pareto_mask(losses))]

    def hypervolume(self) -> float:
        """Hypervolume of the weighted-loss front inside the reference box."""
        scaled = self.losses() * self.weights
        scaled = scaled[np.all(scaled <= self.ref_point, axis=1)]
        if not len(scaled):
            return 0.0
        return hypervolume(scaled, self.ref_point)

    # -- persistence -------------------------------------------------------

    def elapsed(self) -> float:
        return self.elapsed_before + (self.clock() - self._session_start)

    def snapshot(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "completed": self.completed,
            "generated": self.generated,
            "selections": self.selections,
            "queue_occupancy": len(self.outstanding),
            "queue_size": self.cfg.queue_size,
            "outstanding": list(self.outstanding),
            "lp_cap": self.lp_cap,
            "best_error": None if math.isinf(self.best_error) else self.best_error,
            "best_task_id": self.best["task_id"] if self.best else None,
            "elapsed_seconds": self.elapsed(),
            "lps": {lp.id: {"status": self.status(lp.id), "issued": self.issued[lp.id],
                            "stats": self.stats[lp.id].to_dict()} for lp in self.lps},
        }

    def _write_snapshot(self) -> None:
        self.store.write_snapshot(self.snapshot())

    # -- main loop ---------------------------------------------------------

    def finished(self) -> bool:
        if self.completed >= self.budget:
            return True
        return self.stop_generating and not self.outstanding

    def run(self, poll: float = 0.25) -> dict[str, Any]:
        """Drive the run to completion and return the final report."""
        self._session_start = self.clock()
        self.publish(list(self.outstanding.values()))
        self.publish(self.refill())
        last_event = self.clock()
        time_limit = self.cfg.max_time_budget_seconds
        while not self.finished():
            if time_limit is not None and not self.stop_generating and self.elapsed() >= time_limit:
                logger.info("time budget reached; draining %d outstanding tasks", len(self.outstanding))
                self.stop_generating = True
                continue
            env = self.broker.get_completed(timeout=poll)
            if env is None:
                if self.clock() - last_event >= self.idle_warning:
                    hint = self.describe_idle() if self.describe_idle else ""
                    logger.warning("no completions for %.0fs; %d tasks outstanding %s", self.clock() - last_event,
                                   len(self.outstanding), hint)
                    last_event = self.clock()
                continue
            last_event = self.clock()
            if self.on_completion(env.payload):
                self.publish(self.refill())
        self.broker.close()
        self._write_snapshot()
        report = self.final_report(finished=True)
        self.store.write_report(report)
        return report

    # -- reporting ---------------------------------------------------------

    def final_report(self, finished: bool = False) -> dict[str, Any]:
        if not self.records:
            status = "no result"
        elif finished or self.completed >= self.budget:
            status = "complete"
        else:
            status = "in-progress"
        best = None
        if self.best is not None:
            best = {k: self.best.get(k) for k in ("task_id", "lp_id", "pp_id", "weighted_error", "losses",
                                                   "fraction_reached", "halted", "pipeline")}
            best["metrics"] = (self.best.get("report") or {}).get("overall")
            best["groups"] = (self.best.get("report") or {}).get("groups")
        return {
            "status": status,
            "run_id": self.run_id,
            "budget": self.budget,
            "completed": self.completed,
            "generated": self.generated,
            "objectives": [o.name for o in self.cfg.objectives],
            "weights": list(self.cfg.weights),
            "ref_point": list(self.cfg.ref_point),
            "best": best,
            "pareto_front": [_summary(r) for r in self.pareto_records()],
            "hypervolume": self.hypervolume(),
            "lp_stats": [self._lp_row(lp) for lp in self.lps],
            "observations": [_summary(r) for r in self.records],
            "progress": self.store.load_progress(),
        }

    def _lp_row(self, lp: LogicalPipeline) -> dict[str, Any]:
        s = self.stats[lp.id]
        return {"lp_id": lp.id, "stages": list(lp.stages), "status": self.status(lp.id),
                "issued": self.issued[lp.id], "completed": s.count, "mean_quality": s.mean.tolist(),
                "std_quality": s.std.tolist(), "cost": s.cost, "score": None if math.isnan(s.score) else s.score}


def _summary(r: dict[str, Any]) -> dict[str, Any]:
    return {"task_id": r["task_id"], "lp_id": r["lp_id"], "pp_id": r["pp_id"], "losses": r["losses"],
            "weighted_error": r["weighted_error"], "fraction_reached": r["fraction_reached"],
            "halted": r["halted"], "failed": r.get("failed", False)}


def load_run(run_dir: str) -> Coordinator:
    """Rebuild a coordinator from a run directory without starting it."""
    store = RunStore(run_dir)
    meta = store.read_config()
    cfg = config_from_dict(meta["config"])
    return Coordinator(cfg, store, Broker()).initialize()


def run_experiment(cfg: ExperimentConfig, run_dir: str, *, mode: str = "inproc", workers: int | None = None,
                   listen: str = "127.0.0.1:0", redelivery_timeout: float | None = None,
                   on_listening: Callable[[str], None] | None = None) -> dict[str, Any]:
    """Run (or resume) an experiment in ``run_dir`` and return its final report.

    ``inproc`` hosts the workers as threads. ``tcp`` serves the broker on
    ``listen`` and waits for external ``worker`` processes.
    """
    from pipeforge.executor import prepare_context
    from pipeforge.transport.broker import DEFAULT_REDELIVERY_TIMEOUT
    from pipeforge.transport.tcp import BrokerServer, parse_address
    from pipeforge.transport.worker import ContextCache, start_inproc_workers

    broker = Broker(redelivery_timeout or DEFAULT_REDELIVERY_TIMEOUT)
    store = RunStore(run_dir)
    server = None
    describe = None
    if mode == "tcp":
        server = BrokerServer(broker, parse_address(listen))
        describe = lambda: f"({server.n_workers} workers connected)"  # noqa: E731
    coord = Coordinator(cfg, store, broker, describe_idle=describe).initialize()
    if coord.finished():
        report = coord.final_report(finished=True)
        store.write_report(report)
        if server is not None:
            server.server_close()
        return report
    try:
        if mode == "inproc":
            contexts = ContextCache(cfg.dataset_path)
            contexts.seed(prepare_context(coord.protocol, cfg.dataset_path))
            threads = start_inproc_workers(broker, contexts, workers or cfg.num_workers)
        elif mode == "tcp":
            server.start()
            logger.info("broker listening on %s", server.endpoint)
            if on_listening is not None:
                on_listening(server.endpoint)
            threads = []
        else:
            raise ValueError(f"unknown mode {mode!r}")
        report = coord.run()
        for t in threads:
            t.join(timeout=5.0)
        if server is not None:
            # give connected workers a moment to receive Shutdown
            deadline = time.monotonic() + 5.0
            while server.n_workers and time.monotonic() < deadline:
                time.sleep(0.05)
        return report
    finally:
        broker.close()
        if server is not None:
            server.stop()
