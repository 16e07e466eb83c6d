"""Scaling-experiment harness for the distributed join.

One trial launches W workers (processes over TCP, cooperative tasks over
natsim), each of which joins its generated table shards `it` times with a
barrier before every iteration, timing the barrier and the join separately
plus the communicator init, all in milliseconds.  Per-rank timings are
gathered to rank 0; the trial time for an iteration is the maximum across
ranks (the BSP critical path), and a trial's time is the mean over its
iterations.  Each (world size) point is repeated `repeats` times and
reported as mean +/- sample standard deviation, with speedup against the
first world size in the list and the propagated error

    dS = S * sqrt((dT1/T1)^2 + (dT2/T2)^2)

Job metadata is cleared from the KV store before every repeat; without the
clearing, rank counters keep climbing across repeats and rank assignment
fails (which is itself covered by a regression test).

Over natsim, time is the virtual clock: message latency is configurable and
each worker charges a fixed virtual cost per row joined, so scaling shapes
are deterministic and exactly reproducible.
"""

from __future__ import annotations

import base64
import json
import math
import os
import platform
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .bootstrap import KvClient, KvServerCore, clear_job, start_kv_thread
from .comm import CommConfig, comm_init
from .errors import DivideByZero, NoData, PunchgridError
from .natsim import Scheduler, VirtualNetwork
from .rendezvous import RendezvousCore, start_rendezvous_thread
from .table import DistributedTable, Partition, Schema, distributed_join
from .transport import PeerAddress, serve_loop
from .wire import TypeTag

ENV_JOB = "PUNCHGRID_JOB"
ENV_KV = "PUNCHGRID_KV"
ENV_RDV = "PUNCHGRID_RDV"
ENV_PAYLOAD = "PUNCHGRID_PAYLOAD"

_M64 = (1 << 64) - 1

TABLE_SCHEMA = Schema([("key", TypeTag.INT64), ("value", TypeTag.INT64)])


class TrialFailed(PunchgridError):
    """A worker failed or died mid-trial."""


@dataclass
class ExperimentConfig:
    mode: str = "strong"  # weak: rows per worker; strong: total rows
    rows: int = 1_000_000
    world_sizes: tuple[int, ...] = (1, 2, 4)
    iterations: int = 3
    repeats: int = 2
    unique_fraction: float = 1.0
    seed: int = 42
    transport: str = "tcp"  # or "natsim"
    out_dir: Path = Path("results")
    natsim_latency: float = 0.001
    natsim_charge_per_row: float = 50e-9  # virtual seconds of compute per input row
    op_timeout: float = 120.0
    worker_grace: float = 300.0  # wall-clock budget per TCP trial

    def __post_init__(self):
        if self.mode not in ("weak", "strong"):
            raise ValueError(f"mode must be weak or strong, got {self.mode!r}")
        if self.transport not in ("tcp", "natsim"):
            raise ValueError(f"transport must be tcp or natsim, got {self.transport!r}")
        if not 0 < self.unique_fraction <= 1:
            raise ValueError("unique_fraction must be in (0, 1]")
        if self.iterations < 1 or self.repeats < 1:
            raise ValueError("iterations and repeats must be >= 1")
        if not self.world_sizes:
            raise ValueError("need at least one world size")
        if self.mode == "strong" and self.rows < max(self.world_sizes):
            raise ValueError("strong scaling needs rows >= the largest world size")
        self.out_dir = Path(self.out_dir)

    def rows_per_worker(self, world_size: int) -> int:
        if self.mode == "weak":
            return self.rows
        return self.rows // world_size


@dataclass
class TimingRecord:
    world_size: int
    trial: int
    iteration: int
    join_ms: float      # max over ranks
    barrier_ms: float   # max over ranks
    com_init_ms: float  # max over ranks

    def __post_init__(self):
        if min(self.join_ms, self.barrier_ms, self.com_init_ms) < 0:
            raise ValueError("times must be >= 0")


@dataclass
class ScalingRow:
    world_size: int
    mean_s: float
    std_s: float


@dataclass
class SpeedupRow:
    world_size: int
    speedup: float
    err: float


def splitmix64(x: int) -> int:
    """Stateless splitmix64 step; seeds one rank's generator stream."""
    z = (x + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4B5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return (z ^ (z >> 31)) & _M64


def generate_tables(rows: int, unique_fraction: float, seed: int, rank: int, world_size: int):
    """Two (key, value) shards with keys uniform over [0, ceil(u*rows*W)).

    Deterministic per (seed, rank): the stream is seeded by
    splitmix64(seed XOR rank).
    """
    if not 0 < unique_fraction <= 1:
        raise ValueError("unique_fraction must be in (0, 1]")
    domain = max(1, math.ceil(unique_fraction * rows * world_size))
    rng = np.random.default_rng(splitmix64((seed ^ rank) & _M64))

    def one() -> Partition:
        keys = rng.integers(0, domain, size=rows, dtype=np.int64)
        values = rng.integers(0, 1 << 64, size=rows, dtype=np.uint64).view(np.int64)
        return Partition(TABLE_SCHEMA, [keys, values])

    return one(), one()


# --- per-worker experiment body (both transports) ---

def execute_worker(env, job: str, kv_addr, rdv_addr, payload: dict) -> Optional[dict]:
    """Init, iterate barrier+join, gather timings; rank 0 returns the result."""
    world_size = int(payload["world_size"])
    iterations = int(payload["it"])
    rows = int(payload["rows_per_worker"])
    charge = float(payload.get("charge_per_row", 0.0))
    config = CommConfig(op_timeout=float(payload.get("op_timeout", 120.0)))

    init_start = env.now()
    comm = comm_init(job, kv_addr, rdv_addr, world_size, config, env=env)
    com_init = (env.now() - init_start) * 1000

    left, right = generate_tables(
        rows, float(payload["unique"]), int(payload["seed"]), comm.rank, world_size
    )
    ltable = DistributedTable(left, world_size, comm.rank)
    rtable = DistributedTable(right, world_size, comm.rank)

    barrier_ms = []
    join_ms = []
    join_rows = []
    for _ in range(iterations):
        barrier_start = env.now()
        comm.barrier()
        barrier_ms.append((env.now() - barrier_start) * 1000)

        t1 = env.now()
        result = distributed_join(comm, ltable, rtable, key_col=0)
        if charge > 0:
            env.sleep((left.num_rows + right.num_rows) * charge)
        join_ms.append((env.now() - t1) * 1000)
        join_rows.append(result.local.num_rows)

    stats = {
        "rank": comm.rank,
        "com_init_ms": com_init,
        "barrier_ms": barrier_ms,
        "join_ms": join_ms,
        "join_rows": join_rows,
    }
    gathered = comm.gatherv(0, json.dumps(stats).encode("utf-8"))
    comm.finalize()
    if comm.rank != 0:
        return None

    per_rank = [json.loads(blob.decode("utf-8")) for blob in gathered]
    records = []
    for i in range(iterations):
        records.append(
            {
                "world_size": world_size,
                "trial": int(payload["trial"]),
                "iteration": i,
                "join_ms": max(r["join_ms"][i] for r in per_rank),
                "barrier_ms": max(r["barrier_ms"][i] for r in per_rank),
                "com_init_ms": max(r["com_init_ms"] for r in per_rank),
            }
        )
    total_join_rows = [sum(r["join_rows"][i] for r in per_rank) for i in range(iterations)]
    return {"records": records, "join_rows_per_iteration": total_join_rows}


def worker_main_from_env(environ=os.environ) -> int:
    """Entry point for a spawned TCP worker process."""
    try:
        job = environ[ENV_JOB]
        kv_addr = PeerAddress.parse(environ[ENV_KV])
        rdv_addr = PeerAddress.parse(environ[ENV_RDV])
        payload = json.loads(base64.b64decode(environ[ENV_PAYLOAD]))
    except (KeyError, ValueError) as exc:
        print(f"worker: bad environment: {exc}", file=sys.stderr)
        return 2
    try:
        from .transport import TcpEnv

        result = execute_worker(TcpEnv(), job, kv_addr, rdv_addr, payload)
    except Exception as exc:  # noqa: BLE001 - worker boundary
        import traceback

        print(f"worker: {type(exc).__name__}: {exc}", file=sys.stderr)
        traceback.print_exc(file=sys.stderr)
        return 1
    if result is not None:
        Path(payload["result_path"]).write_text(json.dumps(result))
    return 0


# --- statistics ---

def speedup(baseline: ScalingRow, parallel: ScalingRow) -> SpeedupRow:
    """S = T1/T2 with error S*sqrt((dT1/T1)^2 + (dT2/T2)^2)."""
    if parallel.mean_s == 0 or baseline.mean_s == 0:
        raise DivideByZero(
            f"speedup undefined for T1={baseline.mean_s}, T2={parallel.mean_s}"
        )
    s = baseline.mean_s / parallel.mean_s
    rel = math.sqrt(
        (baseline.std_s / baseline.mean_s) ** 2 + (parallel.std_s / parallel.mean_s) ** 2
    )
    return SpeedupRow(parallel.world_size, s, s * rel)


def aggregate(records: list[TimingRecord], world_sizes) -> list[ScalingRow]:
    """Mean +/- sample std (over repeats) of per-trial mean join seconds."""
    rows = []
    for w in world_sizes:
        trials: dict[int, list[float]] = {}
        for rec in records:
            if rec.world_size == w:
                trials.setdefault(rec.trial, []).append(rec.join_ms / 1000.0)
        if not trials:
            raise NoData(f"no successful trials for world size {w}")
        means = [sum(v) / len(v) for _, v in sorted(trials.items())]
        mean = sum(means) / len(means)
        if len(means) > 1:
            var = sum((m - mean) ** 2 for m in means) / (len(means) - 1)
            std = math.sqrt(var)
        else:
            std = 0.0
        rows.append(ScalingRow(w, mean, std))
    return rows


def speedup_table(scaling: list[ScalingRow]) -> list[SpeedupRow]:
    baseline = scaling[0]
    return [speedup(baseline, row) for row in scaling]


def emit(scaling, speedups, fmt: str, path: Path, mode: str = "strong") -> None:
    """Write scaling + speedup rows as csv or whitespace plotdat."""
    pairs = list(zip(scaling, speedups))
    with open(path, "w", encoding="utf-8") as fh:
        if fmt == "csv":
            fh.write("mode,W,mean_s,std_s,speedup,speedup_err\n")
            for srow, sp in pairs:
                fh.write(
                    f"{mode},{srow.world_size},{srow.mean_s:.6f},{srow.std_s:.6f},"
                    f"{sp.speedup:.6f},{sp.err:.6f}\n"
                )
        elif fmt == "plotdat":
            fh.write("# W speedup err mean_s std_s\n")
            for srow, sp in pairs:
                fh.write(
                    f"{srow.world_size} {sp.speedup:.6f} {sp.err:.6f} "
                    f"{srow.mean_s:.6f} {srow.std_s:.6f}\n"
                )
        else:
            raise ValueError(f"unknown format {fmt!r}")


# --- trial runners ---

def _payload(config: ExperimentConfig, w: int, trial: int, result_path: str) -> dict:
    return {
        "mode": config.mode,
        "world_size": w,
        "rows_per_worker": config.rows_per_worker(w),
        "it": config.iterations,
        "unique": config.unique_fraction,
        "seed": config.seed,
        "trial": trial,
        "rank_hint": None,  # filled per spawn; ranks come from the atomic counter
        "charge_per_row": config.natsim_charge_per_row if config.transport == "natsim" else 0.0,
        "op_timeout": config.op_timeout,
        "result_path": result_path,
    }


def run_trial_tcp(
    config: ExperimentConfig, w: int, trial: int, job: str, kv_addr, rdv_addr, workdir: Path
) -> dict:
    result_path = workdir / f"trial-w{w}-t{trial}.json"
    payload = _payload(config, w, trial, str(result_path))
    procs = []
    for rank_hint in range(w):
        env = os.environ.copy()
        env[ENV_JOB] = job
        env[ENV_KV] = str(kv_addr)
        env[ENV_RDV] = str(rdv_addr)
        env[ENV_PAYLOAD] = base64.b64encode(
            json.dumps({**payload, "rank_hint": rank_hint}).encode()
        ).decode("ascii")
        procs.append(
            subprocess.Popen(
                [sys.executable, "-m", "punchgrid", "worker"],
                env=env,
                stdout=subprocess.DEVNULL,
                stderr=subprocess.PIPE,
            )
        )
    deadline = time.monotonic() + config.worker_grace
    failures = []
    for proc in procs:
        remaining = max(deadline - time.monotonic(), 0.1)
        try:
            code = proc.wait(timeout=remaining)
        except subprocess.TimeoutExpired:
            proc.kill()
            failures.append("worker timed out")
            continue
        if code != 0:
            stderr = proc.stderr.read().decode("utf-8", "replace") if proc.stderr else ""
            failures.append(f"worker exited {code}: {stderr.strip()}")
    if failures:
        for proc in procs:
            if proc.poll() is None:
                proc.kill()
        raise TrialFailed(f"W={w} trial={trial}: " + " | ".join(failures))
    if not result_path.exists():
        raise TrialFailed(f"W={w} trial={trial}: rank 0 wrote no result")
    return json.loads(result_path.read_text())


def run_trial_natsim(config: ExperimentConfig, w: int, trial: int, job: str, cluster) -> dict:
    sched, kv_addr, rdv_addr, worker_envs = cluster
    payload = _payload(config, w, trial, "")
    outcome: dict = {}

    def worker(env):
        result = execute_worker(env, job, kv_addr, rdv_addr, payload)
        if result is not None:
            outcome.update(result)

    spawned = [
        sched.spawn(worker, worker_envs[i], name=f"bench-w{w}-t{trial}-{i}")
        for i in range(w)
    ]
    sched.run()
    errors = [t.error for t in spawned if t.error is not None]
    if errors:
        raise TrialFailed(f"W={w} trial={trial}: {errors[0]!r}") from errors[0]
    if not outcome:
        raise TrialFailed(f"W={w} trial={trial}: no rank 0 result")
    return outcome


def _natsim_cluster(config: ExperimentConfig, w: int):
    """Fresh virtual network with public KV/rendezvous and w public workers."""
    sched = Scheduler()
    net = VirtualNetwork(sched, latency=config.natsim_latency)
    kv_env = net.attach(None, "203.0.113.1")
    rdv_env = net.attach(None, "203.0.113.2")
    control_env = net.attach(None, "203.0.113.3")
    kv_listener = kv_env.listen(6000)
    rdv_listener = rdv_env.listen(7000)
    sched.spawn(
        lambda: serve_loop(kv_env, kv_listener, KvServerCore()), name="kv", daemon=True
    )
    sched.spawn(
        lambda: serve_loop(rdv_env, rdv_listener, RendezvousCore()), name="rdv", daemon=True
    )
    worker_envs = [net.attach(None, f"10.0.{i}.2") for i in range(w)]
    kv_addr = PeerAddress("203.0.113.1", 6000)
    rdv_addr = PeerAddress("203.0.113.2", 7000)
    return (sched, kv_addr, rdv_addr, worker_envs), control_env


def _clear_job_natsim(sched, control_env, kv_addr, job: str) -> None:
    def clear():
        kv = KvClient(control_env, kv_addr)
        clear_job(kv, job)
        kv.close()

    task = sched.spawn(clear, name="clear-job")
    sched.run()
    if task.error is not None:
        raise task.error


def launch(config: ExperimentConfig, *, log=lambda msg: None) -> int:
    """Run the full experiment matrix; returns a process exit status."""
    config.out_dir.mkdir(parents=True, exist_ok=True)
    records: list[TimingRecord] = []
    raw_trials = []
    status = 0
    started = time.strftime("%Y-%m-%dT%H:%M:%S")

    kv_stop = rdv_stop = None
    try:
        if config.transport == "tcp":
            kv_addr, kv_stop = start_kv_thread()
            rdv_addr, rdv_stop = start_rendezvous_thread()
            control_kv = KvClient(_control_tcp_env(), kv_addr)
        for w in config.world_sizes:
            job = f"bench-w{w}"
            cluster = control_env = None
            if config.transport == "natsim":
                cluster, control_env = _natsim_cluster(config, w)
            for trial in range(config.repeats):
                # stale metadata makes rank assignment fail on reruns,
                # so clear the job before every repeat
                if config.transport == "tcp":
                    clear_job(control_kv, job)
                    result = run_trial_tcp(
                        config, w, trial, job, kv_addr, rdv_addr, config.out_dir
                    )
                else:
                    _clear_job_natsim(cluster[0], control_env, cluster[1], job)
                    result = run_trial_natsim(config, w, trial, job, cluster)
                raw_trials.append({"world_size": w, "trial": trial, **result})
                for rec in result["records"]:
                    records.append(
                        TimingRecord(
                            rec["world_size"],
                            rec["trial"],
                            rec["iteration"],
                            rec["join_ms"],
                            rec["barrier_ms"],
                            rec["com_init_ms"],
                        )
                    )
                log(f"W={w} trial={trial}: done")
        scaling = aggregate(records, config.world_sizes)
        speedups = speedup_table(scaling)
        emit(scaling, speedups, "csv", config.out_dir / "results.csv", config.mode)
        emit(scaling, speedups, "plotdat", config.out_dir / "speedup.dat", config.mode)
    except (TrialFailed, NoData, PunchgridError) as exc:
        log(f"FAILED: {exc}")
        status = 1
    finally:
        if kv_stop:
            kv_stop()
        if rdv_stop:
            rdv_stop()
    metadata = {
        "mode": config.mode,
        "rows": config.rows,
        "world_sizes": list(config.world_sizes),
        "iterations": config.iterations,
        "repeats": config.repeats,
        "unique_fraction": config.unique_fraction,
        "seed": config.seed,
        "transport": config.transport,
        "trial_time_reduction": "max_over_ranks",
        "time_unit_tables": "seconds",
        "time_unit_internal": "milliseconds",
        "natsim_latency": config.natsim_latency,
        "natsim_charge_per_row": config.natsim_charge_per_row,
        "started_at": started,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "status": status,
    }
    (config.out_dir / "run-metadata.json").write_text(json.dumps(metadata, indent=2))
    (config.out_dir / "trials.json").write_text(json.dumps(raw_trials, indent=2))
    return status


def _control_tcp_env():
    from .transport import TcpEnv

    return TcpEnv()
