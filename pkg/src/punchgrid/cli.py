"""punchgrid command line: coordination servers, the benchmark harness, the
internal worker entry point, and a hole-punch demo on the simulated network."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .bench import ExperimentConfig, launch, worker_main_from_env
from .bootstrap import kv_serve
from .natsim import NatPolicy, Scheduler, VirtualNetwork
from .rendezvous import RetryPolicy, punch_connect, rendezvous_serve
from .transport import PeerAddress, TcpEnv, serve_loop


@click.group()
def main():
    """Message passing for NAT-bound workers, with benchmarks."""


def _parse_bind(bind: str) -> PeerAddress:
    return PeerAddress.parse(bind)


@main.command("kv-serve")
@click.option("--bind", default="127.0.0.1:7510", show_default=True, help="host:port to listen on")
def kv_serve_cmd(bind):
    """Run the key-value coordination server."""
    addr = _parse_bind(bind)
    click.echo(f"kv server listening on {addr}")
    kv_serve(TcpEnv(addr.host), addr.port, poll_interval=0.2)


@main.command("rendezvous")
@click.option("--bind", default="127.0.0.1:7520", show_default=True, help="host:port to listen on")
def rendezvous_cmd(bind):
    """Run the rendezvous (hole punching) server."""
    addr = _parse_bind(bind)
    click.echo(f"rendezvous server listening on {addr}")
    rendezvous_serve(TcpEnv(addr.host), addr.port, poll_interval=0.2)


@main.command("worker")
def worker_cmd():
    """Internal: benchmark worker, configured via PUNCHGRID_* env vars."""
    sys.exit(worker_main_from_env())


@main.command("bench")
@click.option("--mode", type=click.Choice(["weak", "strong"]), default="strong", show_default=True)
@click.option("--rows", type=int, default=1_000_000, show_default=True,
              help="weak: rows per worker; strong: total rows")
@click.option("--world", default="1,2,4", show_default=True, help="comma-separated world sizes")
@click.option("--it", "iterations", type=int, default=3, show_default=True, help="iterations per trial")
@click.option("--repeats", type=int, default=2, show_default=True, help="trials per world size")
@click.option("--unique", type=float, default=1.0, show_default=True, help="unique key fraction in (0,1]")
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--transport", type=click.Choice(["tcp", "natsim"]), default="tcp", show_default=True)
@click.option("--out", type=click.Path(path_type=Path), default=Path("results"), show_default=True)
@click.option("--paper-scale", is_flag=True,
              help="use the published experiment sizes (9.1M/4.5M rows, W up to 64, 10 iterations, 4 repeats)")
def bench_cmd(mode, rows, world, iterations, repeats, unique, seed, transport, out, paper_scale):
    """Run the distributed-join scaling benchmark and write results."""
    world_sizes = tuple(int(w) for w in world.split(","))
    if paper_scale:
        rows = 9_100_000 if mode == "weak" else 4_500_000
        world_sizes = (1, 2, 4, 8, 16, 32, 64)
        iterations = 10
        repeats = 4
    config = ExperimentConfig(
        mode=mode,
        rows=rows,
        world_sizes=world_sizes,
        iterations=iterations,
        repeats=repeats,
        unique_fraction=unique,
        seed=seed,
        transport=transport,
        out_dir=out,
    )
    status = launch(config, log=click.echo)
    if status == 0:
        click.echo(f"results in {out}/results.csv, {out}/speedup.dat")
    sys.exit(status)


@main.command("natsim-demo")
@click.option("--policy", type=click.Choice([p.name for p in NatPolicy]),
              default="AddressRestricted", show_default=True,
              help="NAT policy on both sides of the punch")
def natsim_demo_cmd(policy):
    """Print a hole-punch packet trace from the simulated network."""
    from .rendezvous import RendezvousCore
    from .errors import HolePunchFailed

    chosen = NatPolicy[policy]
    sched = Scheduler()
    net = VirtualNetwork(sched, trace=True)
    rdv_env = net.attach(None, "203.0.113.2")
    rdv_listener = rdv_env.listen(7000)
    sched.spawn(
        lambda: serve_loop(rdv_env, rdv_listener, RendezvousCore()), name="rdv", daemon=True
    )
    rdv_addr = PeerAddress("203.0.113.2", 7000)
    outcome = {}

    def worker(rank, peer):
        gw = net.add_gateway(chosen, f"198.51.100.{rank + 1}", mapping_ttl=30.0)
        env = net.attach(gw, f"10.0.{rank}.2")
        try:
            conn = punch_connect(
                env, "demo", rank, 2, peer, rdv_addr,
                policy=RetryPolicy(max_attempts=4, attempt_timeout=0.25),
            )
            outcome[rank] = f"connected to {conn.remote_address}"
        except HolePunchFailed as exc:
            outcome[rank] = f"failed: {exc}"

    sched.spawn(worker, 0, 1, name="w0")
    sched.spawn(worker, 1, 0, name="w1")
    sched.run()

    click.echo(f"punch with {chosen.name} NAT on both sides:")
    for t, line in net.trace:
        click.echo(f"  [{t:9.4f}s] {line}")
    for rank in sorted(outcome):
        click.echo(f"rank {rank}: {outcome[rank]}")


if __name__ == "__main__":
    main()
