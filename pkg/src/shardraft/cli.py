"""Command-line interface.

Cluster-facing verbs (`status`, `split`, `merge`, `member ...`, `kv ...`,
`naming ...`, `history ...`) are thin clients of a running service; local
verbs (`serve`, `sim ...`, `analyze ...`) need no server.
"""

from __future__ import annotations

import json
import sys

import click
import httpx
import yaml

from . import membership
from .simnet import fuzz as fuzz_mod
from .simnet.oracles import check_liveness, check_linearizable_reads, check_safety
from .simnet.scenario import load_scenario
from .simnet.sim import run_scenario
from .simnet.trace import Trace


@click.group()
@click.option("--server", default="http://127.0.0.1:8000", envvar="SHARDRAFT_SERVER",
              show_default=True, help="Service URL for cluster-facing verbs.")
@click.pass_context
def main(ctx, server):
    ctx.ensure_object(dict)
    ctx.obj["server"] = server.rstrip("/")


def _get(ctx, path, **params):
    url = ctx.obj["server"] + path
    resp = httpx.get(url, params=params, timeout=30.0)
    resp.raise_for_status()
    return resp.json()


def _post(ctx, path, payload):
    url = ctx.obj["server"] + path
    resp = httpx.post(url, json=payload, timeout=30.0)
    resp.raise_for_status()
    return resp.json()


def _render(obj) -> None:
    click.echo(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# serve


@main.command()
@click.option("--listen", default="127.0.0.1:8000", show_default=True,
              help="host:port to bind.")
@click.option("--topology", type=click.Path(exists=True), required=False,
              help="YAML file with the initial clusters (and spare nodes).")
@click.option("--cluster-id", default="c0", show_default=True,
              help="Cluster id when bootstrapping without a topology file.")
@click.option("--nodes", default="n1,n2,n3", show_default=True,
              help="Comma-separated node ids when bootstrapping.")
@click.option("--data-dir", type=click.Path(), default=None,
              help="Directory for per-node durable state.")
@click.option("--join", is_flag=True,
              help="Recover nodes from --data-dir instead of bootstrapping.")
@click.option("--seed", default=0, show_default=True)
@click.option("--trace-out", type=click.Path(), default=None,
              help="Dump the service trace on shutdown.")
def serve(listen, topology, cluster_id, nodes, data_dir, join, seed, trace_out):
    """Run the deployment service (all nodes in one process)."""
    import uvicorn

    from .service import ServiceRuntime, create_app

    if topology:
        with open(topology, encoding="utf-8") as fh:
            topo = yaml.safe_load(fh)
    else:
        topo = {"clusters": [{"id": cluster_id,
                              "nodes": [n for n in nodes.split(",") if n],
                              "range": ["", None]}]}
    if join and not data_dir:
        raise click.UsageError("--join needs --data-dir")
    runtime = ServiceRuntime(topo, seed=seed, data_dir=data_dir,
                             rejoin=join, trace_out=trace_out).start()
    app = create_app(runtime)
    host, _, port = listen.partition(":")
    try:
        uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000),
                    log_level="warning")
    finally:
        runtime.stop()


# ---------------------------------------------------------------------------
# Cluster-facing verbs


@main.command()
@click.pass_context
def status(ctx):
    """Show clusters, roles, epochs, and commit indexes."""
    st = _get(ctx, "/v1/status")
    for cluster in st["clusters"]:
        click.echo(f"cluster {cluster['cluster']} epoch={cluster['epoch']} "
                   f"leader={cluster['leader'] or '?'} range={cluster['range']} "
                   f"config={cluster['config_kind']}")
        for nid in cluster["nodes"]:
            n = st["nodes"][nid]
            click.echo(f"  {nid:>6} {n['role']:<9} at={n['epoch']}.{n['term']} "
                       f"commit={n['commit_index']} applied={n['applied_index']} "
                       f"keys={n['keys']}")


@main.command()
@click.option("--cluster", required=True)
@click.option("--into", required=True,
              help="id=members:lo..hi[,id=members:lo..hi...]; members joined "
                   "with '+', '*' = unbounded hi.")
@click.pass_context
def split(ctx, cluster, into):
    """Split a cluster into disjoint subclusters."""
    from .types import KeyRange
    from .split import parse_split_spec

    subs = parse_split_spec(into, KeyRange.single("", None))
    payload = {
        "cluster": cluster,
        "subclusters": [{"id": s.cluster_id, "nodes": list(s.members),
                         "range": [s.key_range.spans[0].lo,
                                   s.key_range.spans[0].hi]}
                        for s in subs],
    }
    _render(_post(ctx, "/v1/admin/split", payload))


@main.command()
@click.option("--clusters", required=True, help="Comma-separated cluster ids.")
@click.option("--coordinator", required=True)
@click.option("--resume-members", default="",
              help="Comma-separated subset resuming as the merged cluster "
                   "(must cover at least one whole subcluster).")
@click.pass_context
def merge(ctx, clusters, coordinator, resume_members):
    """Merge clusters with disjoint ranges into one."""
    payload = {
        "clusters": [c for c in clusters.split(",") if c],
        "coordinator": coordinator,
        "resume_members": [m for m in resume_members.split(",") if m],
    }
    _render(_post(ctx, "/v1/admin/merge", payload))


@main.group()
def member():
    """Single-cluster membership changes."""


@member.command("add")
@click.option("--cluster", required=True)
@click.option("--nodes", required=True, help="Comma-separated node ids.")
@click.pass_context
def member_add(ctx, cluster, nodes):
    payload = {"cluster": cluster, "nodes": [n for n in nodes.split(",") if n]}
    _render(_post(ctx, "/v1/admin/member/add", payload))


@member.command("remove")
@click.option("--cluster", required=True)
@click.option("--nodes", required=True)
@click.pass_context
def member_remove(ctx, cluster, nodes):
    payload = {"cluster": cluster, "nodes": [n for n in nodes.split(",") if n]}
    _render(_post(ctx, "/v1/admin/member/remove", payload))


@member.command("resize-quorum")
@click.option("--cluster", required=True)
@click.pass_context
def member_resize(ctx, cluster):
    _render(_post(ctx, "/v1/admin/member/resize-quorum", {"cluster": cluster}))


@main.group()
def kv():
    """Key-value operations."""


@kv.command("put")
@click.argument("key")
@click.argument("value")
@click.pass_context
def kv_put(ctx, key, value):
    _render(_post(ctx, "/v1/kv/put", {"key": key, "value": value}))


@kv.command("get")
@click.argument("key")
@click.pass_context
def kv_get(ctx, key):
    _render(_get(ctx, "/v1/kv/get", key=key))


@kv.command("del")
@click.argument("key")
@click.pass_context
def kv_del(ctx, key):
    _render(_post(ctx, "/v1/kv/delete", {"key": key}))


@main.group()
def naming():
    """The loose-consistency cluster registry."""


@naming.command("list")
@click.pass_context
def naming_list(ctx):
    _render(_get(ctx, "/v1/naming"))


@naming.command("lookup")
@click.option("--range", "range_", required=True, help="lo:hi (hi empty = unbounded).")
@click.pass_context
def naming_lookup(ctx, range_):
    lo, _, hi = range_.partition(":")
    _render(_get(ctx, "/v1/naming/lookup", lo=lo, hi=hi))


@main.group()
def history():
    """Durable reconfiguration history."""


@history.command("show")
@click.option("--node", required=True)
@click.pass_context
def history_show(ctx, node):
    _render(_get(ctx, f"/v1/history/{node}"))


# ---------------------------------------------------------------------------
# Local verbs


@main.group()
def analyze():
    """Offline analytics."""


@analyze.command("heatmap")
@click.option("--max-n", default=10, show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Write CSV here instead of stdout.")
def analyze_heatmap(max_n, out):
    """Vote-count difference matrices against joint consensus."""
    csv = membership.heatmap_csv(max_n)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(csv)
        click.echo(f"wrote {out}")
    else:
        click.echo(csv)


@main.group()
def sim():
    """Deterministic simulation."""


@sim.command("run")
@click.option("--scenario", "scenario_path", type=click.Path(exists=True),
              required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--trace-out", type=click.Path(), default=None)
@click.option("--check/--no-check", default=True, show_default=True,
              help="Run the safety oracles on the trace.")
def sim_run(scenario_path, seed, trace_out, check):
    """Run one scenario under one seed."""
    scn = load_scenario(scenario_path)
    trace = run_scenario(scn, seed=seed)
    click.echo(f"scenario={scn.name} seed={seed} events={len(trace.events)} "
               f"digest={trace.digest()}")
    if trace_out:
        trace.save(trace_out)
        click.echo(f"trace written to {trace_out}")
    failures = 0
    if check:
        violations = check_safety(trace)
        for v in violations:
            click.echo(f"VIOLATION {v}")
        stuck = check_liveness(trace, scn)
        for s in stuck:
            click.echo(f"STUCK {s}")
        failures = len(violations) + len(stuck)
        if not failures:
            click.echo("checks: ok")
    sys.exit(1 if failures else 0)


@sim.command("fuzz")
@click.option("--seeds", required=True, help="Range a..b (b exclusive).")
@click.option("--mode", type=click.Choice(["safety", "liveness"]),
              default="safety", show_default=True)
def sim_fuzz(seeds, mode):
    """Run randomized fault-injection scenarios over a seed range."""
    a, _, b = seeds.partition("..")
    start, stop = int(a), int(b or int(a) + 1)
    failures = 0

    def progress(res):
        nonlocal failures
        bad = res["violations"] or res["stuck"]
        if bad:
            failures += 1
            click.echo(f"seed {res['seed']}: "
                       f"{res['violations'][:2] or res['stuck'][:2]}")

    results = fuzz_mod.fuzz_range(start, stop, mode=mode, progress=progress)
    total = len(results)
    click.echo(f"{mode} fuzz: {total} seeds, {failures} with findings")
    sys.exit(1 if failures else 0)


@sim.command("check")
@click.option("--trace", "trace_path", type=click.Path(exists=True),
              required=True)
def sim_check(trace_path):
    """Re-run the safety oracles over a saved trace file."""
    trace = Trace.load(trace_path)
    violations = check_safety(trace)
    for v in violations:
        click.echo(f"VIOLATION {v}")
    problems = check_linearizable_reads(trace)
    for p in problems:
        click.echo(f"READ-ANOMALY {p}")
    if not violations and not problems:
        click.echo("checks: ok")
    sys.exit(1 if violations or problems else 0)


@sim.command("probe")
@click.option("--operation", type=click.Choice(["split", "merge"]), required=True)
@click.option("--phase", type=int, required=True)
@click.option("--sub-size", default=3, show_default=True)
@click.option("--ways", default=2, show_default=True)
def sim_probe(operation, phase, sub_size, ways):
    """Find the minimum crash set that stalls a reconfiguration phase."""
    from .simnet.probe import min_failure_probe

    count = min_failure_probe(operation, phase, sub_size=sub_size, ways=ways)
    click.echo(f"{operation} phase {phase}: minimum stopping failures = {count}")


if __name__ == "__main__":
    main()
