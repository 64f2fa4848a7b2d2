"""Command-line front end.

    geodesic-fields [--config FILE] [--seed N] [--out DIR] COMMAND [--section.key VALUE ...]

Commands: ``field rfm``, ``train nes``, ``train nes-ik``, ``geodesic``, ``ik``,
``sample``, ``eval table1``, ``bench``.  Every config key of the sections a
command uses is also accepted as a ``--section.key`` flag.  Failures print one
JSON record to stderr and exit nonzero (2 for configuration errors, 1 otherwise).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import (
    ConfigError,
    RunConfig,
    _file_keys,
    apply_overrides,
    config_from_dict,
    dump_config,
    resolve,
    with_seed,
)
from .io import atomic_write_text, fmt, header_line, write_csv

COMMANDS = {
    ("field", "rfm"): ("arm", "metric", "grid"),
    ("train", "nes"): ("arm", "metric", "train"),
    ("train", "nes-ik"): ("arm", "metric", "train"),
    ("geodesic",): ("arm", "metric", "grid", "geodesic"),
    ("ik",): ("arm", "metric", "ik"),
    ("sample",): ("arm", "metric", "sampler"),
    ("eval", "table1"): ("arm", "metric", "grid", "eval"),
    ("bench",): ("arm", "metric", "bench"),
}
PATH_COLUMNS = ("step", "length")


class CommandError(RuntimeError):
    pass


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# -- helpers ---------------------------------------------------------------------

def _arm(cfg: RunConfig):
    from .robots import PlanarArm

    return PlanarArm(cfg.arm.l1, cfg.arm.l2, cfg.arm.m1, cfg.arm.m2)


def _fields(cfg: RunConfig, kind=None):
    from .robots import metric_fields

    return metric_fields(_arm(cfg), kind or cfg.metric.kind, cfg.metric.energy)


def _grid_spec(cfg: RunConfig):
    from .rfm import GridSpec

    low, high = _arm(cfg).box
    return GridSpec.box(low, high, (cfg.grid.nx, cfg.grid.ny))


def _out(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out) / name


def _model_meta(cfg: RunConfig, command: str) -> dict:
    return {
        "header": header_line(command, cfg.seed),
        "metric": cfg.metric.kind,
        "energy": cfg.metric.energy,
        "arm": asdict(cfg.arm),
        "train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg.train).items()},
    }


def _load_model(cfg: RunConfig, ref: str, key: str, kind: str):
    from .nes import Mlp

    path = resolve(ref, Path("."))
    payload = json.loads(path.read_text())
    net = Mlp.from_dict(payload)
    if net.kind != kind:
        raise ConfigError(key, f"checkpoint holds a {net.kind!r} model, expected {kind!r}")
    meta = payload.get("meta", {})
    return net, meta


def _check_metric(cfg: RunConfig, meta: dict, key: str, metric: str = None):
    metric = metric or cfg.metric.kind
    if meta.get("metric") not in (None, metric):
        raise ConfigError(key, f"checkpoint was trained on the {meta['metric']!r} metric, not {metric!r}")


def _write_path(path_file, command, cfg, path, values, extra=()):
    d = path.points.shape[1]
    cols = (*PATH_COLUMNS, *[f"q{i + 1}" for i in range(d)], "U")
    cum = path.cumulative
    rows = [(i, cum[i], *path.points[i], values[i]) for i in range(len(path.points))]
    summary = [f"status={path.status} total_length={fmt(path.total_length)}", *extra]
    return write_csv(path_file, cols, rows, command, cfg.seed, summary)


# -- commands --------------------------------------------------------------------

def cmd_field_rfm(cfg: RunConfig, command: str):
    from .rfm import solve_rfm

    path_field, _ = _fields(cfg)
    spec = _grid_spec(cfg)
    src = spec.nearest(cfg.grid.source)
    t0 = time.perf_counter()
    grid = solve_rfm(path_field, spec, src, scheme=cfg.grid.scheme, stencil=cfg.grid.stencil)
    elapsed = time.perf_counter() - t0
    # one CSV row per lattice row i (q1 index); column j follows q2
    cols = [f"u{j}" for j in range(spec.ny)]
    csv_path = write_csv(_out(cfg, "rfm_grid.csv"), cols, grid.values, command, cfg.seed)
    meta = {
        "origin": [float(v) for v in spec.origin],
        "spacing": [float(v) for v in spec.spacing],
        "nx": spec.nx,
        "ny": spec.ny,
        "source_index": [int(v) for v in src],
        "source_point": [float(v) for v in spec.point(src)],
        "metric": cfg.metric.kind,
        "energy": cfg.metric.energy,
        "scheme": cfg.grid.scheme,
        "stencil": cfg.grid.stencil,
    }
    text = header_line(command, cfg.seed) + "\n" + yaml.safe_dump(meta, sort_keys=False)
    atomic_write_text(_out(cfg, "rfm_grid.yaml"), text)
    print(f"solved {spec.nx}x{spec.ny} grid in {elapsed:.3f} s -> {csv_path}")


def _write_history(path, history, command, seed):
    cols = ("epoch", "eikonal", "divergence", "total", "validation")
    rows = [(r.epoch, r.eikonal, r.divergence, r.total, math.nan if r.validation is None else r.validation) for r in history]
    return write_csv(path, cols, rows, command, seed)


def cmd_train_nes(cfg: RunConfig, command: str):
    from .nes import Mlp, train

    arm = _arm(cfg)
    _, eik = _fields(cfg)
    low, high = arm.box
    net = Mlp.init([2 * len(low), *cfg.train.hidden, 1], cfg.seed)
    t0 = time.perf_counter()
    net, history = train(net, eik, cfg.train, low, high)
    elapsed = time.perf_counter() - t0
    ckpt = _out(cfg, "nes.json")
    net.save(ckpt, _model_meta(cfg, command))
    _write_history(_out(cfg, "nes_loss.csv"), history, command, cfg.seed)
    last = history[-1].total if history else float("nan")
    print(f"trained {cfg.train.epochs} epochs in {elapsed:.1f} s, final loss {last:.6g} -> {ckpt}")


def cmd_train_nes_ik(cfg: RunConfig, command: str):
    from .nesik import init_ik, train_ik

    arm = _arm(cfg)
    _, eik = _fields(cfg)
    net = init_ik(cfg.train.hidden, cfg.seed)
    t0 = time.perf_counter()
    net, history = train_ik(net, arm, eik, cfg.train)
    elapsed = time.perf_counter() - t0
    ckpt = _out(cfg, "nes_ik.json")
    net.save(ckpt, _model_meta(cfg, command))
    _write_history(_out(cfg, "nes_ik_loss.csv"), history, command, cfg.seed)
    last = history[-1].total if history else float("nan")
    print(f"trained {cfg.train.epochs} epochs in {elapsed:.1f} s, final loss {last:.6g} -> {ckpt}")


def cmd_geodesic(cfg: RunConfig, command: str):
    from .policy import euclidean_path
    from .rfm import BacktrackError, backtrack_grid, solve_rfm

    g = cfg.geodesic
    q_s, q_e = np.asarray(g.source, float), np.asarray(g.goal, float)
    if q_s.shape != (2,) or q_e.shape != (2,):
        raise ConfigError("geodesic.source", "source and goal need two coordinates")
    low, high = _arm(cfg).box
    for key, q in (("geodesic.source", q_s), ("geodesic.goal", q_e)):
        if np.any(q < low) or np.any(q > high):
            raise ConfigError(key, f"{q.tolist()} lies outside the joint box")
    path_field, eik = _fields(cfg)
    failure = None
    if np.array_equal(q_s, q_e):
        # U(q, q) = 0 for every method; a lattice source would otherwise add a snapping step
        path = _single(q_s)
        values = np.full(1, np.nan if g.method == "euclidean" else 0.0)
    elif g.method == "nes":
        from .nes import backtrack_neural, distance_batch

        if g.checkpoint is None:
            raise ConfigError("geodesic.checkpoint", "required for method nes")
        net, meta = _load_model(cfg, g.checkpoint, "geodesic.checkpoint", "cspace")
        _check_metric(cfg, meta, "geodesic.checkpoint")
        try:
            path = backtrack_neural(net, eik, q_s, q_e, g.step, g.tol, low, high)
        except BacktrackError as exc:
            path, failure = exc.path, exc
        values = distance_batch(net, np.broadcast_to(q_s, path.points.shape), path.points)
    elif g.method == "rfm":
        spec = _grid_spec(cfg)
        grid = solve_rfm(path_field, spec, spec.nearest(q_s), scheme=cfg.grid.scheme, stencil=cfg.grid.stencil)
        try:
            path = backtrack_grid(grid, eik, q_e, g.step, g.tol)
        except BacktrackError as exc:
            path, failure = exc.path, exc
        values = np.array([grid.value_at(p) for p in path.points])
    else:
        n = max(2, int(math.ceil(np.linalg.norm(q_e - q_s) / g.step)) + 1)
        path = euclidean_path(q_e, q_s, n, path_field)
        values = np.full(len(path.points), np.nan)
    out = _write_path(_out(cfg, "geodesic.csv"), command, cfg, path, values, [f"method={g.method}"])
    print(f"{g.method} path: {len(path.points)} points, length {path.total_length:.6g}, status {path.status} -> {out}")
    if failure is not None:
        raise CommandError(str(failure))


def _single(q):
    from .manifold import GeodesicPath

    return GeodesicPath(np.asarray(q, float)[None], np.zeros(0), 0.0, "ok")


def cmd_ik(cfg: RunConfig, command: str):
    from .nesik import IkProblem, backtrack_ik, gauss_newton_ik, ik_distance_batch
    from .robots import forward_kinematics
    from .rfm import BacktrackError

    c = cfg.ik
    arm = _arm(cfg)
    path_field, eik = _fields(cfg)
    try:
        prob = IkProblem(arm, tuple(c.target), eik)
    except ValueError as exc:
        raise ConfigError("ik.target", str(exc)) from None
    q0 = np.asarray(c.start, float)
    net = None
    if c.checkpoint is not None:
        net, meta = _load_model(cfg, c.checkpoint, "ik.checkpoint", "ik")
        _check_metric(cfg, meta, "ik.checkpoint")

    def values(pts):
        if net is None:
            return np.full(len(pts), np.nan)
        return ik_distance_batch(net, arm, np.broadcast_to(prob.x, pts.shape), pts)

    def task_error(pts):
        return float(np.linalg.norm(forward_kinematics(arm, pts[-1]) - prob.x))

    gn = gauss_newton_ik(arm, prob.x, q0, c.step_scale, c.max_iters, path_field=path_field)
    _write_path(_out(cfg, "ik_gauss_newton.csv"), command, cfg, gn, values(gn.points),
                [f"method=gauss-newton task_error={fmt(task_error(gn.points))}"])
    print(f"gauss-newton: length {gn.total_length:.6g}, status {gn.status}")
    if net is None:
        print("no ik.checkpoint given; skipped the neural path")
        return
    failure = None
    try:
        path = backtrack_ik(net, prob, q0, c.step, c.tol)
    except BacktrackError as exc:
        path, failure = exc.path, exc
    _write_path(_out(cfg, "ik_nes.csv"), command, cfg, path, values(path.points),
                [f"method=nes-ik task_error={fmt(task_error(path.points))}"])
    print(f"nes-ik: length {path.total_length:.6g}, status {path.status}")
    if failure is not None:
        raise CommandError(str(failure))


def cmd_sample(cfg: RunConfig, command: str):
    from .sampler import export_samples, run_rmmala, volume_density

    path_field, _ = _fields(cfg)
    result = run_rmmala(path_field, volume_density(path_field), cfg.sampler)
    out = export_samples(_out(cfg, "samples.csv"), result, command)
    print(f"{len(result.samples)} samples, acceptance rate {result.acceptance_rate:.3f} -> {out}")


def cmd_eval_table1(cfg: RunConfig, command: str):
    from .policy import euclidean_method, evaluate_table, make_buckets, nes_method, rfm_method, write_table

    e = cfg.eval
    low, high = _arm(cfg).box
    metrics = {m: _fields(cfg, m) for m in e.metrics}
    methods = {}
    for name in e.methods:
        if name == "euclidean":
            methods[name] = euclidean_method()
        elif name == "rfm":
            methods[name] = rfm_method(_grid_spec(cfg), scheme=cfg.grid.scheme, stencil=cfg.grid.stencil)
        else:
            per_metric = {}
            for m in e.metrics:
                key = f"eval.{m}_checkpoint"
                ref = getattr(e, f"{m}_checkpoint", None)
                if ref is None:
                    raise ConfigError(key, "required for method nes")
                net, meta = _load_model(cfg, ref, key, "cspace")
                _check_metric(cfg, meta, key, m)
                per_metric[m] = nes_method(net)
            methods[name] = per_metric
    buckets = make_buckets(cfg.seed, e.pairs, low, high)
    rows = evaluate_table(methods, metrics, buckets, cfg.seed)
    out = write_table(_out(cfg, "table1.csv"), rows, command, cfg.seed)
    for r in rows:
        print(f"{r.method:10s} {r.metric:8s} {r.bucket:4s} {r.mean:8.3f} +- {r.std:6.3f}  (n={r.count}, failed={r.failed})")
    print(f"-> {out}")


def bench_latency(net, field, batches, repeats: int = 20, seed: int = 0):
    """Median wall time of one batched distance+gradient call per batch size."""
    import jax.numpy as jnp

    from .nes import kernels_for

    k = kernels_for(net, field)
    rng = np.random.default_rng(seed)
    params = net.params
    out = []
    for b in batches:
        S = jnp.asarray(rng.uniform(-np.pi, np.pi, (b, 2)))
        Q = jnp.asarray(rng.uniform(-np.pi, np.pi, (b, 2)))
        u, g = k.batch_value_and_grad(params, S, Q)  # compile
        g.block_until_ready()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            u, g = k.batch_value_and_grad(params, S, Q)
            g.block_until_ready()
            times.append(time.perf_counter() - t0)
        out.append((b, float(np.median(times))))
    return out


def cmd_bench(cfg: RunConfig, command: str):
    c = cfg.bench
    if c.checkpoint is None:
        raise ConfigError("bench.checkpoint", "required")
    net, meta = _load_model(cfg, c.checkpoint, "bench.checkpoint", "cspace")
    _, eik = _fields(cfg, meta.get("metric", cfg.metric.kind))
    rows = []
    for b, t in bench_latency(net, eik, c.batches, c.repeats, cfg.seed):
        rows.append((b, t * 1e3, t * 1e3 / b))
        print(f"batch {b:>7d}: {t * 1e3:10.4f} ms per call, {t * 1e3 / b:.6f} ms per query")
    write_csv(_out(cfg, "bench.csv"), ("batch", "ms_per_call", "ms_per_query"), rows, command, cfg.seed)


HANDLERS = {
    ("field", "rfm"): cmd_field_rfm,
    ("train", "nes"): cmd_train_nes,
    ("train", "nes-ik"): cmd_train_nes_ik,
    ("geodesic",): cmd_geodesic,
    ("ik",): cmd_ik,
    ("sample",): cmd_sample,
    ("eval", "table1"): cmd_eval_table1,
    ("bench",): cmd_bench,
}


# -- argument parsing --------------------------------------------------------------

def _common(parser, sub=False):
    # subcommand copies must not reset values given before the command word
    d = argparse.SUPPRESS if sub else None
    parser.add_argument("--config", default=d, help="YAML config file")
    parser.add_argument("--seed", type=int, default=d, help="seed (unsigned 64-bit)")
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--print-config", action="store_true", default=d if sub else False,
                        help="print the resolved config and exit")


def _section_flags(parser, sections):
    group = parser.add_argument_group("config overrides")
    for sec in sections:
        for key in _file_keys(sec):
            group.add_argument(f"--{sec}.{key}", dest=f"set:{sec}.{key}", metavar="VALUE", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geodesic-fields", description="Geodesic distance fields on robot configuration manifolds")
    parser.add_argument("--version", action="version", version=__version__)
    _common(parser)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    groups = {}
    for words, sections in COMMANDS.items():
        if len(words) == 1:
            p = sub.add_parser(words[0])
        else:
            if words[0] not in groups:
                gp = sub.add_parser(words[0])
                groups[words[0]] = gp.add_subparsers(dest="action", required=True, parser_class=_Parser)
            p = groups[words[0]].add_parser(words[1])
        _common(p, sub=True)
        _section_flags(p, sections)
        p.set_defaults(words=words)
    return parser


def _merge_common(args):
    # flags may appear before or after the command word; the later one wins
    return {k: getattr(args, k, None) for k in ("config", "seed", "out")}


def _load_raw(path):
    if path is None:
        return {}, Path(".")
    p = Path(path)
    if not p.exists():
        raise ConfigError("", f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("", f"malformed YAML: {exc}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("", "top level must be a mapping")
    return raw or {}, p.parent


def resolve_config(args) -> RunConfig:
    common = _merge_common(args)
    raw, base = _load_raw(common["config"])
    sets = [f"{k[4:]}={v}" for k, v in vars(args).items() if k.startswith("set:") and v is not None]
    raw = apply_overrides(raw, sets)
    if common["out"] is not None:
        raw["out"] = common["out"]
    cfg = config_from_dict(raw, base)
    if common["seed"] is not None:
        if not 0 <= common["seed"] < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        cfg = with_seed(cfg, common["seed"])
    return cfg


def _error_record(kind: str, message: str, command: str = "", key: str = "") -> str:
    rec = {"status": "error", "type": kind, "command": command, "message": " ".join(str(message).split())}
    if key:
        rec["key"] = key
    return json.dumps(rec)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    command = ""
    try:
        args = build_parser().parse_args(argv)
        command = " ".join(args.words)
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return 0
        HANDLERS[args.words](cfg, command)
        return 0
    except _UsageError as exc:
        print(_error_record("UsageError", str(exc), command), file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(_error_record("ConfigError", str(exc), command, exc.key), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  (every failure becomes one record)
        print(_error_record(type(exc).__name__, str(exc), command), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
