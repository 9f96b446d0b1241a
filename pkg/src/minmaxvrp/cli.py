"""Command-line surface: dataset generation, training, solving, evaluation,
TSPLIB parsing, and plot-data export.

Every command exits 0 on success and nonzero with a one-line diagnostic on
stderr otherwise. Output files are written atomically. MINMAXVRP_THREADS
sets the worker-thread count for solving (default 1).
"""

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import encoder as en
from . import oracle as oc
from . import problems as pb
from . import rollout as ro
from . import training as tr

THREADS_ENV = "MINMAXVRP_THREADS"


def _thread_count():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def normalized_for_model(instance):
    """Shift/scale all coordinates into the unit square, aspect preserved.

    Returns the instance unchanged when it already fits. A single scale
    factor is used on both axes, so route rankings transfer back to the
    native-unit instance unchanged.
    """
    pts = np.concatenate([instance.coords, instance.depot_coords])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    if (lo >= 0.0).all() and (hi <= 1.0).all():
        return instance
    span = float((hi - lo).max())
    if span <= 0.0:
        span = 1.0
    return pb.Instance(kind=instance.kind,
                       coords=(instance.coords - lo) / span,
                       depot_coords=(instance.depot_coords - lo) / span,
                       M=instance.M, uid=instance.uid)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    if args.count < 0:
        raise ValueError("--count must be >= 0")
    if args.m_max is None:
        args.m_max = args.m_min
    if not 2 <= args.m_min <= args.m_max:
        raise ValueError(f"need 2 <= m-min <= m-max, "
                         f"got [{args.m_min}, {args.m_max}]")
    rng = np.random.default_rng(args.seed)
    instances = []
    for _ in range(args.count):
        m = int(rng.integers(args.m_min, args.m_max + 1))
        instances.append(pb.gen_uniform(args.kind, N=args.n, D=args.d, M=m,
                                        seed=int(rng.integers(2 ** 63))))
    pb.write_instances(args.out, instances)
    print(f"wrote {len(instances)} {args.kind} instances to {args.out}")
    return 0


def _load_train_config(args, stored_model=None):
    with open(args.config) as f:
        rec = json.load(f)
    if not isinstance(rec, dict):
        raise ValueError(f"{args.config} does not hold a config object")
    if stored_model is not None and "model" not in rec:
        rec["model"] = stored_model.to_dict()
    tc = tr.TrainConfig.from_dict(rec)
    overrides = {}
    if getattr(args, "pe", None):
        overrides["pe"] = args.pe
    if getattr(args, "no_navigation_part", False):
        overrides["use_nav"] = False
    if overrides:
        tc = replace(tc, model=replace(tc.model, **overrides))
    return tc


def _run_training_loop(tc, args, start_fn):
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt_path = os.path.join(args.out_dir, "checkpoint.ckpt")
    metrics_path = os.path.join(args.out_dir, "metrics.jsonl")
    rows = []

    def on_epoch(epoch, row, params, opt):
        rows.append(row)
        tr.save_checkpoint(ckpt_path, tc.model, params, opt)
        pb.atomic_write_text(metrics_path, tr.metrics_to_text(rows))
        print(tr.metrics_to_text([row]), end="")

    params, opt, metrics = start_fn(on_epoch)
    tr.save_checkpoint(ckpt_path, tc.model, params, opt)
    pb.atomic_write_text(metrics_path, tr.metrics_to_text(metrics))
    print(f"finished {len(metrics)} epochs; checkpoint at {ckpt_path}")
    return 0


def cmd_train(args):
    if args.resume:
        cfg, params, opt = tr.load_checkpoint(args.resume)
        tc = _load_train_config(args, stored_model=cfg)
        if tc.model.to_dict() != cfg.to_dict():
            diffs = ", ".join(
                f"{k}={cfg.to_dict()[k]} vs {tc.model.to_dict()[k]}"
                for k in sorted(cfg.to_dict())
                if cfg.to_dict()[k] != tc.model.to_dict()[k])
            raise ValueError(f"checkpoint does not match the config: {diffs}")
        return _run_training_loop(
            tc, args,
            lambda cb: tr.train(tc, params=params, opt=opt, on_epoch=cb))
    tc = _load_train_config(args)
    return _run_training_loop(tc, args, lambda cb: tr.train(tc, on_epoch=cb))


def cmd_finetune(args):
    cfg, _params, _opt = tr.load_checkpoint(args.checkpoint)
    tc = _load_train_config(args, stored_model=cfg)
    return _run_training_loop(
        tc, args, lambda cb: tr.finetune(args.checkpoint, tc, on_epoch=cb))


def _solve_one(job):
    ins, cfg, params, args = job
    res = ro.infer(normalized_for_model(ins), cfg, params, n_per=args.per,
                   use_aug8=args.aug8, seed=args.seed)
    err = pb.validate(res.solution, ins)
    if err is not None:
        raise RuntimeError(f"solver produced an infeasible solution: {err}")
    obj = pb.minmax_objective(res.solution, ins)
    return pb.solution_to_record(res.solution, obj, res.permutation,
                                 res.aug_index)


def cmd_solve(args):
    cfg, params, _opt = tr.load_checkpoint(args.checkpoint)
    instances = pb.read_instances(args.dataset)
    if not instances:
        raise ValueError(f"{args.dataset} holds no instances")
    for ins in instances:
        if ins.kind != cfg.kind:
            raise ValueError(f"dataset kind {ins.kind} does not match "
                             f"checkpoint kind {cfg.kind}")
    start = time.perf_counter()
    jobs = [(ins, cfg, params, args) for ins in instances]
    threads = _thread_count()
    if threads == 1:
        records = [_solve_one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_solve_one, jobs))
    wall = time.perf_counter() - start
    pb.atomic_write_text(args.out, "".join(json.dumps(r) + "\n"
                                           for r in records))
    mean_obj = float(np.mean([r["objective"] for r in records]))
    print(f"solved {len(records)} instances: mean objective {mean_obj:.4f}, "
          f"wallclock {wall:.1f}s")
    return 0


def _read_solutions(path):
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(pb.solution_from_record(json.loads(line)))
    return out


def cmd_eval(args):
    solutions = _read_solutions(args.solutions)
    instances = pb.read_instances(args.dataset)
    if len(solutions) != len(instances):
        raise ValueError(f"{len(solutions)} solutions vs "
                         f"{len(instances)} instances")
    if args.ref == "oracle":
        refs = [oc.brute_force(ins).objective for ins in instances]
    else:
        ref_solutions = _read_solutions(args.ref)
        if len(ref_solutions) != len(instances):
            raise ValueError(f"{len(ref_solutions)} reference solutions vs "
                             f"{len(instances)} instances")
        refs = []
        for (sol, _obj, _perm, _aug), ins in zip(ref_solutions, instances):
            err = pb.validate(sol, ins)
            if err is not None:
                raise ValueError(f"reference solution infeasible: {err}")
            refs.append(pb.minmax_objective(sol, ins))
    objs = []
    gaps = []
    for i, ((sol, stored_obj, _perm, _aug), ins, ref) in enumerate(
            zip(solutions, instances, refs)):
        err = pb.validate(sol, ins)
        if err is not None:
            raise ValueError(f"solution {i} infeasible: {err}")
        obj = pb.minmax_objective(sol, ins)
        if abs(obj - stored_obj) > 1e-6 * max(1.0, abs(obj)):
            raise ValueError(f"solution {i} objective {stored_obj} does not "
                             f"match its routes ({obj:.6f}); wrong dataset?")
        g = oc.gap(obj, ref)
        objs.append(obj)
        gaps.append(g)
        print(f"{i}\t{obj:.4f}\t{ref:.4f}\t{g:.4f}%")
    print(f"mean objective {np.mean(objs):.4f}, mean gap {np.mean(gaps):.4f}%")
    return 0


def parse_tsplib(path, m):
    """Read a TSPLIB node-coordinate file as an MTSP instance.

    Only EUC_2D is supported. The first listed node is the depot;
    coordinates stay in native units.
    """
    headers = {}
    coords = []
    in_section = False
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line == "EOF":
                continue
            if in_section:
                parts = line.split()
                if parts and parts[0].lstrip("+-").isdigit():
                    ok = len(parts) == 3
                    if ok:
                        try:
                            coords.append((float(parts[1]), float(parts[2])))
                        except ValueError:
                            ok = False
                    if not ok:
                        raise ValueError(
                            f"malformed node line {line!r} in {path}")
                    continue
                in_section = False  # a non-index line ends the section
            if line == "NODE_COORD_SECTION":
                in_section = True
            elif ":" in line:
                key, _, value = line.partition(":")
                headers[key.strip()] = value.strip()
    ew = headers.get("EDGE_WEIGHT_TYPE")
    if ew != "EUC_2D":
        raise ValueError(f"unsupported edge weight type {ew!r} in {path}: "
                         f"only EUC_2D is handled")
    if not coords:
        raise ValueError(f"no NODE_COORD_SECTION in {path}")
    if "DIMENSION" in headers and int(headers["DIMENSION"]) != len(coords):
        raise ValueError(f"{path} lists {len(coords)} nodes but declares "
                         f"DIMENSION {headers['DIMENSION']}")
    arr = np.array(coords)
    return pb.Instance(kind="MTSP", coords=arr[1:], depot_coords=arr[:1], M=m)


def cmd_parse_tsplib(args):
    ins = parse_tsplib(args.infile, args.m)
    pb.write_instances(args.out, [ins])
    print(f"parsed {ins.N + 1} nodes (1 depot, {ins.N} customers), "
          f"M={ins.M} -> {args.out}")
    return 0


def _series_labels(paths):
    """Basename stems, falling back to full paths when stems collide
    (every run directory tends to hold a metrics.jsonl)."""
    stems = [os.path.splitext(os.path.basename(p))[0] for p in paths]
    if len(set(stems)) == len(stems):
        return stems
    return [os.path.splitext(p)[0] for p in paths]


def cmd_plot_data(args):
    lines = []
    labels = _series_labels(args.metrics)
    for path, label in zip(args.metrics, labels):
        with open(path) as f:
            rows = tr.metrics_from_text(f.read())
        if not rows:
            raise ValueError(f"{path} holds no metrics rows")
        for row in rows:
            lines.append(f"{label}\t{row['epoch']}\t{row['mean_obj']}\n")
    pb.atomic_write_text(args.out, "".join(lines))
    print(f"wrote {len(lines)} points from {len(args.metrics)} runs "
          f"to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument surface
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="minmaxvrp",
        description="Train and run the min-max routing solver.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a dataset of random instances")
    g.add_argument("--kind", required=True, choices=pb.KINDS)
    g.add_argument("--n", type=int, required=True,
                   help="customers per instance")
    g.add_argument("--d", type=int, default=1, help="depots per instance")
    g.add_argument("--m-min", type=int, default=2)
    g.add_argument("--m-max", type=int, default=None,
                   help="defaults to --m-min")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    t.add_argument("--pe", choices=en.PE_KINDS, default=None,
                   help="override the positional-encoding family")
    t.add_argument("--no-navigation-part", action="store_true",
                   help="drop the within-route self-attention blocks")
    t.set_defaults(func=cmd_train)

    ft = sub.add_parser("finetune",
                        help="continue from a checkpoint at a new lr")
    ft.add_argument("--checkpoint", required=True)
    ft.add_argument("--config", required=True)
    ft.add_argument("--out-dir", required=True)
    ft.set_defaults(func=cmd_finetune)

    s = sub.add_parser("solve", help="solve a dataset with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--per", type=int, default=1,
                   help="agent permutations per instance")
    s.add_argument("--aug8", action="store_true",
                   help="also search the 8 square symmetries")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="gap of a solutions file vs a reference")
    e.add_argument("--solutions", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--ref", default="oracle",
                   help='"oracle" for exact brute force, or a solutions file')
    e.set_defaults(func=cmd_eval)

    pt = sub.add_parser("parse-tsplib",
                        help="convert a TSPLIB file to a one-instance dataset")
    pt.add_argument("--in", dest="infile", required=True)
    pt.add_argument("--m", type=int, required=True, help="number of routes")
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_parse_tsplib)

    pd = sub.add_parser("plot-data",
                        help="export (epoch, objective) series from metrics")
    pd.add_argument("--metrics", nargs="+", required=True)
    pd.add_argument("--out", required=True)
    pd.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
