"""Command-line entry point: ``treedock gen|train|assemble|eval|oracle|gradcheck``.

Tables go to stdout as CSV; diagnostics go to stderr. Exit codes are 0 on
success, 1 on runtime failure and 2 on usage errors.
"""

import argparse
import csv
import json
import os
import shutil
import sys
import time
from collections import Counter
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import data, geom, search, trainer
from .errors import DomainError, MissingDimer, SchemaError, TreedockError

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    # PPO and reward settings (mirrors trainer.PpoConfig)
    clip_eps: float = 0.2
    gamma: float = 1.0
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    batch_size: int = 100
    lr_policy: float = 3e-4
    lr_value: float = 6e-4
    lr_disc: float = 3e-4
    ppo_epochs: int = 4
    disc_steps: int = 5
    beta: float = 10.0
    value_coef: float = 0.5
    normalize_advantages: bool = False
    per_step_adversarial: bool = False
    pair_features: bool = False
    shaped_reward: bool = False
    clash_weight: float = 0.0
    workers: int = 1
    # run plumbing
    data: str = ""
    eval_data: str = ""
    seed: int = 0
    episodes: int = 100
    eval_every: int = 0
    checkpoint_every: int = 1
    sigma: float = 0.0
    chains_min: int = 3
    chains_max: int = 6

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise UsageError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**obj)

    def ppo(self):
        names = {f.name for f in fields(trainer.PpoConfig)}
        return trainer.PpoConfig(**{k: v for k, v in asdict(self).items() if k in names})


def _err(msg):
    print(msg, file=sys.stderr)


def _parse_range(text):
    """``"MIN..MAX"`` (or a single integer) to an inclusive int pair."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
        else:
            lo = hi = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN..MAX, got {text!r}") from None
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return lo, hi


def _write_csv(header, rows, out=None):
    w = csv.writer(out or sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def _num(x):
    return repr(float(x))


def _aggregate_rows(label_cols, values_by_col):
    """``mean`` and ``median`` rows for numeric columns."""
    rows = []
    for name, fn in (("mean", np.mean), ("median", np.median)):
        rows.append([name] + [""] * (label_cols - 1)
                    + [_num(fn(v)) if len(v) else "" for v in values_by_col])
    return rows


# -- gen -------------------------------------------------------------------------

def cmd_gen(args):
    lo, hi = args.chains
    if lo < data.MIN_CHAINS or hi > data.MAX_CHAINS:
        raise UsageError(f"--chains must lie within {data.MIN_CHAINS}..{data.MAX_CHAINS}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    sizes = Counter()
    for k in range(args.count):
        n = int(rng.integers(lo, hi + 1))
        cseed = int(rng.integers(2 ** 31))
        cid = f"complex_{k:05d}"
        record, dimers = data.generate_complex(cseed, n, tuple(args.residues), args.sigma,
                                               args.tree_family, cid)
        data.write_dataset(os.path.join(args.out, f"{cid}.jsonl"), [(record, dimers)])
        sizes[n] += 1
    _write_csv(("n_chains", "count"), sorted(sizes.items()))
    return EXIT_OK


# -- train -----------------------------------------------------------------------

def _load_config(args):
    obj = {}
    if args.config:
        try:
            with open(args.config) as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    run = RunConfig.from_dict(obj)
    for name in ("data", "eval_data", "seed", "episodes", "beta", "eval_every", "workers"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(run, name, value)
    if not run.data:
        raise UsageError("a dataset is required (--data or config 'data')")
    return run


def cmd_train(args):
    run = _load_config(args)
    try:
        cfg = run.ppo()
    except (DomainError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from None
    pairs = data.read_dataset(run.data)
    dataset = trainer.Dataset.build(pairs, cfg.pair_features)
    eval_set = None
    if run.eval_data:
        eval_set = trainer.Dataset.build(data.read_dataset(run.eval_data), cfg.pair_features)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(asdict(run), fh, indent=2, sort_keys=True)

    eval_path = os.path.join(args.out, "eval.csv")
    if eval_set is not None and run.eval_every > 0 and not args.resume:
        with open(eval_path, "w") as fh:
            fh.write("episode,mean_rmsd,median_rmsd\n")

    def callback(state, row):
        if args.verbose:
            _err(f"episode {row['episode']}: mean_rmsd {row['mean_rmsd']:.3f} "
                 f"reward {row['mean_reward']:.3f}")
        if eval_set is not None and run.eval_every > 0 and state.episode % run.eval_every == 0:
            r = trainer.evaluate(state.policy, eval_set)
            with open(eval_path, "a") as fh:
                fh.write(f"{state.episode},{_num(r.mean())},{_num(np.median(r))}\n")
        return False

    start = time.perf_counter()
    state = trainer.train(dataset, cfg, run.seed, run.episodes, out=args.out,
                          resume=args.resume, callback=callback,
                          checkpoint_every=max(1, run.checkpoint_every))
    elapsed = time.perf_counter() - start
    ckpt = os.path.join(args.out, "checkpoint.json")
    if os.path.exists(ckpt):
        shutil.copyfile(ckpt, os.path.join(args.out, "final.json"))
    last = state.metrics[-1] if state.metrics else {}
    _write_csv(("episodes", "mean_rmsd", "mean_reward", "seconds"),
               [[state.episode, _num(last.get("mean_rmsd", float("nan"))),
                 _num(last.get("mean_reward", float("nan"))), f"{elapsed:.3f}"]])
    return EXIT_OK


# -- assemble --------------------------------------------------------------------

def cmd_assemble(args):
    net, _, _, _ = trainer.load_checkpoint(args.checkpoint)
    pairs = data.read_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    rows = []
    out_lines = []
    for record, dimers in pairs:
        if dimers is None:
            raise UsageError(f"{record.complex_id}: dataset has no dimers")
        try:
            dimers.require_complete(record.n)
        except MissingDimer:
            _err(f"{record.complex_id}: incomplete dimer library")
            raise
        start = time.perf_counter()
        result = trainer.assemble(net, record, dimers, greedy=not args.sample, rng=rng)
        wall = time.perf_counter() - start
        pred = np.concatenate(result.coords)
        truth = record.truth_coords()
        rmsd = geom.rmsd_aligned(pred, truth)
        tm = geom.tm_score(pred, truth)
        rows.append([record.complex_id, record.n, _num(rmsd), _num(tm), f"{wall:.6f}"])
        obj = data.record_to_dict(record)
        obj["predicted_tree"] = [list(e) for e in result.tree]
        obj["predicted_coords"] = [[[float(x) for x in p] for p in c] for c in result.coords]
        out_lines.append(json.dumps(obj, separators=(",", ":")))
    if args.out:
        tmp = args.out + ".tmp"
        with open(tmp, "w") as fh:
            fh.write("".join(line + "\n" for line in out_lines))
        os.replace(tmp, args.out)
    _write_csv(("complex_id", "n_chains", "rmsd", "tm_score", "wall_seconds"), rows)
    return EXIT_OK


# -- eval ------------------------------------------------------------------------

def _predicted(obj):
    """Per-chain predicted coordinates: ``predicted_coords`` if present, else the chain coords."""
    if "predicted_coords" in obj:
        return [np.asarray(c, dtype=float) for c in obj["predicted_coords"]]
    record, _ = data.record_from_dict(obj, require_dimers=False)
    return [c.true_coords for c in record.chains]


def cmd_eval(args):
    truth = {}
    for _, _, obj in data.iter_json_lines(args.truth):
        record, _ = data.record_from_dict(obj, require_dimers=False)
        truth[record.complex_id] = record
    rows, rmsds, tms = [], [], []
    for f, lineno, obj in data.iter_json_lines(args.pred):
        cid = str(obj.get("complex_id"))
        if cid not in truth:
            raise SchemaError(f"{f}:{lineno}: complex_id {cid!r} not in truth set")
        record = truth[cid]
        pred = _predicted(obj)
        if [len(c) for c in pred] != [len(c) for c in record.chains]:
            raise SchemaError(f"{f}:{lineno}: residue counts differ from truth")
        p, t = np.concatenate(pred), record.truth_coords()
        r, tm = geom.rmsd_aligned(p, t), geom.tm_score(p, t)
        rmsds.append(r)
        tms.append(tm)
        rows.append([cid, record.n, _num(r), _num(tm)])
    rows += _aggregate_rows(2, [rmsds, tms])
    _write_csv(("complex_id", "n_chains", "rmsd", "tm_score"), rows)
    return EXIT_OK


# -- oracle ----------------------------------------------------------------------

def cmd_oracle(args):
    rows, best, truth_r = [], [], []
    for record, dimers in data.read_dataset(args.data):
        start = time.perf_counter()
        tree, rmsd = search.oracle_best_tree(record, dimers, workers=args.workers)
        wall = time.perf_counter() - start
        tr = search.tree_rmsd(record, dimers, record.tree)
        best.append(rmsd)
        truth_r.append(tr)
        edges = " ".join(f"{a}-{b}" for a, b in tree.edges)
        rows.append([record.complex_id, record.n, _num(rmsd), _num(tr), edges, f"{wall:.6f}"])
    agg = _aggregate_rows(2, [best, truth_r])
    rows += [r + ["", ""] for r in agg]
    _write_csv(("complex_id", "n_chains", "oracle_rmsd", "truth_tree_rmsd", "oracle_tree",
                "wall_seconds"), rows)
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args):
    from .gradchecks import run_all
    rows = run_all(seed=args.seed, instances=args.instances)
    failed = [(name, k) for name, k, rep in rows if not rep.passed]
    _write_csv(("network", "instance", "max_rel_error", "worst_param", "passed"),
               [[name, k, _num(rep.max_rel_error), rep.worst_param, int(rep.passed)]
                for name, k, rep in rows])
    if failed:
        _err("failing checks: " + ", ".join(f"{n}[{k}]" for n, k in failed))
        return EXIT_FAILURE
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="treedock", description="Learned multi-chain assembly along spanning trees.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True, help="output directory (one .jsonl per complex)")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--chains", type=_parse_range, default=(3, 6), metavar="MIN..MAX")
    g.add_argument("--residues", type=_parse_range, default=(20, 40), metavar="MIN..MAX")
    g.add_argument("--sigma", type=float, default=0.0, help="dimer noise, radians and A")
    g.add_argument("--tree-family", choices=("uniform", "path", "star"), default="uniform")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the policy")
    t.add_argument("--data")
    t.add_argument("--eval-data", dest="eval_data")
    t.add_argument("--config", help="JSON run config; flags override it")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--episodes", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("assemble", help="assemble complexes with a trained policy")
    a.add_argument("--data", required=True)
    a.add_argument("--checkpoint", required=True)
    mode = a.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true", default=True)
    mode.add_argument("--sample", action="store_true")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", help="JSONL file for predicted structures")
    a.set_defaults(func=cmd_assemble)

    e = sub.add_parser("eval", help="RMSD and TM-score of predictions against truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="exhaustive best tree per complex (N <= 7)")
    o.add_argument("--data", required=True)
    o.add_argument("--workers", type=int, default=1)
    o.set_defaults(func=cmd_oracle)

    c = sub.add_parser("gradcheck", help="finite-difference check of all backward passes")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=10)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        _err(f"usage error: {exc}")
        return EXIT_USAGE
    except (TreedockError, OSError) as exc:
        _err(f"error: {exc}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
