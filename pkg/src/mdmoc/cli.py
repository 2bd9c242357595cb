"""``mdm`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical
failure.  Settings come from flags, then ``--config`` (key=value lines),
then built-in defaults; ``MDM_SEED`` supplies the seed when neither flag
nor config does.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from pathlib import Path

from . import merge_engine as me
from .bench.experiment import BenchConfig, BenchWorld, build_world, fitness_spec, run_bench
from .bench.mlp import MlpSpec
from .bench.tasks import TaskBundle
from .errors import MdmError, NumericalError, ValidationError
from .ledger import ledger_text, read_ledger
from .optimizer import CmaConfig, FitnessSpec, GradConfig, optimize_cmaes, optimize_gradient
from .orthogonalizer import OrthogonalBasis, orthogonality_check, orthogonalize_sequence
from .parameter_store import (
    atomic_write_bytes,
    extract_delta,
    flatten,
    load_checkpoint,
    load_delta,
    normalize_delta,
    save_checkpoint,
    save_delta,
    unflatten,
)
from .subspace import fit_basis, reduced_orthogonalize


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


# ---------------------------------------------------------------------------
# helpers


def _mlp_meta(spec: MlpSpec) -> dict[str, str]:
    return {
        "mlp_input": str(spec.input_dim),
        "mlp_hidden": ",".join(str(h) for h in spec.hidden),
        "mlp_classes": str(spec.classes),
        "mlp_heads": str(spec.heads),
    }


def _mlp_from_meta(meta: dict[str, str]) -> MlpSpec:
    try:
        return MlpSpec(
            int(meta["mlp_input"]),
            tuple(int(h) for h in meta["mlp_hidden"].split(",")),
            int(meta["mlp_classes"]),
            int(meta["mlp_heads"]),
        )
    except KeyError:
        raise ValidationError("checkpoint lacks the MLP description written by `mdm train`") from None


def _parse_alphas(items) -> dict[str, float]:
    out = {}
    for item in items or []:
        key, eq, value = item.rpartition("=")
        if not eq:
            raise ValidationError(f"--alpha expects ID=VALUE, got {item!r}")
        out[key] = float(value)
    return out


def _load_state(args) -> me.MergeState:
    return me.load_state(args.state, recompute_merged=getattr(args, "recompute", False))


def _save_state(state: me.MergeState, args) -> None:
    me.save_state(state, args.state)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, out) -> None:
    cfg = BenchConfig(
        tasks=args.tasks, dims=args.dims, classes=args.classes, separation=args.separation,
        seed=args.seed, epochs=args.epochs, lr=args.lr,
    )
    world = build_world(cfg)
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    meta = _mlp_meta(world.spec)
    save_checkpoint(unflatten(world.base, dict(meta, kind="model", model_id="base")), d / "base.mdmc")
    for task, theta in zip(world.tasks, world.solo):
        save_checkpoint(unflatten(theta, dict(meta, kind="model", model_id=task.task_id)), d / f"model_{task.task_id}.mdmc")
        save_checkpoint(task.to_checkpoint(), d / f"task_{task.task_id}.mdmc")
    print(f"wrote base, {len(world.tasks)} models and task bundles to {d}", file=out)


def cmd_delta(args, out) -> None:
    base_ckpt = load_checkpoint(args.base)
    model_ckpt = load_checkpoint(args.model)
    model_id = args.id or model_ckpt.metadata.get("model_id") or Path(args.model).stem
    delta = extract_delta(flatten(model_ckpt), flatten(base_ckpt), model_id)
    if args.normalize:
        delta = normalize_delta(delta)
    save_delta(delta, args.out)
    print(f"{model_id} {delta.delta_hash}", file=out)


def _save_basis_dir(basis, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = [me.encode_record([("kind", "basis"), ("eps_drop", repr(basis.eps_drop)), ("order_log", ",".join(me._q(i) for i in basis.order_log))])]
    for n, m in enumerate(basis.members):
        fname = f"{n:04d}_{me._safe(m.model_id)}.mdmc"
        save_delta(m, d / fname)
        lines.append(me.encode_record([("kind", "member"), ("model_id", m.model_id), ("file", fname)]))
    for mid, reason in basis.dropped:
        lines.append(me.encode_record([("kind", "dropped"), ("model_id", mid), ("reason", reason)]))
    _write_text(d / "manifest.txt", "\n".join(lines) + "\n")


def _load_basis_dir(directory):
    d = Path(directory)
    records = [me.decode_record(line, i) for i, line in enumerate((d / "manifest.txt").read_text().splitlines(), 1) if line]
    head = next(r for r in records if r["kind"] == "basis")
    members = tuple(load_delta(d / r["file"]) for r in records if r["kind"] == "member")
    dropped = tuple((r["model_id"], r["reason"]) for r in records if r["kind"] == "dropped")
    order = tuple(me._uq(i) for i in head["order_log"].split(",") if i)
    return OrthogonalBasis(members, dropped, float(head["eps_drop"]), order)


def cmd_ortho(args, out) -> None:
    deltas = [load_delta(p) for p in args.deltas]
    basis = reduced_orthogonalize(deltas, args.k) if args.k else orthogonalize_sequence(deltas)
    _save_basis_dir(basis, args.out)
    worst, pair = orthogonality_check(basis)
    print(f"members={len(basis)} dropped={len(basis.dropped)} max_abs_cosine={worst:.3e}", file=out)


def cmd_reduce(args, out) -> None:
    deltas = [load_delta(p) for p in args.deltas]
    sub = fit_basis(deltas, args.k)
    save_checkpoint(sub.to_checkpoint(), args.out)
    print(f"k={sub.k} energy_fraction={sub.energy_fraction:.6f}", file=out)


def cmd_merge(args, out) -> None:
    base = flatten(load_checkpoint(args.base))
    if args.basis:
        basis = _load_basis_dir(args.basis)
    else:
        basis = orthogonalize_sequence([load_delta(p) for p in args.deltas])
    given = _parse_alphas(args.alpha)
    unknown = set(given) - set(basis.ids)
    if unknown:
        raise ValidationError(f"--alpha names unknown models {sorted(unknown)}")
    alphas = {i: given.get(i, me.DEFAULT_ALPHA) for i in basis.ids}
    state = me.merge(base, basis, alphas, operator=args.operator)
    _save_state(state, args)
    for mid, reason in basis.dropped:
        print(f"dropped {mid}: {reason}", file=out)
    print(f"merged {len(basis)} models into {args.state}", file=out)


def cmd_integrate(args, out) -> None:
    state = _load_state(args)
    if args.delta:
        delta = load_delta(args.delta)
        if args.id:
            delta = delta.replace(model_id=args.id)
    else:
        ckpt = load_checkpoint(args.model)
        model_id = args.id or ckpt.metadata.get("model_id") or Path(args.model).stem
        delta = extract_delta(flatten(ckpt), state.base, model_id)
    state = me.integrate(state, delta, args.alpha)
    _save_state(state, args)
    last = state.ledger[-1]
    if last.action == "reject":
        print(f"rejected {delta.model_id}: delta lies in the span of the merged models", file=out)
    else:
        print(f"integrated {delta.model_id} alpha={args.alpha} delta_hash={last.delta_hash}", file=out)


def cmd_unmerge(args, out) -> None:
    state = _load_state(args)
    state = me.unmerge(state, args.id)
    _save_state(state, args)
    print(f"unmerged {args.id} delta_hash={state.ledger[-1].delta_hash}", file=out)


def cmd_reweight(args, out) -> None:
    state = me.reweight(_load_state(args), args.id, args.alpha)
    _save_state(state, args)
    print(f"reweighted {args.id} alpha={args.alpha}", file=out)


def cmd_optimize(args, out) -> None:
    state = _load_state(args)
    base_meta = load_checkpoint(Path(args.state) / "base.mdmc").metadata
    spec = _mlp_from_meta(base_meta) if "mlp_input" in base_meta else None
    task_dir = Path(args.tasks_dir)
    if spec is None:
        spec = _mlp_from_meta(load_checkpoint(task_dir / "base.mdmc").metadata)
    tasks = {}
    for p in sorted(task_dir.glob("task_*.mdmc")):
        t = TaskBundle.from_checkpoint(load_checkpoint(p))
        tasks[t.task_id] = t
    missing = [i for i in state.ids if i not in tasks]
    if missing:
        raise ValidationError(f"no task bundle for merged models {missing} in {task_dir}")
    cfg = BenchConfig(tasks=max(2, len(tasks)), dims=spec.input_dim, classes=spec.classes, hidden=spec.hidden)
    world = BenchWorld(cfg, spec, list(tasks.values()), state.base, [])
    fspec: FitnessSpec = fitness_spec(world, state.ids)
    if args.method == "cmaes":
        result = optimize_cmaes(fspec, state, CmaConfig(args.population, args.sigma0, args.max_iters, args.seed))
    else:
        result = optimize_gradient(fspec, state, GradConfig(max_epochs=args.max_iters))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "best", "mean", "sigma"])
    for rec in result.trace:
        w.writerow([rec.iteration, repr(rec.best), repr(rec.mean), repr(rec.sigma)])
    if args.csv:
        _write_text(args.csv, buf.getvalue())
    if args.apply:
        state = me.set_alphas(state, dict(zip(state.ids, result.alphas)))
        _save_state(state, args)
    for i, a in zip(state.ids, result.alphas):
        print(f"{i}={float(a)!r}", file=out)
    print(f"best_fitness={result.best!r} iterations={len(result.history)}", file=out)


def cmd_verify(args, out) -> int:
    state = _load_state(args)
    report = me.verify_removal(state, args.id, args.hash)
    if report.verified:
        print(f"verified: {args.id} removed (|cos|={report.cosine:.3e})", file=out)
        return 0
    for reason in report.reasons:
        print(f"NOT verified: {reason}", file=out)
    return 2


def cmd_purge(args, out) -> None:
    state = me.purge(_load_state(args), args.id)
    _save_state(state, args)
    print("purged archived deltas; removal can no longer be verified", file=out)


def cmd_ledger(args, out) -> None:
    entries = read_ledger(Path(args.state) / "ledger.log")
    out.write(ledger_text(entries))


def cmd_bench(args, out) -> None:
    settings = dict(args.config_values)
    for key in ("tasks", "seed", "method", "population", "sigma0", "max_iters", "ewc_lambda", "replay_count", "epochs"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = str(value)
    known = {k: v for k, v in settings.items() if k in BenchConfig.__dataclass_fields__}
    cfg = BenchConfig.from_mapping(known)
    result = run_bench(cfg)
    text = result.csv_text()
    _write_text(args.out, text)
    for name, rep in result.reports.items():
        print(f"{name}: ACC={rep.acc:.4f} BWT={rep.bwt:+.4f} FWT={rep.fwt:+.4f} UAD={rep.uad:+.4f}", file=out)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mdm", description="Modular delta merging with orthogonal constraints.")
    p.add_argument("--config", help="key=value settings file; explicit flags take precedence")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def state_cmd(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--state", required=True, help="merge state directory")
        sp.add_argument("--recompute", action="store_true", help="rebuild the merged vector from scratch on load")
        return sp

    sp = sub.add_parser("train", help="build synthetic tasks, a base model and fine-tuned models")
    sp.add_argument("--tasks", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--dims", type=int)
    sp.add_argument("--classes", type=int)
    sp.add_argument("--separation", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("delta", help="extract a task delta from a fine-tuned checkpoint")
    sp.add_argument("--base", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--id")
    sp.add_argument("--normalize", action="store_true", help="store per-layer RMS-normalized values")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_delta)

    sp = sub.add_parser("ortho", help="orthogonalize deltas in the given order")
    sp.add_argument("--deltas", nargs="+", required=True)
    sp.add_argument("--k", type=int, help="orthogonalize in the top-k principal subspace")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ortho)

    sp = sub.add_parser("reduce", help="fit the top-k principal subspace of a delta set")
    sp.add_argument("--deltas", nargs="+", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_reduce)

    sp = sub.add_parser("merge", help="create a merge state from a base and deltas")
    sp.add_argument("--state", required=True)
    sp.add_argument("--base", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--deltas", nargs="+", help="raw deltas, orthogonalized in the order given")
    src.add_argument("--basis", help="basis directory written by `mdm ortho`")
    sp.add_argument("--alpha", action="append", metavar="ID=VALUE")
    sp.add_argument("--operator", default="mdm")
    sp.set_defaults(func=cmd_merge)

    sp = state_cmd("integrate", "add a new model to an existing merge")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--delta")
    src.add_argument("--model")
    sp.add_argument("--id")
    sp.add_argument("--alpha", type=float, default=me.DEFAULT_ALPHA)
    sp.set_defaults(func=cmd_integrate)

    sp = state_cmd("unmerge", "remove a model's contribution")
    sp.add_argument("--id", required=True)
    sp.set_defaults(func=cmd_unmerge)

    sp = state_cmd("reweight", "change one merge coefficient")
    sp.add_argument("--id", required=True)
    sp.add_argument("--alpha", type=float, required=True)
    sp.set_defaults(func=cmd_reweight)

    sp = state_cmd("optimize", "search merge coefficients on task validation splits")
    sp.add_argument("--tasks-dir", required=True, help="directory written by `mdm train`")
    sp.add_argument("--method", choices=("cmaes", "grad"))
    sp.add_argument("--population", type=int)
    sp.add_argument("--sigma0", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--csv", help="per-iteration trace (iter, best, mean, sigma)")
    sp.add_argument("--apply", action="store_true", help="write the optimized coefficients into the state")
    sp.set_defaults(func=cmd_optimize)

    sp = state_cmd("verify", "verify that a removed model leaves no trace")
    sp.add_argument("--id", required=True)
    sp.add_argument("--hash", required=True, help="delta hash recorded when the model was merged")
    sp.set_defaults(func=cmd_verify)

    sp = state_cmd("purge", "delete archived deltas of removed models")
    sp.add_argument("--id")
    sp.set_defaults(func=cmd_purge)

    sp = sub.add_parser("ledger", help="inspect the provenance ledger")
    lsub = sp.add_subparsers(dest="ledger_command", parser_class=_Parser)
    lsub.required = True
    show = lsub.add_parser("show")
    show.add_argument("--state", required=True)
    show.set_defaults(func=cmd_ledger)

    sp = sub.add_parser("bench", help="run the desk-scale benchmark and write metrics CSV")
    sp.add_argument("--tasks", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--method", choices=("cmaes", "grad"))
    sp.add_argument("--population", type=int)
    sp.add_argument("--sigma0", type=float)
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--ewc-lambda", type=float)
    sp.add_argument("--replay-count", type=int)
    sp.add_argument("--out", default="metrics.csv")
    sp.set_defaults(func=cmd_bench)
    return p


_DEFAULTS = {
    "tasks": 5, "seed": 0, "epochs": 10, "lr": 3e-3, "dims": 16, "classes": 4, "separation": 3.0,
    "method": "cmaes", "population": 50, "sigma0": 0.3, "max_iters": 300,
}


def _resolve(args, config: dict[str, str]) -> None:
    """Fill unset options: config file first, then MDM_SEED, then defaults."""
    args.config_values = config
    for key, default in _DEFAULTS.items():
        if not hasattr(args, key) or getattr(args, key) is not None:
            continue
        if key in config:
            setattr(args, key, type(default)(config[key]))
        elif key == "seed" and os.environ.get("MDM_SEED"):
            setattr(args, key, int(os.environ["MDM_SEED"]))
        elif args.command != "bench":
            setattr(args, key, default)


def run(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=err)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        config = read_config(args.config) if args.config else {}
        _resolve(args, config)
        code = args.func(args, out)
        return int(code or 0)
    except NumericalError as exc:
        print(f"mdm: numerical failure: {exc}", file=err)
        return 3
    except (MdmError, FileNotFoundError, IsADirectoryError, KeyError, ValueError) as exc:
        print(f"mdm: error: {exc}", file=err)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
