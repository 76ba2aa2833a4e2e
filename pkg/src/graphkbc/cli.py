"""Command-line entry point: dataset generation, training, evaluation, prediction.

One binary, five subcommands (gen-ookb, train, eval, predict, gradcheck).
Options may come from a ``key = value`` config file with command-line flags
taking precedence over it, and defaults below both. Every command echoes its
effective configuration next to its outputs before doing real work, and all
randomness flows from the single ``seed`` option.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical fault.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 by default; usage problems are exit 1 here
    def error(self, message):
        raise UsageError(message)


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; blank lines and #-comments are allowed."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key = value")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: str, kind):
    if kind is bool:
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"option {key!r}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"option {key!r}: expected {kind.__name__}, got {raw!r}") from None


def merge_options(fields: dict[str, tuple], args: argparse.Namespace, config_path) -> dict:
    """defaults < config file < explicit command-line flags; unknown keys rejected."""
    merged = {key: default for key, (kind, default) in fields.items()}
    if config_path:
        for key, raw in parse_config_file(config_path).items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kind, _ = fields[key]
            merged[key] = _coerce(key, raw, kind)
    for key in fields:
        cli_value = getattr(args, key.replace("-", "_"), None)
        if cli_value is not None:
            merged[key] = cli_value
    return merged


def _add_field_flags(parser: argparse.ArgumentParser, fields: dict[str, tuple]) -> None:
    for key, (kind, default) in fields.items():
        flag = "--" + key.replace("_", "-")
        if kind is bool:
            parser.add_argument(flag, default=None, action="store_const", const=True,
                                help=f"(default {default})")
        else:
            parser.add_argument(flag, default=None, type=kind, help=f"(default {default})")


def _echo_config(out_dir, command: str, merged: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({"command": command, **merged}, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# gen-ookb

def cmd_gen_ookb(args) -> int:
    from .kg import Vocabulary, load_triplet_file, positives
    from .ookb import OokbPosition, generate, split_name, write_split

    sizes = [int(x) for x in str(args.n).split(",")]
    if any(n <= 0 for n in sizes):
        raise UsageError("--n must be positive")
    if args.position == "all":
        poss = list(OokbPosition)
    else:
        poss = [OokbPosition(p) for p in args.position.split(",")]

    ev, rv = Vocabulary(), Vocabulary()
    train = positives(load_triplet_file(args.train, ev, rv))
    valid = load_triplet_file(args.valid, ev, rv, labeled=True)
    test = load_triplet_file(args.test, ev, rv, labeled=True)

    _echo_config(args.out, "gen-ookb", {
        "train": args.train, "valid": args.valid, "test": args.test,
        "n": str(args.n), "position": args.position,
    })
    # the corpus-wide vocabularies: training on a split should seed its
    # entity table from these so that every evaluation entity has a row,
    # trained or not (pass to train via --vocab)
    ev.save(os.path.join(args.out, "entities.txt"))
    rv.save(os.path.join(args.out, "relations.txt"))
    for position in poss:
        for n in sizes:
            split = generate(train, valid, test, n, position)
            name = split_name(position, n)
            write_split(split, args.out, name, ev, rv)
            print(f"[{name}]")
            print(split.stats.as_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

TRAIN_FIELDS = {
    "epochs": (int, 300),
    "minibatch": (int, 5000),
    "dim": (int, 200),
    "depth": (int, 1),
    "mode": (str, "unrolled"),
    "pooling": (str, "max"),
    "transition": (str, "relation-relu-bn"),
    "neighbor_cap": (int, 64),
    "norm_p": (int, 1),
    "margin": (float, 300.0),
    "objective": (str, "absolute"),
    "alpha1": (float, 0.01),
    "alpha2": (float, 0.0001),
    "seed": (int, 0),
    "checkpoint_every": (int, 10),
    "project_entities": (bool, False),
    "filter_false_negatives": (bool, False),
}


def _configs_from(merged: dict):
    from .model import ObjectiveConfig, PropagationConfig
    from .trainer import TrainConfig

    prop = PropagationConfig(
        dim=merged["dim"], depth=merged["depth"], mode=merged["mode"],
        pooling=merged["pooling"], transition=merged["transition"],
        neighbor_cap=merged["neighbor_cap"], norm_p=merged["norm_p"],
    )
    objective = ObjectiveConfig(objective=merged["objective"], margin=merged["margin"])
    cfg = TrainConfig(
        epochs=merged["epochs"], minibatch_size=merged["minibatch"],
        alpha1=merged["alpha1"], alpha2=merged["alpha2"], seed=merged["seed"],
        checkpoint_every=merged["checkpoint_every"],
        project_entities=merged["project_entities"],
        filter_false_negatives=merged["filter_false_negatives"],
    )
    return prop, objective, cfg


def cmd_train(args) -> int:
    from .kg import Vocabulary, build_graph, load_triplet_file, positives
    from .model import load_model, save_model
    from .trainer import init_model, run_training

    merged = merge_options(TRAIN_FIELDS, args, args.config)
    try:
        prop_cfg, objective, cfg = _configs_from(merged)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    start_epoch = 0
    if args.resume:
        model, ev, rv, extra = load_model(args.resume)
        start_epoch = int(extra.get("completed_epochs", 0))
        graph = build_graph(positives(load_triplet_file(args.train, ev, rv)))
        if len(ev) != model.n_entities:
            raise ConfigError(
                "training file contains entities unknown to the checkpoint; "
                "resume must use the original training file"
            )
    else:
        if args.vocab:
            ev = Vocabulary.load(args.vocab)
            rv_path = os.path.join(os.path.dirname(args.vocab), "relations.txt")
            rv = Vocabulary.load(rv_path) if os.path.exists(rv_path) else Vocabulary()
        else:
            ev, rv = Vocabulary(), Vocabulary()
        graph = build_graph(positives(load_triplet_file(args.train, ev, rv)))
        model = init_model(len(ev), len(rv), prop_cfg, cfg.seed)

    merged_echo = dict(merged)
    merged_echo.update({"train": args.train, "resume": args.resume or "",
                        "start_epoch": start_epoch})
    _echo_config(args.out, "train", merged_echo)
    if graph.duplicates_collapsed:
        print(f"note: {graph.duplicates_collapsed} duplicate training triplets collapsed")

    def save_bundle(directory, completed):
        save_model(model, directory, ev, rv, extra={
            "completed_epochs": completed,
            "objective": objective.objective,
            "margin": objective.margin,
        })

    def log(record):
        print(
            "epoch {epoch}: loss {loss:.4f} pos {mean_pos_score:.4f} "
            "neg {mean_neg_score:.4f} lr {step_size:.6f} ({wall_time:.1f}s)".format(**record)
        )

    run_training(graph, model, cfg, objective, args.out, save_bundle,
                 start_epoch=start_epoch, log=log)
    print(f"final checkpoint: {os.path.join(args.out, 'checkpoint-final')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def _load_split_files(prefix, ev, rv):
    """Assemble an OOKB split from the files written by gen-ookb."""
    from .kg import build_graph, load_triplet_file, positives
    from .ookb import OokbSplit, SplitStats

    train = build_graph(positives(load_triplet_file(f"{prefix}.train.txt", ev, rv)))
    aux = positives(load_triplet_file(f"{prefix}.aux.txt", ev, rv))
    valid = load_triplet_file(f"{prefix}.valid.txt", ev, rv, labeled=True)
    test = load_triplet_file(f"{prefix}.test.txt", ev, rv, labeled=True)
    with open(f"{prefix}.ookb.txt", encoding="utf-8") as fh:
        ookb = {ev.add(line.rstrip("\n")) for line in fh if line.rstrip("\n")}
    stats = SplitStats(
        training_triplets=len(train), validation_triplets=len(valid),
        test_triplets=len(test), auxiliary_triplets=len(aux),
        ookb_entities=len(ookb), auxiliary_entities=0, auxiliary_entities_total=0,
        discarded_triplets=0, aux_known_endpoint_outside_training=0,
    )
    return OokbSplit(train=train, aux=aux, ookb_entities=ookb,
                     validation=valid, test=test, stats=stats)


def _write_eval_outputs(out_dir, report: dict, thresholds, rv) -> None:
    with open(os.path.join(out_dir, "report.jsonl"), "a", encoding="utf-8") as fh:
        fh.write(json.dumps(report) + "\n")
    named = {rv.name_of(r): t for r, t in thresholds.per_relation.items()}
    with open(os.path.join(out_dir, "thresholds.json"), "w", encoding="utf-8") as fh:
        json.dump({"global": thresholds.global_threshold, "relations": named}, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "summary.txt"), "a", encoding="utf-8") as fh:
        fh.write(
            "{dataset:24s} {method:9s} {pooling:4s} accuracy={accuracy:.4f} "
            "n={n_test} thresholds={threshold_digest}\n".format(**report)
        )


def cmd_eval(args) -> int:
    from .evaluate import evaluate_ookb, evaluate_standard
    from .kg import build_graph, load_triplet_file, positives
    from .model import load_model

    model, ev, rv, extra = load_model(args.checkpoint)
    echo = {"checkpoint": args.checkpoint, "mode": args.mode, "seed": args.seed,
            "per_relation": not args.global_threshold}
    if args.mode == "standard":
        if not (args.train and args.valid and args.test):
            raise UsageError("standard eval needs --train, --valid and --test")
        echo.update({"train": args.train, "valid": args.valid, "test": args.test})
        _echo_config(args.out, "eval", echo)
        graph = build_graph(positives(load_triplet_file(args.train, ev, rv)))
        valid = load_triplet_file(args.valid, ev, rv, labeled=True)
        test = load_triplet_file(args.test, ev, rv, labeled=True)
        report, thresholds = evaluate_standard(
            graph, valid, test, model,
            per_relation=not args.global_threshold, sampler_seed=args.seed,
            dataset_name=args.dataset_name or os.path.basename(args.test),
        )
    else:
        if not args.split_prefix:
            raise UsageError("ookb eval needs --split-prefix")
        if args.method == "baseline" and not args.pooling:
            raise UsageError("baseline eval needs --pooling")
        echo.update({"split_prefix": args.split_prefix, "method": args.method,
                     "pooling": args.pooling or "", "raw_neighbors": args.raw_neighbors})
        _echo_config(args.out, "eval", echo)
        split = _load_split_files(args.split_prefix, ev, rv)
        report, thresholds = evaluate_ookb(
            split, model, method=args.method, pooling=args.pooling,
            raw_neighbors=args.raw_neighbors,
            per_relation=not args.global_threshold, sampler_seed=args.seed,
            dataset_name=args.dataset_name or os.path.basename(args.split_prefix),
        )
    _write_eval_outputs(args.out, report, thresholds, rv)
    print(json.dumps(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict

def cmd_predict(args) -> int:
    from .evaluate import OokbContext, ThresholdTable, classify, make_scorer, \
        ookb_vector, propagated_vectors, tune_thresholds
    from .kg import build_graph, entities_of, load_triplet_file, positives
    from .model import InferenceError, NeighborSampler, NeighborTable, load_model

    model, ev, rv, extra = load_model(args.checkpoint)
    graph = build_graph(positives(load_triplet_file(args.train, ev, rv)))
    queries = [lt.triplet for lt in load_triplet_file(args.triplets, ev, rv)]
    aux = positives(load_triplet_file(args.aux, ev, rv)) if args.aux else []

    if args.thresholds:
        with open(args.thresholds, encoding="utf-8") as fh:
            data = json.load(fh)
        per = {rv.id_of(name): t for name, t in data["relations"].items() if name in rv}
        thresholds = ThresholdTable(per, data["global"])
    elif args.valid:
        valid = load_triplet_file(args.valid, ev, rv, labeled=True)
        table = NeighborTable(model.n_entities, graph.triplets) if model.cfg.depth else None
        sampler = NeighborSampler(table, model.cfg.neighbor_cap, [args.seed]) if table else None
        needed = {e for lt in valid for e in (lt.triplet.head, lt.triplet.tail)}
        vectors = propagated_vectors(model, table, needed, sampler)
        thresholds = tune_thresholds(valid, make_scorer(model, vectors))
    else:
        raise UsageError("predict needs --thresholds or --valid to tune on")

    # an entity outside the trained graph never received updates (it may
    # still own an untouched embedding row); resolve it through aux triplets
    in_graph = entities_of(graph)
    outside = {e for t in queries + aux for e in (t.head, t.tail) if e not in in_graph}
    query_outside = {e for t in queries for e in (t.head, t.tail) if e not in in_graph}
    vectors = {}
    if outside or aux:
        ctx = OokbContext(graph, aux, frozenset(outside), model, sampler_seed=args.seed)
        for u in sorted(query_outside):
            if ctx.table.degree(u) == 0:
                raise InferenceError(
                    f"entity {ev.name_of(u)!r} is outside the knowledge base and "
                    "has no auxiliary triplet"
                )
            vectors[u] = ookb_vector(u, ctx)
        known_table = ctx.table if model.cfg.depth else None
        sampler = ctx.sampler
    else:
        known_table = NeighborTable(model.n_entities, graph.triplets) if model.cfg.depth else None
        sampler = NeighborSampler(known_table, model.cfg.neighbor_cap, [args.seed]) if known_table else None
    known = {e for t in queries for e in (t.head, t.tail) if e in in_graph}
    vectors.update(propagated_vectors(model, known_table, known, sampler))

    scorer = make_scorer(model, vectors)
    scores = scorer(queries)
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for t, s in zip(queries, scores):
            thr = thresholds.threshold_of(t.relation)
            label = 1 if classify(t, thresholds, float(s)) else -1
            sink.write(
                f"{ev.name_of(t.head)}\t{rv.name_of(t.relation)}\t{ev.name_of(t.tail)}"
                f"\t{s:.6f}\t{thr:.6f}\t{label}\n"
            )
    finally:
        if args.out:
            sink.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    from .checks import gradient_check_report

    ok, failures = gradient_check_report(
        tolerance=args.tolerance, seed=args.seed, corrupt_hook=args.corrupt_gradient
    )
    if ok:
        print(f"gradcheck passed at tolerance {args.tolerance:g}")
        return EXIT_OK
    for line in failures[:20]:
        print(line, file=sys.stderr)
    print(f"gradcheck failed: {len(failures)} gradient(s) beyond tolerance", file=sys.stderr)
    return EXIT_NUMERIC


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="graphkbc", description=__doc__)
    parser.add_argument("--workers", type=int, default=None,
                        help="cap numeric-library threads (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-ookb", help="construct out-of-KB splits from benchmark files")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--n", required=True, help="count or comma list, e.g. 1000,3000,5000")
    p.add_argument("--position", required=True, help="head, tail, both, a comma list, or all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_ookb)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--train", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key = value options file")
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    p.add_argument("--vocab", default=None,
                   help="entity name list to seed the vocabulary (written by gen-ookb); "
                        "gives evaluation entities outside the split an embedding row")
    _add_field_flags(p, TRAIN_FIELDS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="tune thresholds on validation and score a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("standard", "ookb"), default="standard")
    p.add_argument("--train", default=None)
    p.add_argument("--valid", default=None)
    p.add_argument("--test", default=None)
    p.add_argument("--split-prefix", default=None,
                   help="path prefix of gen-ookb outputs, e.g. out/head-1000")
    p.add_argument("--method", choices=("proposed", "baseline"), default="proposed")
    p.add_argument("--pooling", choices=("sum", "avg", "max"), default=None)
    p.add_argument("--raw-neighbors", action="store_true",
                   help="baseline pools raw neighbor vectors instead of implied positions")
    p.add_argument("--global-threshold", action="store_true",
                   help="one threshold for all relations instead of per-relation")
    p.add_argument("--dataset-name", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score and label candidate triplets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True, help="training file the checkpoint was built from")
    p.add_argument("--triplets", required=True, help="candidate triplets, unlabeled")
    p.add_argument("--aux", default=None, help="auxiliary triplets for out-of-KB entities")
    p.add_argument("--thresholds", default=None, help="thresholds.json from eval")
    p.add_argument("--valid", default=None, help="labeled file to tune thresholds on")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="verify gradients against finite differences")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workers is not None:
            if args.workers < 1:
                raise UsageError("--workers must be positive")
            for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
                os.environ[var] = str(args.workers)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # late imports: dispatch on exception name
        kind = type(exc).__name__
        if kind in ("TripletParseError", "InferenceError"):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        if kind == "GradientError":
            print(f"numerical fault: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, ValueError):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        raise


if __name__ == "__main__":
    sys.exit(main())
