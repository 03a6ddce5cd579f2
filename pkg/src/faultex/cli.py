"""Command-line entry point: gen, train, eval, explain, serve, validate-config."""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from . import faults, features, pipeline, seq2seq, simulator, templates, worldmodel

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--env-config", help="environment config file (default: bundled)")
    parser.add_argument("--taxonomy", help="taxonomy config file (default: bundled)")
    parser.add_argument("--phrases", help="phrase config file (default: bundled)")


def _load_configs(args):
    envs = worldmodel.load_environments(args.env_config)
    tax = faults.load_taxonomy(args.taxonomy)
    book = templates.load_phrases(args.phrases)
    return envs, tax, book


def _config_hashes(args) -> dict:
    import hashlib
    from importlib import resources

    def digest(path, bundled):
        if path:
            text = Path(path).read_text()
        else:
            text = resources.files("faultex.configs").joinpath(bundled).read_text()
        return hashlib.sha256(text.encode()).hexdigest()

    return {
        "environments": digest(args.env_config, "environments.json"),
        "taxonomy": digest(args.taxonomy, "taxonomy.json"),
        "phrases": digest(args.phrases, "phrases.json"),
    }


def _dataset_line(ex: pipeline.Example) -> str:
    row = {
        "episode_id": ex.episode_id,
        "t": ex.timestep,
        "env_id": ex.env_id,
        "label_class": ex.label_class,
        "label_text": ex.label_text,
        "X": [int(i) for i in ex.features.X],
        "o": int(ex.features.o),
        "N": [float(v) for v in ex.features.N],
        "mask": [int(v) for v in ex.features.mask],
        "target": list(ex.target),
    }
    return json.dumps(row, separators=(",", ":"))


def cmd_gen(args) -> int:
    envs, tax, book = _load_configs(args)
    if args.env not in envs:
        raise worldmodel.InvalidEnvironmentError(f"unknown environment id: {args.env!r}")
    out = Path(args.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)

    vocab = features.build_vocab(pipeline.corpus_for(envs, tax, book))
    features.save_vocab(vocab, out / "vocab.txt")

    traces = simulator.generate_batch(
        envs[args.env], args.episodes, args.seed, match_paper_counts=args.match_paper_counts,
        tax=tax, phrases=book,
    )
    for trace in traces:
        simulator.write_trace(trace, out / "traces" / f"{trace.episode_id}.jsonl")

    dataset = pipeline.assemble_dataset(traces, vocab, envs)
    with open(out / f"dataset-{args.env}.jsonl", "w") as fh:
        for ex in dataset.examples:
            fh.write(_dataset_line(ex) + "\n")

    n_err = sum(1 for ex in dataset.examples if ex.label_class != pipeline.E_CORR)
    print(f"generated {len(traces)} episodes: {len(dataset)} timesteps "
          f"({len(dataset) - n_err} success/active, {n_err} error)")
    return EXIT_OK


def _read_traces(data_dir: Path) -> list:
    paths = sorted((data_dir / "traces").glob("*.jsonl"))
    if not paths:
        raise ValueError(f"no trace files under {data_dir / 'traces'}")
    return [simulator.read_trace(p) for p in paths]


def _split_sims(traces, envs):
    """Training sims come from the base environment; correspondence envs are held out."""
    train_sims, eval_sims = [], []
    for trace in traces:
        if trace.fault is None:
            continue
        ref = pipeline.SimRef(trace.episode_id, trace.fault.cause)
        if envs[trace.env_id].kitchen_correspondence:
            eval_sims.append(ref)
        else:
            train_sims.append(ref)
    return train_sims, eval_sims


def cmd_train(args) -> int:
    envs, tax, book = _load_configs(args)
    data = Path(args.data)
    vocab = features.load_vocab(data / "vocab.txt")
    traces = _read_traces(data)
    dataset = pipeline.assemble_dataset(traces, vocab, envs)
    train_sims, eval_sims = _split_sims(traces, envs)
    if not train_sims or not eval_sims:
        raise ValueError("training needs simulations from both the base and the held-out environment")
    plan = pipeline.make_folds(train_sims, eval_sims, args.seed)

    folds = list(plan.folds)
    if args.fold != "all":
        folds = [plan.folds[int(args.fold)]]
    hp = pipeline.Hyperparams(
        batch_size=args.batch_size, lr=args.lr, max_epochs=args.max_epochs, patience=args.patience
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    results = pipeline.train_folds(dataset, vocab, folds, hp, args.seed, workers=args.workers)

    catalog = pipeline.build_label_catalog(envs, tax, book)
    eval_examples = dataset.subset(plan.eval_ids)
    fold_evals = []
    history_lines = ["fold,epoch,train_loss,val_loss"]
    for result in results:
        ckpt = out / f"fold-{result.fold_index:02d}.ckpt"
        seq2seq.save_checkpoint(ckpt, result.params, vocab.content_hash())
        ev = pipeline.evaluate_exact_match(result.params, eval_examples, vocab, catalog)
        fold_evals.append(pipeline.FoldEval(result.fold_index, result.params, ev.error_accuracy))
        for epoch, train_loss, val_loss in result.history:
            history_lines.append(f"{result.fold_index},{epoch},{train_loss:.8f},{val_loss:.8f}")
        print(f"fold {result.fold_index}: {len(result.history)} epochs, "
              f"best val loss {result.best_val_loss:.6f} (epoch {result.best_epoch}), "
              f"eval error exact-match {ev.error_accuracy:.4f}")

    (out / "history.csv").write_text("\n".join(history_lines) + "\n")
    best = pipeline.select_model(fold_evals)
    best_idx = next(fe.fold_index for fe in fold_evals if fe.params is best)
    shutil.copyfile(out / f"fold-{best_idx:02d}.ckpt", out / "best.ckpt")
    (out / "selection.json").write_text(json.dumps(
        {
            "selected_fold": best_idx,
            "eval_error_accuracy": {str(fe.fold_index): fe.eval_accuracy for fe in fold_evals},
        },
        indent=2, sort_keys=True,
    ) + "\n")
    manifest = pipeline.build_manifest(args.seed, hp, plan, vocab, notes={"folds_trained": [f.index for f in folds]})
    manifest["config_sha256"] = _config_hashes(args)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"selected fold {best_idx} -> {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    envs, tax, book = _load_configs(args)
    data = Path(args.data)
    vocab = features.load_vocab(data / "vocab.txt")
    traces = _read_traces(data)
    dataset = pipeline.assemble_dataset(traces, vocab, envs)
    train_sims, eval_sims = _split_sims(traces, envs)
    plan = pipeline.make_folds(train_sims, eval_sims, args.seed)
    catalog = pipeline.build_label_catalog(envs, tax, book)

    model_dir = Path(args.model) if args.model else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.checkpoint:
        checkpoints = [(None, Path(args.checkpoint))]
    else:
        paths = sorted(model_dir.glob("fold-*.ckpt"))
        if args.fold != "all":
            paths = [model_dir / f"fold-{int(args.fold):02d}.ckpt"]
        checkpoints = [(int(p.stem.split("-")[1]), p) for p in paths]
    if not checkpoints:
        raise ValueError("no checkpoints to evaluate")

    total_confusion = None
    accuracies, error_accuracies = [], []
    per_class_totals: dict = {}
    per_fold = {}
    for fold_index, path in checkpoints:
        params = seq2seq.load_checkpoint(path, vocab.content_hash())
        if args.set == "office":
            examples = dataset.subset(plan.eval_ids)
        else:
            if fold_index is None:
                raise ValueError("kitchen-test evaluation needs fold checkpoints")
            examples = dataset.subset(plan.folds[fold_index].test_ids)
        result = pipeline.evaluate_exact_match(params, examples, vocab, catalog)
        total_confusion = result.confusion if total_confusion is None else total_confusion + result.confusion
        accuracies.append(result.accuracy)
        error_accuracies.append(result.error_accuracy)
        for cls, (correct, total) in result.per_class.items():
            agg = per_class_totals.setdefault(cls, [0, 0])
            agg[0] += correct
            agg[1] += total
        per_fold[str(fold_index)] = {
            "accuracy": result.accuracy,
            "error_accuracy": result.error_accuracy,
        }

    mean_acc = sum(accuracies) / len(accuracies)
    mean_err = sum(error_accuracies) / len(error_accuracies)
    aggregate = pipeline.EvalResult(
        confusion=total_confusion,
        per_class={c: tuple(v) for c, v in per_class_totals.items()},
        accuracy=mean_acc,
        error_accuracy=mean_err,
        n_examples=int(total_confusion.counts.sum()),
    )
    matrix7 = total_confusion.matrix7()
    lines7 = ["predicted\\true," + ",".join(total_confusion.classes)]
    for r, name in enumerate(total_confusion.classes):
        lines7.append(name + "," + ",".join(str(int(x)) for x in matrix7[r]))
    (out / "confusion.csv").write_text("\n".join(lines7) + "\n")
    (out / "confusion-extended.csv").write_text(total_confusion.to_csv())
    report = pipeline.report_text(
        aggregate,
        extra={
            "set": args.set,
            "folds": len(checkpoints),
            "mean_exact_match_accuracy": f"{mean_acc:.6f}",
            "mean_error_exact_match_accuracy": f"{mean_err:.6f}",
            **{f"fold.{k}.error_accuracy": f"{v['error_accuracy']:.6f}" for k, v in per_fold.items()},
        },
    )
    (out / "report.txt").write_text(report)
    print(report, end="")
    return EXIT_OK


CONDITION_ORDER = ("None", "AB", "CB", "AB-H", "CB-H")


def cmd_explain(args) -> int:
    envs, tax, book = _load_configs(args)
    data = Path(args.data)
    trace = simulator.read_trace(data / "traces" / f"{args.trace}.jsonl")
    state = next((s for s in trace.states if s.timestep == args.t), None)
    if state is None:
        raise ValueError(f"trace {args.trace!r} has no timestep {args.t}")
    if worldmodel.classify_state(state) is not worldmodel.StateClass.FAILED:
        raise ValueError(f"timestep {args.t} is not a failure state; explanations apply to failures")
    from .service.sessions import failure_context

    probe = trace if state is trace.last_state else None
    ctx_trace = probe or simulator.EpisodeTrace(
        trace.episode_id, trace.env_id, trace.task, trace.fault,
        trace.states[: trace.states.index(state) + 1],
        trace.annotations[: trace.states.index(state) + 1],
        trace.seed,
    )
    ctx = failure_context(ctx_trace, tax)

    def render(condition: str) -> str:
        if condition == "None":
            return "N/A"
        if condition == "CB-H-M":
            if not args.checkpoint:
                raise ValueError("CB-H-M needs --checkpoint")
            vocab = features.load_vocab(data / "vocab.txt")
            params = seq2seq.load_checkpoint(args.checkpoint, vocab.content_hash())
            env = envs[trace.env_id]
            fv = features.extract_features(state, env, trace.task, vocab)
            return seq2seq.greedy_decode(params, fv, vocab)
        return templates.scripted_explanation(templates.ExplanationType.from_label(condition), ctx, book)

    if args.condition:
        print(f"{args.condition}: {render(args.condition)}")
    else:
        for condition in CONDITION_ORDER:
            print(f"{condition}: {render(condition)}")
        if args.checkpoint:
            print(f"CB-H-M: {render('CB-H-M')}")
        else:
            print("CB-H-M: (pass --checkpoint to decode the model explanation)")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app, default_deps

    deps = default_deps(
        env_config=args.env_config,
        taxonomy_config=args.taxonomy,
        phrase_config=args.phrases,
        checkpoint=args.checkpoint,
        vocab_path=args.vocab,
    )
    app = create_app(deps, transcript_path=args.transcript)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    checks = (
        ("environment", lambda: worldmodel.load_environments(args.env_config)),
        ("taxonomy", lambda: faults.load_taxonomy(args.taxonomy)),
        ("phrases", lambda: templates.load_phrases(args.phrases)),
    )
    for name, loader in checks:
        loader()
        print(f"{name}: ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faultex", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate episode traces and the dataset")
    p.add_argument("--env", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--match-paper-counts", action="store_true",
                   help="schedule pre-error steps so 6k episodes total exactly 115k/6 non-error timesteps")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the explanation model with grouped LOOCV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--fold", default="all")
    p.add_argument("--batch-size", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--max-epochs", type=int, default=400)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="exact-match evaluation and confusion matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--model")
    p.add_argument("--checkpoint")
    p.add_argument("--set", choices=("office", "kitchen-test"), default="office")
    p.add_argument("--fold", default="all")
    p.add_argument("--seed", type=int, required=True,
                   help="fold-plan seed; must match the one used for training")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="print the explanation conditions for one trace timestep")
    p.add_argument("--data", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--condition", choices=CONDITION_ORDER + ("CB-H-M",))
    p.add_argument("--checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("serve", help="run the recovery service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--checkpoint")
    p.add_argument("--vocab")
    p.add_argument("--transcript", default="sessions.jsonl")
    _add_config_flags(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("validate-config", help="check config files against their invariants")
    _add_config_flags(p)
    p.set_defaults(func=cmd_validate_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (worldmodel.ConfigError, worldmodel.InvalidEnvironmentError, worldmodel.InvalidTaskError,
            ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
