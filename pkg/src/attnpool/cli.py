"""Command line entry point: ``attnpool <command> ...``.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import shutil
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .errors import ContractError, FormatError, NumericalError

log = logging.getLogger("attnpool")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config handling


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent forms without a dot (1e-5) as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(
        r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
        |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
        |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
        |[-+]?\.(?:inf|Inf|INF)
        |\.(?:nan|NaN|NAN))$""",
        re.X,
    ),
    list("-+0123456789."),
)


def read_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = yaml.load(Path(path).read_text(), Loader=_Loader)
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a mapping")
    return doc


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``a.b=value`` overrides; values are parsed as YAML scalars."""
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise UsageError(f"override {item!r} descends into a non-mapping")
        node[parts[-1]] = _scalar(raw)
    return doc


def _scalar(raw: str):
    return yaml.load(raw, Loader=_Loader)


def _build(cls, section: dict, what: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ContractError) as exc:
        raise UsageError(f"invalid {what} config: {exc}") from exc


def _echo_config(out: Path, source: str | None, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if source:
        shutil.copyfile(source, out / ("config_source" + Path(source).suffix))
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .data import SyntheticSpec, generate_synthetic

    doc = apply_overrides(read_config(args.config), args.set)
    doc = doc.get("synthetic", doc)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_dict(doc)
    except (TypeError, ContractError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from exc
    out = Path(args.out)
    _echo_config(out, args.config, {"synthetic": {**asdict(spec), "grid": list(spec.grid)}})
    manifests = generate_synthetic(spec, out)
    print(json.dumps({split: len(m.samples) for split, m in manifests.items()}))
    return EXIT_OK


def _model_train_configs(args, doc: dict):
    from .model import ModelConfig
    from .training import TrainConfig

    model_doc = dict(doc.get("model", {}))
    train_doc = dict(doc.get("train", {}))
    for flag, section, key in (
        ("heads", model_doc, "heads"),
        ("reg", train_doc, "reg"),
        ("pooling", train_doc, "pooling"),
        ("frames", train_doc, "frames"),
        ("epochs", train_doc, "epochs"),
        ("seed", train_doc, "seed"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            section[key] = value
    return _build(ModelConfig, model_doc, "model"), _build(TrainConfig, train_doc, "train")


def _load_split(data_dir: Path, split: str, required: bool = True):
    from .data import load_dataset

    path = data_dir / f"{split}.json"
    if not path.is_file():
        if required:
            raise UsageError(f"{data_dir} has no {split}.json manifest")
        return None
    return load_dataset(path)


def cmd_train(args) -> int:
    from .figures import plot_training_log
    from .training import (
        TrainingDiverged, load_checkpoint, save_checkpoint, train, write_log_csv,
    )

    out = Path(args.out)
    ckpt_path = out / "checkpoint.apck"
    state = None
    if args.resume:
        if not ckpt_path.is_file():
            raise UsageError(f"--resume given but {ckpt_path} does not exist")
        state, model_config, train_config = load_checkpoint(ckpt_path)
        if args.epochs is not None:
            from dataclasses import replace

            train_config = replace(train_config, epochs=args.epochs)
    else:
        doc = apply_overrides(read_config(args.config), args.set)
        model_config, train_config = _model_train_configs(args, doc)
        _echo_config(out, args.config, {"model": asdict(model_config), "train": asdict(train_config)})

    data_dir = Path(args.data)
    tr = _load_split(data_dir, "train")
    va = _load_split(data_dir, "val", required=False)
    if tr.kind != model_config.input:
        raise UsageError(f"data holds {tr.kind} but the model expects {model_config.input}")
    if tr.kind == "features" and tr.videos[0].shape[-1] != model_config.dim:
        raise UsageError(f"data has D={tr.videos[0].shape[-1]} but model.dim={model_config.dim}")

    def on_epoch(st):
        save_checkpoint(ckpt_path, st, model_config, train_config)

    try:
        state = train(tr, model_config, train_config, val=va, state=state, on_epoch=on_epoch, stop_after=args.stop_after)
    except TrainingDiverged as exc:
        diag = out / "diagnostics.json"
        diag.write_text(json.dumps({"error": str(exc), **exc.diagnostics}, indent=2, sort_keys=True) + "\n")
        print(f"numerical abort: {exc}; diagnostics in {diag}", file=sys.stderr)
        return EXIT_NUMERIC
    write_log_csv(state.log, out / "log.csv")
    if state.log:
        plot_training_log(state.log, out / "log.png")
    print(json.dumps(state.log[-1] if state.log else {}, sort_keys=True))
    return EXIT_OK


def _load_model(path: str):
    from .training import load_checkpoint

    try:
        state, model_config, train_config = load_checkpoint(path)
    except (OSError, FormatError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc
    return state.params, model_config, train_config


def cmd_eval(args) -> int:
    from .temporal import POOLINGS
    from .training import evaluate

    params, model_config, train_config = _load_model(args.checkpoint)
    ds = _load_split(Path(args.data), args.split)
    poolings = POOLINGS if args.pooling == "all" else (args.pooling,)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    results = {}
    for pooling in poolings:
        report = evaluate(ds, params, model_config, pooling, train_config).to_json()
        results[pooling] = report
        if out:
            (out / f"eval_{pooling}.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    summary = {p: r["accuracy"] for p, r in results.items()}
    print(json.dumps(summary if len(results) > 1 else results[poolings[0]], sort_keys=True))
    return EXIT_OK


def _write_pgm(path: Path, grid: np.ndarray) -> None:
    h, w = grid.shape
    pixels = np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def cmd_inspect(args) -> int:
    from .attention import attention_heatmap
    from .figures import plot_inspection
    from .model import forward
    from .temporal import frame_importance, importance_display, joint_softmax, per_frame_probs, tp_probs
    from .training import eval_clip

    params, model_config, train_config = _load_model(args.checkpoint)
    ds = _load_split(Path(args.data), args.split)
    try:
        idx = ds.ids.index(args.video)
    except ValueError:
        raise UsageError(f"video {args.video!r} not found in {args.split} split") from None
    clip = eval_clip(ds.videos[idx], train_config)[None]
    res = forward(params, clip, model_config)
    O = res.scores[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    F = O.shape[0]
    heat = []
    if res.attention is not None:
        A = res.attention[0]
        with open(out / "attention.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "head"] + [f"cell{c}" for c in range(A.shape[-1])])
            for f in range(F):
                maps = attention_heatmap(A[f], ds.grid)
                heat.append(maps)
                for h, grid in enumerate(maps):
                    _write_pgm(out / f"{f}_{h}.pgm", grid)
                    w.writerow([f, h] + [repr(float(v)) for v in A[f, h]])
    probs = per_frame_probs(O)
    names = ds.manifest.class_names
    with open(out / "probs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame"] + names)
        for f in range(F):
            w.writerow([f] + [repr(float(v)) for v in probs[f]])
    pf = frame_importance(joint_softmax(O))
    disp = importance_display(pf)
    with open(out / "importance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "probability", "display_pct"])
        for f in range(F):
            w.writerow([f, repr(float(pf[f])), repr(float(disp[f]))])
    predicted = int(np.argmax(tp_probs(O)))
    heat_arr = np.array(heat) if heat else np.zeros((F, 0, *ds.grid))
    plot_inspection(heat_arr, probs, disp, predicted, out / "inspect.png", names)
    print(json.dumps({"video": args.video, "predicted": predicted, "label": int(ds.labels[idx]), "frames": F}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_model

    reports = check_model(args.size, corrupt=1.01 if args.corrupt else None)
    doc = {name: r.to_dict() for name, r in reports.items()}
    passed = all(r.passed for r in reports.values())
    print(json.dumps({"size": args.size, "passed": passed, "reports": doc}, indent=2, sort_keys=True))
    if not passed:
        worst = sorted(
            ((f"{name}:{p}", e) for name, r in reports.items() for p, e in r.max_rel_error.items()),
            key=lambda kv: -kv[1],
        )[:5]
        for name, err in worst:
            print(f"FAIL {name} max rel error {err:.3e}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .data import SyntheticSpec
    from .experiments import TABLES, run_experiment, write_results

    doc = apply_overrides(read_config(args.config), args.set)
    try:
        spec = SyntheticSpec.from_dict(doc.get("synthetic", {}))
    except (TypeError, ContractError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from exc
    doc.setdefault("model", {}).setdefault("num_classes", spec.num_classes)
    doc["model"].setdefault("dim", spec.dim)
    model_config, train_config = _model_train_configs(args, doc)
    out = Path(args.out)
    _echo_config(out, args.config, {
        "synthetic": {**asdict(spec), "grid": list(spec.grid)},
        "model": asdict(model_config), "train": asdict(train_config), "seeds": args.seeds,
    })
    rows = run_experiment(TABLES[args.table], args.seeds, spec, model_config, train_config, out)
    summary = write_results(rows, out, title=args.table)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnpool", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-key override")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="generate a planted-signal dataset")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    def model_flags(sp):
        sp.add_argument("--heads", type=int, help="attention heads (0 = spatial mean)")
        sp.add_argument("--reg", type=float, help="orthogonality penalty strength")
        sp.add_argument("--pooling", choices=("tp", "avg", "max", "indep"), help="training pooling")
        sp.add_argument("--frames", type=int, help="frames sampled per clip (default 16)")
        sp.add_argument("--epochs", type=int, help="epochs (default 30)")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    model_flags(sp)
    sp.add_argument("--data", required=True, help="directory with train.json (and val.json)")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.apck")
    sp.add_argument("--stop-after", type=int, help="stop once this many epochs are done")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val", choices=("train", "val"))
    sp.add_argument("--pooling", default="tp", choices=("tp", "avg", "max", "indep", "all"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="attention heatmaps, per-frame probabilities and frame importance")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val", choices=("train", "val"))
    sp.add_argument("--video", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    sp.add_argument("--size", default="tiny", choices=("tiny", "small"))
    sp.add_argument("--corrupt", action="store_true", help="scale analytic gradients by 1.01 (harness sanity)")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("experiment", help="multi-seed pooling / attention comparison on synthetic data")
    common(sp)
    model_flags(sp)
    sp.add_argument("--table", default="table1", choices=("table1", "table2"))
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ContractError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
