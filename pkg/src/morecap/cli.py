"""``morecap`` command line: gen-data, train, eval, caption, gradcheck, madgap-sweep."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ABLATIONS, RunConfig
from .data import (
    GeneratorConfig,
    SceneFormatError,
    Vocabulary,
    generate_synthetic,
    load_captions,
    load_scenes,
    split_of,
    write_captions,
    write_scenes,
)

SCENES_FILE = "scenes.jsonl"
CAPTIONS_FILE = "captions.jsonl"

# the over-smoothing study needs remote pairs, so its scenes are larger than
# the KNN fan-out; used when no config file is given
STUDY_CONFIG = RunConfig(knn=3, data=GeneratorConfig(min_objects=10, max_objects=10))


class CliError(Exception):
    """A user-facing failure: printed to stderr, exit code 1."""


def _config(args, default: RunConfig | None = None) -> RunConfig:
    if args.config:
        try:
            cfg = RunConfig.load(args.config)
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
    else:
        cfg = RunConfig.from_dict((default or RunConfig()).to_dict())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "layers", None) is not None:
        cfg.slgc_layers = args.layers
    if getattr(args, "no_quintuplets", False):
        cfg.quintuplets = False
    if getattr(args, "epochs", None) is not None:
        cfg.epochs = args.epochs
    for a in getattr(args, "ablate", None) or []:
        if a not in cfg.ablate:
            cfg.ablate.append(a)
    try:
        cfg.validate()
    except ValueError as exc:
        raise CliError(f"invalid config: {exc}") from None
    return cfg


def _load_data(data_dir: str):
    d = Path(data_dir)
    try:
        return load_scenes(d / SCENES_FILE), load_captions(d / CAPTIONS_FILE)
    except FileNotFoundError as exc:
        raise CliError(f"missing data file: {exc.filename}") from None
    except SceneFormatError as exc:
        raise CliError(str(exc)) from None


def _write_jsonl(path: Path, records) -> None:
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    targets = [out / SCENES_FILE, out / CAPTIONS_FILE]
    existing = [str(p) for p in targets if p.exists()]
    if existing and not args.force:
        raise CliError(f"refusing to overwrite {', '.join(existing)} (use --force)")
    scenes, captions = generate_synthetic(cfg.data, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_scenes(targets[0], scenes)
    write_captions(targets[1], captions)
    print(json.dumps({"scenes": len(scenes), "captions": len(captions), "out": str(out)}))
    return 0


def _model_from_checkpoint(path: str):
    from .pipeline import build_model

    try:
        params, meta, adam = ad.load_checkpoint(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}") from None
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"unreadable checkpoint {path}: {exc}") from None
    cfg = RunConfig.from_dict(meta["config"])
    vocab = Vocabulary.from_json(meta["vocab"])
    try:
        model = build_model(cfg, vocab, params)
    except ValueError as exc:
        raise CliError(f"checkpoint {path} does not match its config: {exc}") from None
    return model, meta, adam


def cmd_train(args) -> int:
    from .pipeline import build_model, make_dataset, new_adam, train

    scenes, captions = _load_data(args.data)
    out = Path(args.out)
    log_path = out.with_name(out.name + ".log.jsonl")
    if args.resume:
        model, meta, adam = _model_from_checkpoint(args.resume)
        if args.epochs is not None:
            model.config.epochs = args.epochs
        start = meta.get("epoch", 0)
        adam = adam or new_adam(model.config)
        vocab = model.vocab
        log_lines = list(meta.get("log", []))
    else:
        cfg = _config(args)
        vocab = Vocabulary.build(captions)
        model = build_model(cfg, vocab)
        adam, start, log_lines = new_adam(cfg), 0, []
    cfg = model.config
    data = make_dataset(scenes, captions, cfg.val_percent, vocab)
    if not data.train:
        raise CliError("training split is empty")

    def on_epoch(rec):
        log_lines.append(rec)
        print(json.dumps(rec, sort_keys=True), flush=True)

    adam = train(model, data, adam, start_epoch=start, on_epoch=on_epoch)
    meta = {"config": cfg.to_dict(), "vocab": vocab.to_json(), "epoch": max(cfg.epochs, start),
            "log": log_lines}
    ad.save_checkpoint(out, model.all_params(), meta, adam)
    _write_jsonl(log_path, log_lines)
    return 0


def _eval_split(scenes, val_percent: int, split: str):
    if split == "all":
        return list(scenes)
    return [s for s in scenes if split_of(s.scene_id, val_percent) == split]


def cmd_eval(args) -> int:
    from .metrics import RelationalDictionary
    from .pipeline import predict, references_by_object, score_report

    model, _, _ = _model_from_checkpoint(args.checkpoint)
    scenes, captions = _load_data(args.data)
    data_vocab = Vocabulary.build(captions)
    if data_vocab.itos != model.vocab.itos:
        extra = sorted(set(data_vocab.itos) - set(model.vocab.itos))
        raise CliError(f"vocabulary mismatch between checkpoint and data "
                       f"({len(model.vocab)} vs {len(data_vocab)} words; unseen: {extra[:10]})")
    dictionary = RelationalDictionary.from_file(args.dictionary) if args.dictionary else RelationalDictionary()
    chosen = _eval_split(scenes, model.config.val_percent, args.split)
    if not chosen:
        raise CliError(f"no scenes in the {args.split} split")
    preds = predict(model, chosen, references_by_object(captions))
    blocks = score_report(preds, args.k or [0.25, 0.5], dictionary)
    print(json.dumps(blocks, sort_keys=True))
    if args.out:
        from .plotting import plot_relational

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(blocks, sort_keys=True, indent=1) + "\n")
        _write_jsonl(out / "predictions.jsonl", (p.to_json() for p in preds))
        plot_relational(blocks, out / "relational.png")
    return 0


def cmd_caption(args) -> int:
    model, _, _ = _model_from_checkpoint(args.checkpoint)
    try:
        scenes = load_scenes(args.scene, model.config.data.palette)
    except FileNotFoundError:
        raise CliError(f"scene file not found: {args.scene}") from None
    except SceneFormatError as exc:
        raise CliError(str(exc)) from None
    if args.scene_id is not None:
        by_id = {s.scene_id: s for s in scenes}
        if args.scene_id not in by_id:
            raise CliError(f"scene {args.scene_id!r} not in {args.scene}; valid ids: {sorted(by_id)}")
        scene = by_id[args.scene_id]
    else:
        scene = scenes[0]
    if args.object_id is not None:
        try:
            scene.index_of(args.object_id)
        except KeyError as exc:
            raise CliError(exc.args[0]) from None
        ids = [args.object_id]
    else:
        ids = [o.id for o in scene.objects]
    for oid, words in zip(ids, model.caption_scene(scene, ids)):
        box = scene.objects[scene.index_of(oid)].box
        print(json.dumps({"scene_id": scene.scene_id, "object_id": oid, "box": box.to_list(),
                          "caption": words}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    results = run_gradcheck(args.seed or 0)
    width = max(len(r.component) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.component:<{width}}  max_rel_err={r.max_rel_error:.3e}  n={r.n_checks:<4d} {status}")
    failed = [r.component for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed (tolerance {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def cmd_madgap_sweep(args) -> int:
    from .study import madgap_sweep

    cfg = _config(args, STUDY_CONFIG)
    res = madgap_sweep(cfg, n_seeds=args.seeds, max_layers=args.max_depth)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config", "madgap_mean", "madgap_std"] + [f"seed{s}" for s in res.seeds])
    for c, name in enumerate(res.rows):
        col = res.values[:, c]
        writer.writerow([name, f"{col.mean():.6f}", f"{col.std():.6f}"] + [f"{v:.6f}" for v in col])
    sys.stdout.write(buf.getvalue())
    if args.out:
        from .plotting import plot_madgap

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "madgap.csv").write_text(buf.getvalue())
        plot_madgap(res.rows, res.values, out / "madgap.png")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morecap", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run config; missing keys take defaults")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config seed")

    g = sub.add_parser("gen-data", help="write synthetic scenes and template captions")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--force", action="store_true", help="overwrite existing files")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a captioner and write a checkpoint")
    common(t)
    t.add_argument("--data", required=True, help="directory from gen-data")
    t.add_argument("--out", required=True, help="checkpoint path (log goes to <out>.log.jsonl)")
    t.add_argument("--layers", type=int, help="number of stacked SLGC layers")
    t.add_argument("--no-quintuplets", action="store_true", help="triplet hyper-nodes only")
    t.add_argument("--ablate", action="append", choices=ABLATIONS, help="disable a component")
    t.add_argument("--epochs", type=int, help="override the config epoch count")
    t.add_argument("--resume", help="continue from this checkpoint (its config wins)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on the held-out split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--k", type=float, action="append", help="IoU threshold (repeatable)")
    e.add_argument("--split", choices=("val", "train", "all"), default="val")
    e.add_argument("--dictionary", help="JSON relational dictionary {simple: [...], complex: [...]}")
    e.add_argument("--out", help="directory for report.json, predictions.jsonl and relational.png")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("caption", help="caption one scene; prediction JSONL on stdout")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--scene", required=True, help="scene JSONL file")
    c.add_argument("--scene-id", help="scene to use when the file holds several (default: first)")
    c.add_argument("--object-id", type=int, help="caption only this object")
    c.set_defaults(func=cmd_caption)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and module")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("madgap-sweep", help="MADGap of untrained encoders by SLGC depth, plus OTAG")
    common(m)
    m.add_argument("--layers", dest="max_depth", type=int, default=4, help="deepest SLGC stack")
    m.add_argument("--seeds", type=int, default=20, help="number of seeded scenes")
    m.add_argument("--no-quintuplets", action="store_true")
    m.add_argument("--out", help="directory for madgap.csv and madgap.png")
    m.set_defaults(func=cmd_madgap_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"morecap {args.command}: {exc}", file=sys.stderr)
        return 1
    except ad.ContractError as exc:
        print(f"morecap {args.command}: contract violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
