"""``sslcm`` command line: synth, train, sweep, score, eer, fuse-fit, fuse-apply, report.

Failures print a single ``error: <Kind>: <message>`` line on stderr and exit
with status 1.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from sslcm.actstore import ScoreSet, load_manifest, load_scores, save_scores
from sslcm.errors import ConfigError, SslcmError
from sslcm.evalkit import (
    EvalConfig,
    LayerSweepReport,
    SweepRow,
    average_eer,
    compute_eer,
    extract_layer_weights,
    layer_sweep,
    read_sweep_csv,
    read_weights_csv,
    score_manifest,
    select_best_single_layer,
    sweep_plot_points,
    weight_plot_points,
    write_plot_tsv,
    write_sweep_csv,
    write_weights_csv,
)
from sslcm.fusekit import fit_calibration, fit_fusion, fuse_lr, fuse_sum, load_model, save_model, FusionModel
from sslcm.seeding import config_digest
from sslcm.synthgen import SynthRun, run_synthesis, shipped_config
from sslcm.trainer import TrainConfig, load_checkpoint, save_checkpoint, train_head, write_history

log = logging.getLogger("sslcm")


def _read_json(path: str) -> dict:
    if path.startswith("shipped:"):
        return shipped_config(path.split(":", 1)[1])
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _train_config(path: Optional[str], seed: Optional[int]) -> TrainConfig:
    cfg = TrainConfig.from_json(_read_json(path)) if path else TrainConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _tagged_scores(entries: Sequence[str]) -> list[ScoreSet]:
    """Score files given as ``PATH`` (tag = file stem) or ``TAG=PATH``."""
    out = []
    for entry in entries:
        tag, sep, path = entry.partition("=")
        out.append(load_scores(path, tag) if sep else load_scores(entry))
    return out


def _out(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required for this command")
    return Path(args.out)


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    obj = _read_json(args.config)
    if args.seed is not None:
        obj = {**obj, "profile": {**obj["profile"], "seed": args.seed}}
    run = SynthRun.from_json(obj)
    out = _out(args)
    manifests = run_synthesis(run, out, threads=args.threads)
    digest = config_digest(run.to_json())
    with open(out / "synth_run.json", "w", encoding="utf-8") as fh:
        json.dump({"config": run.to_json(), "config_digest": digest}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for tag, m in manifests.items():
        print(f"{tag}\t{len(m)}\t{out / (tag + '.jsonl')}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args.config, args.seed)
    train = load_manifest(args.train, args.backbone)
    val = load_manifest(args.val, args.backbone)
    layer = args.layer if args.kind == "mp" else None
    digest = config_digest({"train_config": cfg.to_json(), "kind": args.kind, "layer": layer,
                            "train": Path(args.train).name, "val": Path(args.val).name})
    result = train_head(train, val, args.kind, layer, cfg)
    out = _out(args)
    save_checkpoint(result.best, out)
    write_history(result.history, args.history or f"{out}.history.csv", digest)
    if args.kind == "mhfa":
        write_weights_csv(extract_layer_weights(result.best), args.weights or f"{out}.weights.csv", digest)
    if args.eval:
        eval_cfg = EvalConfig(cfg.max_eval_frames, cfg.frames_per_second)
        rows = []
        for path in args.eval:
            m = load_manifest(path, args.backbone)
            scores = score_manifest(m, result.best, eval_cfg)
            for corpus in m.corpora():
                sub = m.subset(lambda r, c=corpus: r.corpus == c)
                part = ScoreSet(scores.system_tag, {r.utt_id: scores[r.utt_id] for r in sub})
                rows.append(SweepRow(-1 if layer is None else layer, corpus, compute_eer(part, sub), len(sub)))
        report = LayerSweepReport(args.backbone or train.backbone_tag, rows, cfg.seed, digest)
        write_sweep_csv(report, args.eval_out or f"{out}.eval.csv")
    print(f"best epoch {result.best.epoch} val_loss {result.best.val_loss:.6f} val_eer {result.best.val_eer:.6f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _train_config(args.config, args.seed)
    train = load_manifest(args.train, args.backbone)
    val = load_manifest(args.val, args.backbone)
    evals = [load_manifest(p, args.backbone) for p in args.eval]
    report = layer_sweep(train, val, evals, cfg, threads=args.threads)
    out = _out(args)
    write_sweep_csv(report, out)
    if args.checkpoint_dir:
        ckdir = Path(args.checkpoint_dir)
        ckdir.mkdir(parents=True, exist_ok=True)
        for layer, ckpt in report.checkpoints.items():
            save_checkpoint(ckpt, ckdir / f"mp_layer{layer:02d}.ckpt")
    if args.ood:
        print(f"best single layer: {select_best_single_layer(report, args.ood)}")
    return 0


def cmd_score(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    m = load_manifest(args.manifest, args.backbone)
    cfg = EvalConfig(args.max_frames, args.frames_per_second)
    scores = score_manifest(m, ckpt, cfg, system_tag=Path(args.checkpoint).stem)
    save_scores(scores, _out(args))
    return 0


def cmd_eer(args) -> int:
    scores = load_scores(args.scores)
    m = load_manifest(args.manifest, args.backbone)
    eer = compute_eer(scores, m)
    print(f"{eer:.6f} ({100 * eer:.2f}%)")
    return 0


def cmd_fuse_fit(args) -> int:
    systems = _tagged_scores(args.scores)
    labels = load_manifest(args.manifest, args.backbone)
    digest = config_digest({"mode": args.mode, "prior": args.prior, "reg": args.reg,
                            "systems": [s.system_tag for s in systems]})
    if args.mode == "lr":
        model = fit_fusion(systems, labels, args.prior, args.reg)
    else:
        model = [fit_calibration(s, labels, args.prior, args.reg) for s in systems]
    save_model(model, _out(args), digest)
    return 0


def cmd_fuse_apply(args) -> int:
    model = load_model(args.model)
    systems = _tagged_scores(args.scores)
    if isinstance(model, FusionModel):
        fused = fuse_lr(model, systems)
    elif isinstance(model, list):
        fused = fuse_sum(model, systems)
    else:
        fused = fuse_sum([model], systems)
    save_scores(fused, _out(args))
    return 0


def cmd_report(args) -> int:
    """BSL vs MHFA summary table plus long-format plot data for the layer curves and MHFA weights."""
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    sweeps = [read_sweep_csv(p) for p in args.sweep]
    mhfa = {r.backbone_tag: r for r in (read_sweep_csv(p) for p in (args.mhfa or []))}
    digest = config_digest({"sweep": [Path(p).name for p in args.sweep], "mhfa": [Path(p).name for p in args.mhfa or []],
                            "weights": [_weight_entry_key(w) for w in args.weights or []],
                            "ood": args.ood, "avg": args.avg})
    corpora = args.columns or (sweeps[0].corpora() if sweeps else [])
    avg_tags = args.avg or args.ood
    lines = []
    header = ["backbone", "bsl_layer"]
    for c in corpora:
        header += [f"{c}_bsl", f"{c}_mhfa"]
    header += ["average_bsl", "average_mhfa"]
    lines.append("\t".join(header))
    for rep in sweeps:
        bsl = select_best_single_layer(rep, args.ood) if args.bsl_layer is None else args.bsl_layer
        bsl_eers = {r.corpus: r.eer for r in rep.rows if r.layer == bsl}
        mh = {r.corpus: r.eer for r in mhfa[rep.backbone_tag].rows} if rep.backbone_tag in mhfa else {}
        row = [rep.backbone_tag, str(bsl)]
        for c in corpora:
            row += [_pct(bsl_eers.get(c)), _pct(mh.get(c))]
        row.append(_pct(average_eer(list(bsl_eers.items()), avg_tags)))
        row.append(_pct(average_eer(list(mh.items()), avg_tags)) if mh else "")
        lines.append("\t".join(row))
    with open(out / "table_bsl_mhfa.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_digest={digest}\n")
        fh.write("\n".join(lines) + "\n")
    points = [pt for rep in sweeps for pt in sweep_plot_points(rep)]
    write_plot_tsv(points, out / "plot_layer_eer.tsv", digest)
    wpoints = []
    for entry in args.weights or []:
        tag, _, path = entry.rpartition("=")
        wpoints += weight_plot_points(tag or Path(path).stem, read_weights_csv(path))
    if wpoints:
        write_plot_tsv(wpoints, out / "plot_layer_weights.tsv", digest)
    print("\n".join(lines))
    return 0


def _weight_entry_key(entry: str) -> str:
    tag, _, path = entry.rpartition("=")
    return f"{tag}={Path(path).name}"


def _pct(x: Optional[float]) -> str:
    return "" if x is None else f"{100 * x:.1f}"


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--backbone", default=None, help="backbone tag (default: manifest directory name)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sslcm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic activation corpus")
    p.add_argument("config", help="run config JSON, or shipped:<name>.json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train one MP or MHFA head")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--kind", choices=["mp", "mhfa"], required=True)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--config", default=None, help="TrainConfig JSON")
    p.add_argument("--history", default=None)
    p.add_argument("--weights", default=None, help="layer-weight CSV (mhfa)")
    p.add_argument("--eval", nargs="*", default=[], help="manifests to score after training")
    p.add_argument("--eval-out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common], help="train an MP probe per layer")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--eval", nargs="+", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--ood", nargs="*", default=[], help="corpus tags used to pick the best single layer")
    p.add_argument("--checkpoint-dir", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("score", parents=[common], help="score a manifest with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--max-frames", type=int, default=1500)
    p.add_argument("--frames-per-second", type=int, default=50)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eer", parents=[common], help="EER of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eer)

    p = sub.add_parser("fuse-fit", parents=[common], help="fit LR fusion or per-system calibration")
    p.add_argument("--scores", nargs="+", required=True, help="PATH or TAG=PATH")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=["lr", "sum"], default="lr")
    p.add_argument("--prior", type=float, default=0.5)
    p.add_argument("--reg", type=float, default=1e-6)
    p.set_defaults(func=cmd_fuse_fit)

    p = sub.add_parser("fuse-apply", parents=[common], help="apply a fusion/calibration model")
    p.add_argument("--model", required=True)
    p.add_argument("--scores", nargs="+", required=True, help="PATH or TAG=PATH")
    p.set_defaults(func=cmd_fuse_apply)

    p = sub.add_parser("report", parents=[common], help="BSL/MHFA table and plot data")
    p.add_argument("--sweep", nargs="+", required=True)
    p.add_argument("--mhfa", nargs="*", default=[], help="MHFA eval CSVs (from train --eval)")
    p.add_argument("--weights", nargs="*", default=[], help="TAG=weights.csv")
    p.add_argument("--ood", nargs="+", required=True)
    p.add_argument("--avg", nargs="*", default=None, help="corpora averaged (default: --ood)")
    p.add_argument("--columns", nargs="*", default=None)
    p.add_argument("--bsl-layer", type=int, default=None, help="fixed layer instead of OOD argmin")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except SslcmError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
