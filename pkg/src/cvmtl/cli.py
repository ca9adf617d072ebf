"""Operator entry point: dataset synthesis, training, evaluation, reports.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Heavy imports happen inside commands so that --threads can pin the BLAS
thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


@dataclass
class CommandOutcome:
    exit_code: int
    summary: str
    artifacts: list[str] = field(default_factory=list)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def build_parser() -> _Parser:
    parser = _Parser(prog="cvmtl", description=__doc__)
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads; 1 is the deterministic reference mode")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset + manifest")
    p.add_argument("--config", help="run-config JSON (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.add_argument("--seed", type=int, help="override the base scene seed")
    p.add_argument("--scenes", type=int, help="override the scene count")
    p.add_argument("--split", default="train", help="split tag for the manifest records")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoint + trace")
    p.add_argument("--ablation", choices=["full", "no-cf", "no-cvm"])
    p.add_argument("--views", type=int, help="views per sample during training")
    p.add_argument("--depth-candidates", type=_int_list,
                   help="depth candidate count; a comma list trains one model per value")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--split", default="train")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="metric report JSON path (stdout when omitted)")
    p.add_argument("--split", default=None, help="restrict to one split tag")
    p.add_argument("--ablation", choices=["full", "no-cf", "no-cvm"],
                   help="override the ablation recorded in the checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="run single-image inference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="directory for per-task prediction images")
    p.add_argument("--ablation", choices=["full", "no-cf", "no-cvm"])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="tabulate metric reports with ΔMTL vs a baseline")
    p.add_argument("reports", nargs="+", help="metric report JSON files")
    p.add_argument("--baseline", required=True, help="baseline metric report JSON")
    p.add_argument("--out", help="output prefix; writes <prefix>.csv and <prefix>.txt")
    p.set_defaults(func=cmd_report)
    return parser


# -- commands -------------------------------------------------------------------


def _load_config(path):
    from .dataio import RunConfig

    return RunConfig.load(path) if path else RunConfig.from_dict({})


def cmd_synth(args) -> CommandOutcome:
    from .dataio import DatasetManifest, persist_sample
    from .synth import SceneSpec, generate

    cfg = _load_config(args.config)
    s = dict(cfg.section("synth"))
    if args.scenes is not None:
        s["scenes"] = args.scenes
    seed_base = args.seed if args.seed is not None else 0

    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        return CommandOutcome(EXIT_USAGE, f"{out_dir} is not empty; pass --force to overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest(root=out_dir)
    for i in range(int(s["scenes"])):
        spec = SceneSpec(
            seed=seed_base + i,
            num_primitives=int(s["num_primitives"]),
            image_size=tuple(s["image_size"]),
            num_classes=int(s["num_classes"]),
            depth_range=tuple(s["depth_range"]),
            baseline_range=tuple(s["baseline_range"]),
            views=int(s["views"]),
            video_frames=s["video_frames"],
        )
        sample = generate(spec)
        manifest.records.append(persist_sample(sample, out_dir, split=args.split))
    manifest_path = out_dir / "manifest.jsonl"
    manifest.save(manifest_path)
    cfg.save(out_dir / "config.json")
    return CommandOutcome(
        EXIT_OK,
        f"wrote {len(manifest.records)} scenes to {out_dir}",
        [str(manifest_path), str(out_dir / "config.json")],
    )


def _apply_train_overrides(cfg, args) -> dict:
    data = json.loads(json.dumps(cfg.data))  # deep copy
    if args.seed is not None:
        data["training"]["seed"] = args.seed
    if args.views is not None:
        data["training"]["views"] = args.views
    if args.steps is not None:
        data["training"]["steps"] = args.steps
    if args.ablation is not None:
        data["ablation"] = args.ablation
    return data


def cmd_train(args) -> CommandOutcome:
    from .dataio import DatasetManifest, RunConfig
    from .model import ModelConfig
    from .training import TrainConfig, train

    cfg = _load_config(args.config)
    data = _apply_train_overrides(cfg, args)
    manifest = DatasetManifest.load(args.manifest)
    samples = list(manifest.samples(split=args.split))
    if not samples:
        return CommandOutcome(EXIT_DATA, f"no '{args.split}' samples in {args.manifest}")

    sweep = args.depth_candidates or [data["geometry"]["depth_candidates"]]
    multi = len(sweep) > 1
    artifacts = []
    for l_count in sweep:
        run_data = json.loads(json.dumps(data))
        run_data["geometry"]["depth_candidates"] = int(l_count)
        run_cfg = RunConfig.from_dict(run_data)
        out_dir = Path(args.out) / (f"L{l_count}" if multi else "")
        out_dir.mkdir(parents=True, exist_ok=True)
        train(
            samples,
            ModelConfig.from_run_config(run_cfg.data),
            TrainConfig.from_run_config(run_cfg.data),
            ablation=run_data["ablation"],
            out_dir=out_dir,
            config_hash=run_cfg.content_hash,
            log_every=args.log_every,
        )
        run_cfg.save(out_dir / "config.json")
        artifacts += [str(out_dir / "checkpoint.cvck"), str(out_dir / "trace.csv")]
    return CommandOutcome(EXIT_OK, f"trained {len(sweep)} model(s) into {args.out}", artifacts)


def cmd_eval(args) -> CommandOutcome:
    from .dataio import DatasetManifest
    from .training import evaluate, load_checkpoint

    net, meta = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    samples = list(manifest.samples(split=args.split))
    if not samples:
        return CommandOutcome(EXIT_DATA, f"no samples to evaluate in {args.manifest}")
    ablation = args.ablation or meta.get("ablation", "full")
    report = evaluate(net, samples, ablation=ablation)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
        return CommandOutcome(EXIT_OK, f"evaluated {len(samples)} samples", [args.out])
    print(text)
    return CommandOutcome(EXIT_OK, f"evaluated {len(samples)} samples")


def cmd_infer(args) -> CommandOutcome:
    import numpy as np

    from .dataio import load_image, save_image, save_labels, write_pfm
    from .training import infer, load_checkpoint

    net, meta = load_checkpoint(args.checkpoint)
    image = load_image(args.image)
    ablation = args.ablation or meta.get("ablation", "full")
    preds = infer(net, image, ablation=ablation)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    artifacts = []

    def sigmoid(x):
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    for name, arr in preds.items():
        path = out_dir / f"{stem}_{name}.png"
        if name in ("segmentation", "parts"):
            save_labels(path, arr.argmax(axis=0))
        elif name == "depth":
            write_pfm(out_dir / f"{stem}_depth.pfm", arr)
            artifacts.append(str(out_dir / f"{stem}_depth.pfm"))
            save_image(path, np.repeat(arr / max(arr.max(), 1e-9), 3, axis=0))
        elif name == "normal":
            save_image(path, (arr + 1.0) * 0.5)
        else:  # boundary, saliency: probability maps
            save_image(path, np.repeat(sigmoid(arr), 3, axis=0))
        artifacts.append(str(path))
    return CommandOutcome(EXIT_OK, f"wrote {len(artifacts)} prediction files", artifacts)


def cmd_report(args) -> CommandOutcome:
    from .metrics import MetricReport, delta_mtl

    baseline = MetricReport.from_json(Path(args.baseline).read_text())
    rows = []
    for path in args.reports:
        report = MetricReport.from_json(Path(path).read_text())
        rows.append((Path(path).stem, report, delta_mtl(report, baseline)))
    rows.insert(0, (Path(args.baseline).stem + " (baseline)", baseline, 0.0))

    metric_names = list(baseline.metrics)
    header = ["run"] + [
        f"{n} {'↑' if baseline.metrics[n].higher_is_better else '↓'}" for n in metric_names
    ] + ["ΔMTL ↑"]
    table = [header]
    for name, report, dmtl in rows:
        table.append(
            [name]
            + [f"{report.metrics[n].value:.4f}" for n in metric_names]
            + [f"{dmtl:.2f}"]
        )
    widths = [max(len(r[c]) for r in table) for c in range(len(header))]
    text = "\n".join(
        "  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in table
    )
    print(text)

    artifacts = []
    if args.out:
        csv_path = Path(args.out + ".csv")
        csv_path.write_text("\n".join(",".join(row) for row in table) + "\n")
        txt_path = Path(args.out + ".txt")
        txt_path.write_text(text + "\n")
        artifacts = [str(csv_path), str(txt_path)]
    return CommandOutcome(EXIT_OK, f"tabulated {len(rows)} runs", artifacts)


# -- entry point -------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads < 1:
        parser.error(f"--threads must be >= 1, got {args.threads}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))

    from .errors import (
        CheckpointError,
        ConfigError,
        ContractError,
        CvmtlError,
        DataError,
        DomainError,
        TrainingError,
    )

    try:
        outcome = args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, DomainError, ContractError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CvmtlError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA

    if outcome.summary:
        stream = sys.stdout if outcome.exit_code == EXIT_OK else sys.stderr
        print(outcome.summary, file=stream)
    for artifact in outcome.artifacts:
        print(f"  {artifact}")
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
