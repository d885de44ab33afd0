"""Command-line surface tying the modules into reproducible runs.

Commands: scene-gen, train, invert, eval, variance, mix, edit, plot.
Every command accepts --config FILE plus repeatable --set key=value
overrides and writes its fully resolved configuration next to its outputs.
Exit code 0 means the command's postcondition was met. The environment
variable INTERESTYLE_THREADS caps worker thread parallelism.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import imageio
from .config import ConfigError, RunConfig
from .container import ContainerError, load_arrays, save_arrays
from .encoder import rollout
from .evaluation import (apply_edit, compute_direction, EditDirection,
                         masked_metrics, mix_report, variance_report)
from .generator import build_generator, RANGE_NAMES
from .losses import build_proxy
from .regions import BlurSchedule
from .scenes import SceneDataset, make_dataset
from .training import TrainingError, load_checkpoint, train
from .util import atomic_write_bytes

log = logging.getLogger(__name__)

ABLATION_PRESETS = {
    "baseline": {"train.mask_losses": False, "train.use_ind": False, "train.use_unf": False},
    "+mask": {"train.mask_losses": True, "train.use_ind": False, "train.use_unf": False},
    "+ind": {"train.mask_losses": True, "train.use_ind": True, "train.use_unf": False},
    "+unf": {"train.mask_losses": True, "train.use_ind": True, "train.use_unf": True},
}


def _apply_thread_cap():
    cap = os.environ.get("INTERESTYLE_THREADS")
    if cap:
        try:
            torch.set_num_threads(max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"INTERESTYLE_THREADS must be an integer, got {cap!r}")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg.apply_overrides(args.set or [])
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _eval_modules(checkpoint_path):
    bundle = load_checkpoint(checkpoint_path)
    return bundle


def cmd_scene_gen(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.set("scene.seed", args.seed)
    out = _out_dir(args)
    cfg.write_resolved(out)
    generator = build_generator(cfg.generator_config(), seed=cfg["model.seed"])
    manifest = make_dataset(cfg["scene.count"], cfg["scene.seed"], cfg.scene_config(),
                            generator, out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.ablation:
        for key, value in ABLATION_PRESETS[args.ablation].items():
            cfg.set(key, value)
    if args.seed is not None:
        cfg.set("train.model_seed", args.seed)
        cfg.set("train.data_seed", args.seed + 1)
        cfg.set("train.shuffle_seed", args.seed + 2)
    out = _out_dir(args)
    cfg.write_resolved(out)
    dataset = SceneDataset(_find_manifest(args.data))
    checkpoint = train(cfg, dataset, out, resume_from=args.resume)
    print(checkpoint)
    return 0


def _find_manifest(data) -> Path:
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return path


def cmd_invert(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    cfg.write_resolved(out)
    bundle = _eval_modules(args.checkpoint)
    n_iters = args.iters or cfg["eval.n_iters"]
    image = imageio.load_image_png(args.image, dtype=bundle.generator.dtype)
    sched = BlurSchedule(r_max=0.0, n_iters=n_iters)
    with torch.no_grad():
        trace = rollout(image, None, sched, bundle.encoder, bundle.generator,
                        bundle.start_latent)
    imageio.save_image_png(out / "inversion.png", trace.final_output)
    save_arrays(out / "latent.bin", {"w": trace.final_latent.numpy()})
    if args.dump_trace:
        rows = [["iteration", "latent_norm", "delta_norm"]]
        rows.append([0, f"{float(trace.start_latent.norm()):.10g}", ""])
        imageio.save_image_png(out / "trace_iter00.png", trace.start_output)
        for i in range(len(trace)):
            imageio.save_image_png(out / f"trace_iter{i + 1:02d}.png", trace.outputs[i])
            rows.append([i + 1, f"{float(trace.latents[i].norm()):.10g}",
                         f"{float(trace.deltas[i].norm()):.10g}"])
        text = "\n".join(",".join(str(c) for c in row) for row in rows) + "\n"
        atomic_write_bytes(out / "trace_latent_norms.csv", text.encode())
    print(out / "inversion.png")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    cfg.write_resolved(out)
    bundle = _eval_modules(args.checkpoint)
    dataset = SceneDataset(_find_manifest(args.data))
    report = masked_metrics(bundle.encoder, bundle.generator, bundle.proxy,
                            bundle.start_latent, dataset, cfg["eval.split"],
                            args.iters or cfg["eval.n_iters"],
                            max_samples=cfg["eval.max_samples"])
    n_cols = len(report.per_iteration_variance)
    header = (["id", "interest_l2", "interest_perceptual", "full_l2", "full_perceptual",
               "identity"] + [f"variance_{i}" for i in range(n_cols)]
              + [f"iter_l2_{i}" for i in range(n_cols)])
    lines = [",".join(header)]
    for row in report.rows:
        lines.append(",".join(
            [row["id"]] + [f"{row[k]:.10g}" for k in header[1:6]]
            + [f"{v:.10g}" for v in row["variance"]] + [f"{v:.10g}" for v in row["iter_l2"]]))
    summary = report.to_dict()
    lines.append(",".join(
        ["MEAN"] + [f"{summary[k]:.10g}" for k in header[1:6]]
        + [f"{v:.10g}" for v in report.per_iteration_variance]
        + [f"{v:.10g}" for v in report.per_iteration_interest_l2]))
    atomic_write_bytes(out / "metrics.csv", ("\n".join(lines) + "\n").encode())
    atomic_write_bytes(out / "metrics.json", json.dumps(summary, indent=2).encode())
    print(out / "metrics.json")
    return 0


def cmd_variance(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    cfg.write_resolved(out)
    bundle = _eval_modules(args.checkpoint)
    dataset = SceneDataset(_find_manifest(args.data))
    values = variance_report(bundle.encoder, bundle.generator, bundle.start_latent,
                             dataset, cfg["eval.split"], args.iters or cfg["eval.n_iters"],
                             max_samples=cfg["eval.max_samples"])
    lines = ["iteration,mean_variance"]
    lines += [f"{i},{v:.10g}" for i, v in enumerate(values)]
    atomic_write_bytes(out / "variance.csv", ("\n".join(lines) + "\n").encode())
    print(out / "variance.csv")
    return 0


def cmd_mix(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    cfg.write_resolved(out)
    bundle = _eval_modules(args.checkpoint)
    image_a = imageio.load_image_png(args.image_a, dtype=bundle.generator.dtype)
    image_b = imageio.load_image_png(args.image_b, dtype=bundle.generator.dtype)
    result = mix_report(bundle.encoder, bundle.generator, bundle.start_latent,
                        image_a, image_b, args.range, args.iters or cfg["eval.n_iters"],
                        out / f"mix_{args.range}.png")
    save_arrays(out / f"mix_{args.range}_latents.bin",
                {"latent_a": result["latent_a"].numpy(),
                 "latent_b": result["latent_b"].numpy(),
                 "latent_mixed": result["latent_mixed"].numpy()})
    print(result["path"])
    return 0


def cmd_edit(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    cfg.write_resolved(out)
    bundle = _eval_modules(args.checkpoint)
    if args.direction:
        arrays = load_arrays(args.direction)
        direction = EditDirection(direction=torch.from_numpy(arrays["direction"]),
                                  label=args.label or "loaded")
    elif args.from_gt_dim is not None:
        dataset = SceneDataset(_find_manifest(args.data))
        dim = args.from_gt_dim
        latents = [torch.from_numpy(dataset.latents[row["latent_key"]])
                   for row in dataset.rows]
        if not latents:
            raise ValueError("dataset has no latents to build a direction from")
        values = torch.tensor([float(w[:, dim].mean()) for w in latents])
        median = values.median()
        pos = [w for w, v in zip(latents, values) if v > median]
        neg = [w for w, v in zip(latents, values) if v <= median]
        direction = compute_direction(pos, neg, label=args.label or f"gt_dim_{dim}")
        save_arrays(out / "direction.bin", {"direction": direction.direction.numpy()})
    else:
        raise ConfigError("edit needs either --direction FILE or --from-gt-dim K with --data")
    n_iters = args.iters or cfg["eval.n_iters"]
    image = imageio.load_image_png(args.image, dtype=bundle.generator.dtype)
    sched = BlurSchedule(r_max=0.0, n_iters=n_iters)
    with torch.no_grad():
        w = rollout(image, None, sched, bundle.encoder, bundle.generator,
                    bundle.start_latent).final_latent
        edited = apply_edit(w, direction, args.alpha)
        render = bundle.generator.synthesize(edited)
    imageio.save_image_png(out / "edited.png", render)
    save_arrays(out / "edited_latent.bin", {"w": w.numpy(), "w_edited": edited.numpy()})
    print(out / "edited.png")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.csv, newline="") as fh:
        reader = list(csv.reader(fh))
    if len(reader) < 2:
        raise ValueError(f"{args.csv}: need a header row plus at least one data row")
    header, *data = reader

    def to_float(col):
        try:
            return [float(row[col]) for row in data if row[col] != ""]
        except (ValueError, IndexError):
            return None

    x = to_float(0)
    if x is None:
        raise ValueError(f"{args.csv}: first column must be numeric")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    plotted = 0
    for col in range(1, len(header)):
        y = to_float(col)
        if y is not None and len(y) == len(x):
            ax.plot(x, y, label=header[col])
            plotted += 1
    if plotted == 0:
        raise ValueError(f"{args.csv}: no numeric columns to plot against {header[0]!r}")
    ax.set_xlabel(header[0])
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    print(out)
    return 0


def _add_common(p, out_required=True):
    p.add_argument("--config", help="config file (flat key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="primary seed override for this command")
    if out_required:
        p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="interestyle",
        description="Interest-region-focused encoder training for style-based generator inversion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scene-gen", help="generate a synthetic labeled scene dataset")
    _add_common(p)
    p.set_defaults(func=cmd_scene_gen)

    p = sub.add_parser("train", help="train the refinement encoder")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--ablation", choices=sorted(ABLATION_PRESETS),
                   help="preset flag combination")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("invert", help="invert one image with a trained checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--dump-trace", action="store_true",
                   help="write per-iteration renders and latent norms")
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("eval", help="masked metrics over a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("variance", help="per-iteration mean latent variance")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_variance)

    p = sub.add_parser("mix", help="style-mix two inverted images")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--range", required=True, choices=RANGE_NAMES)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("edit", help="apply a linear latent edit to an inverted image")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--direction", help="container file holding a 'direction' array")
    p.add_argument("--from-gt-dim", type=int,
                   help="build the direction by splitting dataset latents on this dimension")
    p.add_argument("--data", help="dataset for --from-gt-dim")
    p.add_argument("--label")
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("plot", help="line plot of numeric CSV columns vs the first column")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_cap()
        return args.func(args)
    except (ConfigError, ContainerError, TrainingError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
