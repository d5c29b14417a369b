"""``gazedet`` command-line entry point.

Settings resolve in three layers: built-in defaults, an optional flat
``key = value`` configuration file (``--config``), then command-line flags.
Every command writes the resolved settings to ``resolved_config.ini`` in its
output directory and logs (with timestamps) to ``run.log``; all other outputs
are byte-identical for identical settings.

Exit codes: 0 success, 1 usage/configuration/generation error, 2 I/O error, 3 missing
input artifact, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import importance as imp
from . import visualization as vis
from .detector import DetectorConfig, forward, load_checkpoint, predict, save_checkpoint, train
from .errors import ConfigurationError, ContractError, DivergenceError, GenerationError
from .synth import SceneConfig, generate_dataset, load_scene_config, load_split, write_dataset

logger = logging.getLogger("gazedet")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MISSING, EXIT_DIVERGED = 0, 1, 2, 3, 4

GENERAL_DEFAULTS = {
    "seed": 0,
    "out": "out",
    "data": "",
    "checkpoint": "",
    "split": "test",
    "n": 1000,
    "epochs": 20,
    "batch_size": 8,
    "lr": 1e-3,
    "roi_side": 0.15,
    "beta": imp.DEFAULT_BETA,
    "gamma": imp.DEFAULT_GAMMA,
    "mode": "post",
    "percentile": vis.DEFAULT_PERCENTILE,
    "metric": "all",
    "thresh": 0.5,
    "frame": "",
    "colormap": "gray",
    "label_rule": "top",
    # scene generation
    "distractor": False,
    "objects_min": 1,
    "objects_max": 4,
    "gaze_noise_std": 0.02,
}
# Detector settings taken from the dataset rather than from the run config.
_FROM_DATA = ("image_size", "patch_size", "n_classes")
DETECTOR_DEFAULTS = {f.name: f.default for f in dataclasses.fields(DetectorConfig)
                     if f.name not in _FROM_DATA and f.name != "gaze_layers"}
DEFAULTS = {**GENERAL_DEFAULTS, **DETECTOR_DEFAULTS}


class MissingArtifact(Exception):
    """An input file or directory that a command needs does not exist."""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# configuration ---------------------------------------------------------------

def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(raw, str):
        text = raw.strip()
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
        try:
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)
        except ValueError as exc:
            raise ConfigurationError(f"{key}: cannot parse {raw!r}") from exc
        return text
    return raw


def read_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` file; ``#`` comments; an optional section header is ignored."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"config file {path} not found")
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text if text.lstrip().startswith("[") else "[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config file {path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    return values


def resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if args.config:
        settings.update(read_config_file(args.config))
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            settings[key] = _coerce(key, value)
    if settings["mode"] not in ("pre", "post"):
        raise ConfigurationError("mode must be 'pre' or 'post'")
    return settings


def write_resolved(settings: dict, out: Path, command: str) -> None:
    lines = [f"# resolved settings for `gazedet {command}`"]
    lines += [f"{k} = {settings[k]}" for k in sorted(settings) if k != "command"]
    (out / "resolved_config.ini").write_text("\n".join(lines) + "\n")


def detector_config(settings: dict, scene: SceneConfig) -> DetectorConfig:
    kwargs = {k: settings[k] for k in DETECTOR_DEFAULTS}
    return DetectorConfig(image_size=scene.image_size, patch_size=scene.patch_size,
                          n_classes=scene.n_classes, **kwargs)


def _prepare_out(settings: dict, command: str) -> Path:
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("gazedet")
    root.handlers = [h for h in root.handlers if not isinstance(h, logging.FileHandler)]
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    write_resolved(settings, out, command)
    return out


def _require_data(settings: dict) -> Path:
    if not settings["data"]:
        raise UsageError("--data is required")
    root = Path(settings["data"])
    if not (root / "scene_config.json").exists():
        raise MissingArtifact(f"no dataset at {root}")
    return root


def _require_checkpoint(settings: dict):
    if not settings["checkpoint"]:
        raise UsageError("--checkpoint is required")
    path = Path(settings["checkpoint"])
    if not path.exists():
        raise MissingArtifact(f"checkpoint {path} not found")
    params, cfg = load_checkpoint(path)
    return params, cfg


def _override_inference(cfg: DetectorConfig, args) -> DetectorConfig:
    """Apply explicitly passed inference flags on top of a checkpoint's config."""
    overrides = {k: getattr(args, k) for k in ("alpha", "lambda1", "lambda2", "lambda3")
                 if getattr(args, k, None) is not None}
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


# commands --------------------------------------------------------------------

def cmd_synth(settings: dict, args) -> int:
    out = _prepare_out(settings, "synth")
    scene = SceneConfig(distractor=settings["distractor"], objects_min=settings["objects_min"],
                        objects_max=settings["objects_max"], gaze_noise_std=settings["gaze_noise_std"],
                        seed=settings["seed"])
    splits = generate_dataset(scene, settings["n"])
    write_dataset(splits, out)
    print(f"wrote {len(splits.train)}/{len(splits.val)}/{len(splits.test)} samples to {out}")
    return EXIT_OK


def cmd_train(settings: dict, args) -> int:
    root = _require_data(settings)
    out = _prepare_out(settings, "train")
    scene = load_scene_config(root)
    cfg = detector_config(settings, scene)
    train_set = load_split(root, "train")
    val_set = load_split(root, "val")
    res = train(train_set, cfg, settings["epochs"], seed=settings["seed"], batch_size=settings["batch_size"],
                lr=settings["lr"], val_set=val_set)
    save_checkpoint(out / "checkpoint.json", res.params, cfg)
    with open(out / "loss_curve.csv", "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        fh.write(f"0,{res.initial_loss!r},\n")
        for row in res.history:
            fh.write(f"{row['epoch']},{row['train_loss']!r},{row.get('val_loss', '')!r}\n")
    final = res.history[-1]["train_loss"] if res.history else res.initial_loss
    print(f"trained {settings['epochs']} epochs, final train loss {final:.4f}; checkpoint at {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_eval(settings: dict, args) -> int:
    params, cfg = _require_checkpoint(settings)
    root = _require_data(settings)
    out = _prepare_out(settings, "eval")
    cfg = _override_inference(cfg, args)
    samples = load_split(root, settings["split"])
    preds = predict(samples, params, cfg)
    result = ev.evaluate(preds, samples, cfg.grid, settings["roi_side"], settings["label_rule"])
    payload = result.to_dict()
    if settings["metric"] == "map":
        payload["map_at_thresh"] = {"thresh": settings["thresh"],
                                    "value": ev.map_at([p.detections for p in preds], ev.ground_truth(samples),
                                                       settings["thresh"])}
    with open(out / "results.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    ev.write_rows_csv(out / "per_class.csv", result.per_class, ["class_id", "n_gt", "ap_50", "ap_75"])
    with open(out / "predictions.jsonl", "w") as fh:
        for p in preds:
            fh.write(json.dumps({"frame_id": p.frame_id, "detections": [d.to_dict() for d in p.detections]},
                                sort_keys=True) + "\n")
    if settings["metric"] == "map":
        print(f"mAP@{settings['thresh']}: {payload['map_at_thresh']['value']:.4f}")
    else:
        print(f"accuracy {result.accuracy:.4f} macro_f1 {result.macro_f1:.4f} "
              f"mAP@0.5 {result.map_50:.4f} mAP@0.75 {result.map_75:.4f} "
              f"alignment {result.attention_alignment:.4f}")
    return EXIT_OK


def _pick_frame(samples, frame_id: str):
    if not frame_id:
        return samples[0]
    for s in samples:
        if s.frame_id == frame_id:
            return s
    raise MissingArtifact(f"frame {frame_id!r} not in split")


def cmd_attn_map(settings: dict, args) -> int:
    params, cfg = _require_checkpoint(settings)
    root = _require_data(settings)
    out = _prepare_out(settings, "attn-map")
    cfg = _override_inference(cfg, args)
    sample = _pick_frame(load_split(root, settings["split"]), settings["frame"])
    if sample.gaze is None:
        raise ContractError(f"frame {sample.frame_id} has no valid gaze")
    from . import numerics as nx
    with nx.no_grad():
        before = forward(sample.frame, None, params, dataclasses.replace(cfg, alpha=0.0))
        after = forward(sample.frame, sample.gaze, params, cfg)
    grid = cfg.grid
    mask = imp.gaze_roi_mask(sample.gaze, grid, settings["roi_side"])
    size = cfg.image_size
    rows = ["layer,head,roi_mean_pre,roi_mean_post"]
    for layer, (m0, m1) in enumerate(zip(before.encoder_maps, after.encoder_maps)):
        s0 = imp.attn_scores(m0.weights[0])
        s1 = imp.attn_scores(m1.weights[0])
        for head in range(cfg.n_heads):
            vmax = max(s0[head].max(), s1[head].max())
            images = {}
            for tag, scores in (("pre", s0[head]), ("post", s1[head])):
                images[tag] = vis.heat_to_image(scores, grid, size, vmax, settings["colormap"])
                vis.save_png(out / f"{sample.frame_id}_{layer}_{head}_{tag}.png", images[tag])
            pixels = vis.roi_pixel_mask(mask, grid, size)
            rows.append(f"{layer},{head},{float(images['pre'][pixels].mean())!r},{float(images['post'][pixels].mean())!r}")
    (out / "roi_heat.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {2 * cfg.n_heads * cfg.n_encoder_layers} heatmaps for frame {sample.frame_id} to {out}")
    return EXIT_OK


def cmd_heads(settings: dict, args) -> int:
    params, cfg = _require_checkpoint(settings)
    root = _require_data(settings)
    out = _prepare_out(settings, "heads")
    samples = [s for s in load_split(root, settings["split"]) if s.gaze is not None]
    if not samples:
        raise ContractError("no frames with valid gaze in the split")
    post, pre = imp.encoder_scores(samples, params, cfg)
    masks = np.stack([imp.gaze_roi_mask(s.gaze, cfg.grid, settings["roi_side"]) for s in samples])
    mode = "post_softmax" if settings["mode"] == "post" else "pre_softmax"
    report = imp.head_report(post, pre, masks, settings["beta"], settings["gamma"], mode)
    report.write_csv(out / "heads.csv")
    sample = _pick_frame(samples, settings["frame"])
    index = samples.index(sample)
    for layer in range(cfg.n_encoder_layers):
        for head in range(cfg.n_heads):
            image = vis.intensity_overlay(sample.frame, post[index, layer, head], cfg.grid, settings["percentile"])
            vis.save_png(out / f"overlay_{sample.frame_id}_{layer}_{head}.png", image)
    print(f"head report for {report.n_images} frames ({mode}) written to {out / 'heads.csv'}")
    return EXIT_OK


def cmd_ablate(settings: dict, args) -> int:
    root = _require_data(settings)
    out = _prepare_out(settings, "ablate")
    scene = load_scene_config(root)
    cfg = detector_config(settings, scene)
    train_set = load_split(root, "train")
    test_set = load_split(root, settings["split"])
    cells = ev.ablation_grid(args.which)
    if args.which == "beta_gamma" and args.beta is not None and args.gamma is not None:
        cells = [({"beta": settings["beta"], "gamma": settings["gamma"]}, {})]
    rows = ev.run_ablation(train_set, test_set, args.which, cfg, seed=settings["seed"],
                           epochs=settings["epochs"], batch_size=settings["batch_size"], lr=settings["lr"],
                           roi_side=settings["roi_side"], cells=cells)
    ev.write_rows_csv(out / f"ablation_{args.which}.csv", rows, ev.ABLATION_COLUMNS[args.which])
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} rows written to {out / f'ablation_{args.which}.csv'} ({failed} failed)")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "attn-map": cmd_attn_map,
            "heads": cmd_heads, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (created if missing)")
    common.add_argument("--data", help="dataset directory written by `synth`")
    common.add_argument("--split", choices=["train", "val", "test"])
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--alpha", type=float, help="gaze bias strength")
    common.add_argument("--lambda1", type=float)
    common.add_argument("--lambda2", type=float)
    common.add_argument("--lambda3", type=float)
    common.add_argument("--roi-side", dest="roi_side", type=float)

    parser = _Parser(prog="gazedet", description="Gaze-guided detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--distractor", action="store_const", const=True)
    p.add_argument("--objects-max", dest="objects_max", type=int)

    sub.add_parser("train", parents=[common], help="train a detector")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--metric", choices=["all", "map"])
    p.add_argument("--thresh", type=float)
    p.add_argument("--label-rule", dest="label_rule", choices=["top", "gaze"])

    p = sub.add_parser("attn-map", parents=[common], help="attention heatmaps before/after the gaze bias")
    p.add_argument("--checkpoint")
    p.add_argument("--frame")
    p.add_argument("--colormap")

    p = sub.add_parser("heads", parents=[common], help="head importance report and overlays")
    p.add_argument("--checkpoint")
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--mode", choices=["pre", "post"])
    p.add_argument("--percentile", type=float)
    p.add_argument("--frame")

    p = sub.add_parser("ablate", parents=[common], help="run an ablation sweep")
    p.add_argument("which", choices=list(ev.ABLATIONS))
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        settings = resolve(args)
        return COMMANDS[args.command](settings, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ContractError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"missing: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
