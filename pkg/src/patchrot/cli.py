"""Command-line surface.

Subcommands map 1:1 onto the library operations:

    generate           write pretext samples (PPMs + manifest) for inspection
    pretrain           self-supervised pretraining
    linear-eval        frozen-encoder evaluation
    finetune           full finetuning
    evaluate           top-1 accuracy of a downstream checkpoint
    gradcam            class-evidence heatmaps (grayscale + overlay PPM)
    export-embeddings  CSV of 64-dim latents

Options resolve as defaults < config file (--config, flat key=value lines)
< command-line flags.  Every run prints a resolved-config block; feeding
those lines back as a config file reproduces the run.  Exit codes:
2 usage, 3 data errors, 4 numeric aborts.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, data, imaging, kernels, models, pretext, training
from .errors import DataError, InvalidClassError, NumericError, PatchRotError

CONFIG_BEGIN = "=== resolved-config ==="
CONFIG_END = "=== end-config ==="


def read_config_file(path) -> dict:
    """Flat key=value lines; blank lines and #/=== lines are ignored."""
    out = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith("==="):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}: malformed config line {raw!r}")
        out[key.strip()] = value.strip()
    return out


def print_resolved(command: str, resolved: dict) -> None:
    # unset keys fall back to phase defaults downstream; omitting them keeps
    # the block round-trippable as a config file
    print(CONFIG_BEGIN)
    print(f"command={command}")
    for key in sorted(resolved):
        if resolved[key] is not None:
            print(f"{key}={resolved[key]}")
    print(CONFIG_END)
    sys.stdout.flush()


_CASTS = {"seed": int, "epochs": int, "batch_size": int, "count": int,
          "hidden": int, "index": int, "target_class": int,
          "ratio": float, "lr": float, "momentum": float, "weight_decay": float,
          "stop_at_accuracy": float,
          "timing": lambda v: str(v).lower() in ("1", "true", "yes", "on"),
          "resample_positions": lambda v: str(v).lower() in ("1", "true", "yes", "on")}


def resolve(args, keys) -> dict:
    """Merge config-file values under explicit CLI flags for the given keys."""
    file_values = read_config_file(args.config) if args.config else {}
    resolved = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is None and key in file_values:
            raw = file_values[key]
            value = _CASTS.get(key, str)(raw)
        resolved[key] = value
    return resolved


def _require(resolved, *keys):
    for key in keys:
        if resolved.get(key) is None:
            raise UsageError(f"missing required option --{key.replace('_', '-')}")


class UsageError(Exception):
    pass


def _dataset(spec: str, seed: int) -> data.Dataset:
    return data.load_source(data.parse_source(spec), seed=seed)


def _encoder_spec(name: str) -> models.EncoderSpec:
    return models.EncoderSpec(name)


def _train_config(phase: str, resolved: dict) -> training.TrainConfig:
    maker = {"ssl": training.TrainConfig.ssl,
             "linear-eval": training.TrainConfig.linear_eval,
             "finetune": training.TrainConfig.finetune}[phase]
    overrides = {}
    for key in ("epochs", "batch_size", "lr", "momentum", "weight_decay",
                "seed", "stop_at_accuracy", "timing"):
        if resolved.get(key) is not None:
            overrides[key] = resolved[key]
    return maker(**overrides)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    keys = ("data", "variant", "ratio", "seed", "count", "out", "resample_positions")
    resolved = resolve(args, keys)
    for key, default in (("variant", pretext.PATCH_ROTNET), ("ratio", 0.4), ("seed", 0)):
        if resolved[key] is None:
            resolved[key] = default
    _require(resolved, "data", "out")
    print_resolved("generate", resolved)

    ds = _dataset(resolved["data"], resolved["seed"])
    images = ds.images[: resolved["count"]] if resolved["count"] else ds.images
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    variant = resolved["variant"]
    cfg = pretext.PretextConfig(ratio=resolved["ratio"], rng_seed=resolved["seed"])

    lines = []
    for i, x in enumerate(images):
        rng = pretext.seeding.substream(resolved["seed"], pretext.seeding.PLACEMENT, 0, i)
        if variant == pretext.PATCH_RELNET:
            for pair in pretext.generate_pairs(x, cfg, rng):
                pa = out_dir / f"img{i:04d}_pair{pair.label}_a.ppm"
                pb = out_dir / f"img{i:04d}_pair{pair.label}_b.ppm"
                imaging.write_ppm(pair.image_a, pa)
                imaging.write_ppm(pair.image_b, pb)
                top, left, ph, pw = pair.placement
                lines.append(f"{pa.name}|{pb.name}\t{pair.label}\t{variant}\t{top},{left},{ph},{pw}")
        else:
            samples = (pretext.generate_patched_set(x, cfg, rng)
                       if variant == pretext.PATCH_ROTNET else pretext.generate_rotnet_set(x))
            for s in samples:
                p = out_dir / f"img{i:04d}_class{s.label}.ppm"
                imaging.write_ppm(s.image, p)
                place = ",".join(map(str, s.placement)) if s.placement else "-"
                lines.append(f"{p.name}\t{s.label}\t{variant}\t{place}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("".join(line + "\n" for line in lines))
    print(f"wrote {len(lines)} manifest entries to {manifest}")
    return 0


def cmd_pretrain(args):
    keys = ("data", "variant", "encoder", "ratio", "epochs", "batch_size", "lr",
            "momentum", "weight_decay", "seed", "out", "stop_at_accuracy",
            "timing", "resample_positions")
    resolved = resolve(args, keys)
    for key, default in (("variant", pretext.PATCH_ROTNET), ("encoder", "resnet8"),
                         ("ratio", 0.4), ("seed", 0), ("timing", True),
                         ("resample_positions", True)):
        if resolved[key] is None:
            resolved[key] = default
    _require(resolved, "data", "out")
    print_resolved("pretrain", resolved)

    ds = _dataset(resolved["data"], resolved["seed"])
    cfg = _train_config("ssl", resolved)
    pcfg = pretext.PretextConfig(
        ratio=resolved["ratio"], rng_seed=cfg.seed,
        resample_position_each_epoch=resolved["resample_positions"],
    )
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    model, metrics = training.pretrain_ssl(
        ds, resolved["variant"], _encoder_spec(resolved["encoder"]), cfg,
        pcfg=pcfg, out_dir=out_dir, verbose=True,
    )
    metrics.write_csv(out_dir / "metrics_ssl.csv", timing=cfg.timing)
    print(f"final pretext accuracy={metrics.epoch_accuracy[-1]:.6g}")
    return 0


def _load_pretrained(path, encoder_name, head_kind, seed):
    model = models.SslModel(_encoder_spec(encoder_name), head_kind, seed)
    checkpoint.load_into(model, path)
    return model


def _head_kind_for_checkpoint(path, encoder_name, seed):
    """Try each SSL head kind against the stored architecture hash."""
    stored, _ = checkpoint.load_raw(path)
    for kind in (models.PATCHROT8, models.ROTNET4, models.RELNET4):
        probe = models.SslModel(_encoder_spec(encoder_name), kind, seed)
        if checkpoint.arch_hash(probe.arch_string) == stored:
            return kind
    raise DataError(f"{path}: not an SSL checkpoint for encoder {encoder_name}")


def _eval_phase(args, phase):
    keys = ("checkpoint", "train_data", "test_data", "encoder", "epochs",
            "batch_size", "lr", "momentum", "weight_decay", "seed", "out",
            "hidden", "timing")
    resolved = resolve(args, keys)
    for key, default in (("encoder", "resnet8"), ("seed", 0), ("hidden", 128),
                         ("timing", True)):
        if resolved[key] is None:
            resolved[key] = default
    _require(resolved, "checkpoint", "train_data", "test_data", "out")
    print_resolved(phase, resolved)

    seed = resolved["seed"]
    head_kind = _head_kind_for_checkpoint(resolved["checkpoint"], resolved["encoder"], seed)
    pretrained = _load_pretrained(resolved["checkpoint"], resolved["encoder"], head_kind, seed)
    train_ds = _dataset(resolved["train_data"], seed)
    test_ds = _dataset(resolved["test_data"], seed + 1)
    cfg = _train_config(phase, resolved)
    run = training.linear_eval if phase == "linear-eval" else training.finetune
    model, metrics = run(pretrained, train_ds, test_ds, cfg,
                         hidden=resolved["hidden"], verbose=True)
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = phase.replace("-", "_")
    checkpoint.save(model, out_dir / f"{suffix}.ckpt")
    metrics.write_csv(out_dir / f"metrics_{suffix}.csv", timing=cfg.timing)
    print(f"test_accuracy={metrics.final_test_accuracy:.6g}")
    return 0


def cmd_linear_eval(args):
    return _eval_phase(args, "linear-eval")


def cmd_finetune(args):
    return _eval_phase(args, "finetune")


def cmd_evaluate(args):
    keys = ("checkpoint", "test_data", "encoder", "seed", "hidden", "classes")
    resolved = resolve(args, keys)
    for key, default in (("encoder", "resnet8"), ("seed", 0), ("hidden", 128)):
        if resolved[key] is None:
            resolved[key] = default
    _require(resolved, "checkpoint", "test_data")
    print_resolved("evaluate", resolved)

    test_ds = _dataset(resolved["test_data"], resolved["seed"])
    classes = resolved["classes"] or test_ds.num_classes
    model = models.DownstreamModel(_encoder_spec(resolved["encoder"]), classes,
                                   resolved["seed"], hidden=resolved["hidden"])
    checkpoint.load_into(model, resolved["checkpoint"])
    acc = training.evaluate(model, test_ds)
    print(f"test_accuracy={acc:.6g}")
    return 0


def cmd_gradcam(args):
    keys = ("checkpoint", "image", "data", "index", "encoder", "target_class",
            "seed", "out")
    resolved = resolve(args, keys)
    for key, default in (("encoder", "resnet8"), ("seed", 0), ("index", 0)):
        if resolved[key] is None:
            resolved[key] = default
    _require(resolved, "checkpoint", "target_class", "out")
    if not resolved["image"] and not resolved["data"]:
        raise UsageError("gradcam needs --image or --data")
    print_resolved("gradcam", resolved)

    seed = resolved["seed"]
    head_kind = _head_kind_for_checkpoint(resolved["checkpoint"], resolved["encoder"], seed)
    model = _load_pretrained(resolved["checkpoint"], resolved["encoder"], head_kind, seed)
    if resolved["image"]:
        img = imaging.read_ppm(resolved["image"])
    else:
        img = _dataset(resolved["data"], seed).images[resolved["index"]]
    cam = models.gradcam(model, img, resolved["target_class"], upsample=True)
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    gray = np.repeat(cam[:, :, None], 3, axis=2)
    imaging.write_ppm(gray, out_dir / "heatmap.ppm")
    heat_rgb = np.stack([cam, 0.2 * cam, 1.0 - cam], axis=2)
    overlay = np.clip(0.5 * img + 0.5 * heat_rgb, 0.0, 1.0)
    imaging.write_ppm(overlay, out_dir / "overlay.ppm")
    print(f"wrote heatmap.ppm and overlay.ppm to {out_dir}")
    return 0


def cmd_export_embeddings(args):
    keys = ("checkpoint", "data", "encoder", "seed", "out", "hidden", "classes")
    resolved = resolve(args, keys)
    for key, default in (("encoder", "resnet8"), ("seed", 0), ("hidden", 128)):
        if resolved[key] is None:
            resolved[key] = default
    _require(resolved, "checkpoint", "data", "out")
    print_resolved("export-embeddings", resolved)

    seed = resolved["seed"]
    ds = _dataset(resolved["data"], seed)
    try:
        head_kind = _head_kind_for_checkpoint(resolved["checkpoint"], resolved["encoder"], seed)
        model = _load_pretrained(resolved["checkpoint"], resolved["encoder"], head_kind, seed)
    except DataError:
        classes = resolved["classes"] or ds.num_classes
        model = models.DownstreamModel(_encoder_spec(resolved["encoder"]), classes,
                                       seed, hidden=resolved["hidden"])
        checkpoint.load_into(model, resolved["checkpoint"])
    training.export_embeddings(model, ds, resolved["out"])
    print(f"wrote {len(ds.images)} rows to {resolved['out']}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="root seed (default 0)")
    p.add_argument("--backend", choices=("numba", "numpy"),
                   help="convolution kernel backend (default: PATCHROT_BACKEND or numba)")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--no-timing", dest="timing", action="store_false", default=None,
                   help="write zero wall seconds for byte-reproducible metrics")


def build_parser():
    parser = argparse.ArgumentParser(prog="patchrot",
                                     description="patch-rotation self-supervised pretext tasks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write pretext samples and a manifest")
    _add_common(p)
    p.add_argument("--data", help="cifar:<file> | ppmdir:<dir> | synthetic:n=..,size=..")
    p.add_argument("--variant", choices=pretext.VARIANTS)
    p.add_argument("--ratio", type=float)
    p.add_argument("--count", type=int, help="limit the number of source images")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data")
    p.add_argument("--variant", choices=pretext.VARIANTS)
    p.add_argument("--encoder", choices=("resnet8", "resnet32"))
    p.add_argument("--ratio", type=float)
    p.add_argument("--stop-at-acc", dest="stop_at_accuracy", type=float)
    p.add_argument("--freeze-positions", dest="resample_positions",
                   action="store_false", default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    for name, fn in (("linear-eval", cmd_linear_eval), ("finetune", cmd_finetune)):
        p = sub.add_parser(name, help=f"{name} a pretrained encoder")
        _add_common(p)
        _add_train_flags(p)
        p.add_argument("--checkpoint")
        p.add_argument("--train-data", dest="train_data")
        p.add_argument("--test-data", dest="test_data")
        p.add_argument("--encoder", choices=("resnet8", "resnet32"))
        p.add_argument("--hidden", type=int)
        p.add_argument("--out")
        p.set_defaults(func=fn)

    p = sub.add_parser("evaluate", help="top-1 accuracy of a downstream checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--test-data", dest="test_data")
    p.add_argument("--encoder", choices=("resnet8", "resnet32"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--classes", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcam", help="write heatmap PPMs for one image")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image", help="input PPM path")
    p.add_argument("--data", help="dataset source (uses --index)")
    p.add_argument("--index", type=int)
    p.add_argument("--encoder", choices=("resnet8", "resnet32"))
    p.add_argument("--target-class", dest="target_class", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("export-embeddings", help="CSV of 64-dim latents")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--encoder", choices=("resnet8", "resnet32"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "backend", None):
        kernels.set_backend(args.backend)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
    except InvalidClassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 4
    except PatchRotError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
