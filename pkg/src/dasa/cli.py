"""Command-line front end.

Configuration is a flat ``key = value`` file; command-line flags override the
file, which overrides the built-in defaults. Every run writes ``manifest.json``
with the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from . import __version__
from .adapt import AdaptConfig, dasa, write_adapt_trace
from .data import (
    ShiftSpec,
    load_dataset_dir,
    load_image,
    load_mask,
    sample_patches,
    synth_domain_pair,
    write_dataset_dir,
)
from .evaluation import (
    _LAB_STREAM,
    _SRC_STREAM,
    _UNL_STREAM,
    ExperimentPlan,
    MetricReport,
    evaluate_model,
    run_experiment,
    segment_image,
    summary_table,
    tau_sweep,
    write_metrics_csv,
    write_pgm16,
    write_sweep_csv,
)
from .sae_dnn import LabeledBatch, TrainConfig, train_sae_dnn
from .serialize import load_model, save_model

log = logging.getLogger("dasa")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _floats(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _words(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _opt_int(text):
    return None if text in (None, "", "none", "None") else int(text)


def _opt_str(text):
    return None if text in (None, "", "none", "None") else str(text)


@dataclass(frozen=True)
class Key:
    parse: Callable
    default: object
    help: str


KEYS = {
    "seed": Key(int, 0, "global seed"),
    "hidden1": Key(int, 400, "first hidden layer width"),
    "hidden2": Key(int, 100, "second hidden layer width"),
    "patch_side": Key(int, 15, "odd patch side length"),
    "fraction": Key(float, 0.04, "fraction of valid patches sampled per image"),
    "pretrain_lr": Key(float, 0.3, "autoencoder pretraining and adaptation learning rate"),
    "pretrain_epochs": Key(int, 50, "autoencoder pretraining and adaptation epochs"),
    "finetune_lr": Key(float, 0.1, "supervised fine-tuning learning rate"),
    "finetune_epochs": Key(int, 200, "supervised fine-tuning epochs"),
    "batch_size": Key(int, 100, "mini-batch size"),
    "beta": Key(float, 0.1, "sparsity penalty weight"),
    "rho": Key(float, 0.04, "target mean activation"),
    "tau": Key(float, 0.1, "transfer coefficient (saliency threshold)"),
    "saliency_statistic": Key(str, "batch_mean", "batch_mean or per_sample"),
    "output_mode": Key(str, "softmax", "softmax or sigmoid_as_written"),
    "loss": Key(str, "squared", "squared or cross_entropy"),
    "source_dir": Key(_opt_str, None, "source dataset directory"),
    "target_dir": Key(_opt_str, None, "target dataset directory"),
    "model": Key(_opt_str, None, "model file to adapt, evaluate or apply"),
    "image": Key(_opt_str, None, "image to segment"),
    "fov": Key(_opt_str, None, "optional field-of-view mask for segment"),
    "n_source_train": Key(int, 20, "leading source images used for training"),
    "n_target_unlabeled": Key(int, 10, "leading target images used unlabeled"),
    "n_target_labeled": Key(int, 3, "next target images used with labels"),
    "arm": Key(str, "BL1", "arm label when evaluating a single model"),
    "arms": Key(_words, ("SOURCE", "BL1", "BL2", "DASA"), "arms for a full evaluation"),
    "tau_grid": Key(_floats, (0.0, 0.05, 0.1, 0.15, 0.2), "comma-separated tau values"),
    "seeds": Key(_ints, (), "comma-separated run seeds (default: seed)"),
    "n_images": Key(int, 20, "synthetic images per domain"),
    "width": Key(int, 128, "synthetic image width"),
    "height": Key(int, 128, "synthetic image height"),
    "target_seed": Key(_opt_int, None, "seed of the synthetic target draw (default: seed)"),
    "shift_gain": Key(_floats, (1.0, 1.0, 1.0), "per-channel gain of the target shift"),
    "shift_bias": Key(_floats, (0.0, 0.0, 0.0), "per-channel bias of the target shift"),
    "noise_sigma": Key(float, 0.0, "Gaussian noise of the target shift"),
}

# path keys each command reads; all but fov are required
PATH_KEYS = {
    "train-source": ("source_dir",),
    "adapt": ("model", "target_dir"),
    "sweep-tau": ("source_dir", "target_dir"),
    "synth": (),
    "segment": ("model", "image", "fov"),
}


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        out[key] = value
    return out


def resolve_config(file_values: dict, overrides: dict) -> dict:
    cfg = {k: spec.default for k, spec in KEYS.items()}
    for source in (file_values, overrides):
        for key, raw in source.items():
            if key not in KEYS:
                raise UsageError(f"unknown config key {key!r}")
            try:
                cfg[key] = KEYS[key].parse(raw)
            except ValueError as exc:
                raise UsageError(f"bad value for {key}: {raw!r} ({exc})") from exc
    return cfg


def _check_paths(command: str, cfg: dict) -> None:
    for key in _used_paths(command, cfg):
        if cfg[key] is None:
            if key != "fov":
                raise UsageError(f"{command} needs '{key}'")
        elif not Path(cfg[key]).exists():
            raise UsageError(f"{key}: {cfg[key]} does not exist")


def _used_paths(command, cfg):
    if command == "evaluate":
        if cfg["model"] is not None:
            return ("model", "source_dir") if cfg["arm"] == "SOURCE" else ("model", "target_dir")
        return ("source_dir", "target_dir")
    return PATH_KEYS[command]


def train_config(cfg: dict, seed: Optional[int] = None) -> TrainConfig:
    return TrainConfig(
        hidden1=cfg["hidden1"], hidden2=cfg["hidden2"],
        pretrain_lr=cfg["pretrain_lr"], pretrain_epochs=cfg["pretrain_epochs"],
        finetune_lr=cfg["finetune_lr"], finetune_epochs=cfg["finetune_epochs"],
        batch_size=cfg["batch_size"], beta=cfg["beta"], rho=cfg["rho"], tau=cfg["tau"],
        seed=cfg["seed"] if seed is None else seed,
        output_mode=cfg["output_mode"], loss=cfg["loss"],
    )


def adapt_config(cfg: dict, seed: Optional[int] = None) -> AdaptConfig:
    # adaptation reuses the pretraining schedule, as the experiment runners do
    return AdaptConfig.from_train_config(train_config(cfg, seed),
                                         saliency_statistic=cfg["saliency_statistic"])


# ---------------------------------------------------------------- dataset splits

def _source_split(cfg):
    items = load_dataset_dir(cfg["source_dir"])
    n = cfg["n_source_train"]
    if len(items) <= n:
        raise ValueError(f"{cfg['source_dir']}: need more than {n} images to keep a test split")
    return items[:n], items[n:]


def _target_split(cfg):
    items = load_dataset_dir(cfg["target_dir"])
    nu, nl = cfg["n_target_unlabeled"], cfg["n_target_labeled"]
    if len(items) <= nu + nl:
        raise ValueError(f"{cfg['target_dir']}: need more than {nu + nl} images to keep a test split")
    return items[:nu], items[nu:nu + nl], items[nu + nl:]


def _plan(cfg, need_source=True, need_target=True) -> ExperimentPlan:
    src_train, src_test = _source_split(cfg) if need_source else ([], [])
    unl, lab, tst = _target_split(cfg) if need_target else ([], [], [])
    return ExperimentPlan(
        src_train, src_test, unl, lab, tst, train_config(cfg),
        arms=tuple(cfg["arms"]), tau_grid=tuple(cfg["tau_grid"]),
        seeds=tuple(cfg["seeds"]) or (cfg["seed"],), fraction=cfg["fraction"],
        side=cfg["patch_side"], saliency_statistic=cfg["saliency_statistic"],
    )


def _write_trace(values, path, header="epoch,cost"):
    lines = [header] + [f"{e},{float(c)!r}" for e, c in enumerate(values)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- commands

def cmd_train_source(cfg, out: Path) -> list:
    train, _ = _source_split(cfg)
    seed = cfg["seed"]
    ds = sample_patches(train, cfg["fraction"], cfg["patch_side"], seed + _SRC_STREAM, "source")
    if ds.labels is None:
        raise ValueError("source images need vessel masks")
    log.info("training on %d source patches of dim %d", len(ds), ds.patch_dim)
    model, traces = train_sae_dnn(ds, LabeledBatch(ds.patches, ds.labels), train_config(cfg))
    model.meta = {"seed": seed, "n_patches": len(ds)}
    save_model(model, out / "model_source.dasa")
    _write_trace(traces["layer1"], out / "trace_pretrain_layer1.csv")
    _write_trace(traces["layer2"], out / "trace_pretrain_layer2.csv")
    _write_trace(traces["finetune"], out / "trace_finetune.csv")
    return ["model_source.dasa", "trace_pretrain_layer1.csv", "trace_pretrain_layer2.csv",
            "trace_finetune.csv"]


def cmd_adapt(cfg, out: Path) -> list:
    source = load_model(cfg["model"])
    unl, lab, _ = _target_split(cfg)
    seed = cfg["seed"]
    side = cfg["patch_side"]
    if side * side * unl[0].image.channels != source.n_in:
        raise ValueError(f"patch_side {side} does not match model input size {source.n_in}")
    u = sample_patches(unl, cfg["fraction"], side, seed + _UNL_STREAM, "target")
    l = sample_patches(lab, cfg["fraction"], side, seed + _LAB_STREAM, "target")
    if l.labels is None:
        raise ValueError("labeled target images need vessel masks")
    model, traces = dasa(source, u, LabeledBatch(l.patches, l.labels), adapt_config(cfg),
                         train_config(cfg).with_(output_mode=source.output_mode))
    model.meta = {"seed": seed, "tau": cfg["tau"]}
    save_model(model, out / "model_target.dasa")
    write_adapt_trace(traces["adapt"], out / "trace_adapt.csv")
    _write_trace(traces["finetune"], out / "trace_finetune.csv")
    return ["model_target.dasa", "trace_adapt.csv", "trace_finetune.csv"]


def cmd_evaluate(cfg, out: Path) -> list:
    if cfg["model"] is not None:
        model = load_model(cfg["model"])
        arm = cfg["arm"]
        tests = _source_split(cfg)[1] if arm == "SOURCE" else _target_split(cfg)[2]
        reports = {arm: MetricReport.from_rows(evaluate_model(model, tests))}
    else:
        reports = run_experiment(_plan(cfg))
    write_metrics_csv(reports, out / "metrics.csv")
    print(summary_table(reports))
    return ["metrics.csv"]


def cmd_sweep_tau(cfg, out: Path) -> list:
    points = tau_sweep(_plan(cfg))
    write_sweep_csv(points, out / "sweep.csv")
    for p in points:
        print(f"tau={p.tau:<6g} logloss={p.logloss_mean:.4f} ± {p.logloss_std:.4f}")
    return ["sweep.csv"]


def cmd_synth(cfg, out: Path) -> list:
    shift = ShiftSpec(tuple(cfg["shift_gain"]), tuple(cfg["shift_bias"]), cfg["noise_sigma"])
    seed = cfg["seed"]
    tseed = seed if cfg["target_seed"] is None else cfg["target_seed"]
    dims = (cfg["n_images"], cfg["width"], cfg["height"])
    source, target = synth_domain_pair(*dims, seed=seed, shift=shift, min_side=cfg["patch_side"])
    if tseed != seed:
        target = synth_domain_pair(*dims, seed=tseed, shift=shift, min_side=cfg["patch_side"])[1]
    write_dataset_dir(source, out / "source")
    write_dataset_dir(target, out / "target")
    return ["source", "target"]


def cmd_segment(cfg, out: Path) -> list:
    model = load_model(cfg["model"])
    img = load_image(cfg["image"])
    fov = load_mask(cfg["fov"]) if cfg["fov"] else None
    pmap = segment_image(model, img, fov)
    name = f"{Path(cfg['image']).stem}_prob.pgm"
    write_pgm16(pmap, out / name)
    return [name]


COMMANDS = {
    "train-source": (cmd_train_source, "pretrain and fine-tune on the source domain"),
    "adapt": (cmd_adapt, "adapt a source model to the target domain, then fine-tune"),
    "evaluate": (cmd_evaluate, "score one model, or run every arm of the experiment"),
    "sweep-tau": (cmd_sweep_tau, "run the adaptation arm over a grid of tau values"),
    "synth": (cmd_synth, "write a synthetic source/target dataset pair"),
    "segment": (cmd_segment, "write a 16-bit vessel probability map for one image"),
}


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dasa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dasa {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--lr", type=float, help="set every learning rate at once")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        p.add_argument("-v", "--verbose", action="store_true")
        keys = p.add_argument_group("config keys")
        for key, spec in KEYS.items():
            keys.add_argument(f"--{key.replace('_', '-')}", dest=f"key_{key}",
                              default=argparse.SUPPRESS, metavar="V",
                              help=f"{spec.help} (default: {spec.default})")
    return parser


def _overrides(args) -> dict:
    out = {}
    if args.lr is not None:
        for key in ("pretrain_lr", "finetune_lr"):
            out[key] = args.lr
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        out[key] = value
    for name, value in vars(args).items():
        if name.startswith("key_"):
            out[name[4:]] = value
    return out


def _manifest(command, cfg, outputs) -> dict:
    resolved = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}
    return {"command": command, "version": __version__, "seed": cfg["seed"],
            "config": resolved, "outputs": outputs}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_values = parse_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, _overrides(args))
        _check_paths(args.command, cfg)
        # validate hyperparameters before any work
        train_config(cfg)
        adapt_config(cfg)
        ExperimentPlan([], [], [], [], [], arms=tuple(cfg["arms"]), tau_grid=tuple(cfg["tau_grid"]))
    except (UsageError, ValueError, OSError) as exc:
        print(f"dasa {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command][0](cfg, out)
        manifest = _manifest(args.command, cfg, outputs)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except Exception as exc:  # noqa: BLE001 - every pipeline failure maps to one exit code
        log.debug("traceback", exc_info=True)
        print(f"dasa {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
