"""Command-line driver: ``train``, ``eval``, ``inspect`` and ``gradcheck``.

Settings come from an optional flat ``key = value`` config file (``--config``)
with command-line flags taking precedence.  Keys use underscores; the same
names with dashes are the flags.  Unknown keys are rejected.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 runtime failure (non-finite loss, I/O).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from . import gradcheck
from .blocks import VariantKind, alpha_for_depth, blocks_per_stage
from .checkpoint import CheckpointError
from .data import PreprocessSpec, load_cifar_dir, synthesize_dataset
from .model import NetworkSpec, build, load_network, parameter_count
from .optim import TrainConfig
from .train import NonFiniteLossError, evaluate, fit

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3
GRADCHECK_MAX_DEPTH = 14


class ConfigError(ValueError):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    text = str(text).strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _opt_float(text):
    return None if text in (None, "", "none", "None") else float(text)


def _opt_str(text):
    return None if text in (None, "", "none", "None") else str(text)


# key -> (parser, default, help)
KEYS: Dict[str, tuple] = {
    "variant": (str, "pyramid-sep-drop", "resnet, resdrop, pyramid, pyramid-drop or pyramid-sep-drop"),
    "depth": (int, 110, "network depth, 6n+2"),
    "alpha": (_opt_float, None, "total widening (default 5*(depth-2)/6)"),
    "p_last": (float, 0.5, "survival probability of the deepest block"),
    "base_width": (int, 16, "stem width"),
    "num_classes": (int, 10, "classes for the synthetic dataset"),
    "models": (int, 1, "number of model replicas K"),
    "epochs": (int, 300, "total training epochs"),
    "batch_size": (int, 128, "mini-batch size (split across replicas)"),
    "lr": (float, 0.5, "initial learning rate"),
    "lr_decay": (float, 0.1, "learning-rate decay factor"),
    "milestones": (_ints, None, "comma-separated decay epochs (default: 50%% and 75%% of epochs)"),
    "weight_decay": (float, 1e-4, "L2 weight decay"),
    "bn_weight_decay": (_bool, True, "apply weight decay to BN gamma/beta"),
    "momentum": (float, 0.9, "Nesterov momentum"),
    "dampening": (float, 0.0, "momentum dampening"),
    "seed": (int, 0, "random seed"),
    "augment": (_bool, True, "random crop + horizontal flip on the training split"),
    "sync": (str, "gradient", "replica sync policy: gradient or periodic"),
    "sync_period": (int, 1, "steps between parameter averaging when sync=periodic"),
    "dataset": (str, "cifar10", "cifar10, cifar100 or synthetic"),
    "data_dir": (_opt_str, None, "directory holding the CIFAR binary files"),
    "synthetic_train": (int, 512, "synthetic training-set size"),
    "synthetic_test": (int, 512, "synthetic test-set size"),
    "synthetic_noise": (float, 0.1, "pixel noise std of synthetic images"),
    "out_dir": (_opt_str, None, "run directory for metrics, checkpoints and resolved config"),
    "checkpoint_every": (int, 25, "epochs between periodic checkpoints"),
    "resume": (_opt_str, None, "training checkpoint to resume from"),
    "checkpoint": (_opt_str, None, "checkpoint to evaluate"),
    "format": (str, "text", "inspect output: text or csv"),
}


def parse_config_text(text: str, origin: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        out[key] = value.strip()
    return out


def resolve(raw: Dict[str, object]) -> Dict[str, object]:
    """Apply defaults and parsers; raises :class:`ConfigError` on bad values."""
    cfg = {}
    for key, (parse, default, _) in KEYS.items():
        value = raw.get(key, default)
        try:
            cfg[key] = parse(value) if value is not None else None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {key}: {value!r} ({exc})") from None
    unknown = set(raw) - set(KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return cfg


def format_config(cfg: Dict[str, object]) -> str:
    lines = []
    for key in KEYS:
        v = cfg.get(key)
        if v is None:
            v = "none"
        elif isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def network_spec(cfg: Dict[str, object]) -> NetworkSpec:
    try:
        variant = VariantKind.parse(cfg["variant"])
        blocks_per_stage(cfg["depth"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    classes = {"cifar10": 10, "cifar100": 100}.get(cfg["dataset"], cfg["num_classes"])
    alpha = cfg["alpha"] if cfg["alpha"] is not None else alpha_for_depth(cfg["depth"])
    try:
        return NetworkSpec(variant, cfg["depth"], alpha, cfg["p_last"], classes, cfg["base_width"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(cfg: Dict[str, object]) -> TrainConfig:
    epochs = cfg["epochs"]
    milestones = cfg["milestones"]
    if milestones is None:
        milestones = tuple(m for m in (epochs // 2, (3 * epochs) // 4) if 0 < m < epochs)
        milestones = tuple(sorted(set(milestones)))
    try:
        return TrainConfig(
            initial_lr=cfg["lr"],
            lr_decay_factor=cfg["lr_decay"],
            milestones=milestones,
            total_epochs=epochs,
            momentum=cfg["momentum"],
            dampening=cfg["dampening"],
            weight_decay=cfg["weight_decay"],
            bn_weight_decay=cfg["bn_weight_decay"],
            batch_size=cfg["batch_size"],
            seed=cfg["seed"],
            model_count=cfg["models"],
            augment=cfg["augment"],
            sync=cfg["sync"],
            sync_period=cfg["sync_period"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_datasets(cfg: Dict[str, object]):
    name = cfg["dataset"]
    if name == "synthetic":
        k = cfg["num_classes"]
        train = synthesize_dataset(k, cfg["synthetic_train"], seed=cfg["seed"], noise=cfg["synthetic_noise"])
        test = synthesize_dataset(
            k, cfg["synthetic_test"], seed=cfg["seed"] + 1, noise=cfg["synthetic_noise"], split="test", prototype_seed=cfg["seed"]
        )
        return train, test
    if name in ("cifar10", "cifar100"):
        if not cfg["data_dir"]:
            raise ConfigError(f"dataset {name} needs --data-dir")
        return load_cifar_dir(cfg["data_dir"], 10 if name == "cifar10" else 100)
    raise ConfigError(f"unknown dataset {name!r}; choose cifar10, cifar100 or synthetic")


def _error_line(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


# -- commands -------------------------------------------------------------------


def cmd_train(cfg: Dict[str, object]) -> int:
    spec = network_spec(cfg)
    tcfg = train_config(cfg)
    if tcfg.batch_size % tcfg.model_count:
        raise ConfigError(f"batch_size {tcfg.batch_size} is not divisible by models {tcfg.model_count}")
    cfg = dict(cfg, alpha=spec.alpha, milestones=tuple(tcfg.milestones))
    train_set, test_set = load_datasets(cfg)
    preprocess = PreprocessSpec.from_training(train_set)
    out = Path(cfg["out_dir"]) if cfg["out_dir"] else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.txt").write_text(format_config(cfg))
        (out / "preprocess.txt").write_text(preprocess.to_manifest())
    _, records = fit(
        spec,
        tcfg,
        train_set,
        test_set,
        preprocess,
        out_dir=out,
        checkpoint_every=cfg["checkpoint_every"],
        resume_from=cfg["resume"],
    )
    for rec in records:
        print(
            f"epoch {rec['epoch']:4d}  lr {rec['lr']:.4g}  loss {rec['train_loss']:.4f}  "
            f"train_err {rec['train_err']:.4f}  test_err {rec['test_err']:.4f}  {rec['seconds']:.1f}s"
        )
    return EXIT_OK


def cmd_eval(cfg: Dict[str, object]) -> int:
    if not cfg["checkpoint"]:
        raise ConfigError("eval needs --checkpoint")
    from .checkpoint import load

    _, _, meta = load(cfg["checkpoint"])
    net = load_network(cfg["checkpoint"])
    if cfg["dataset"] != "synthetic":
        cfg = dict(cfg, num_classes=net.spec.num_classes)
    _, test_set = load_datasets(cfg)
    pre = meta.get("preprocess")
    preprocess = PreprocessSpec.from_manifest(pre) if pre else None
    err = evaluate(net, test_set, preprocess)
    print(json.dumps({"checkpoint": str(cfg["checkpoint"]), "samples": len(test_set), "error_rate": err}))
    return EXIT_OK


def inspect_report(spec: NetworkSpec, fmt: str = "text") -> str:
    widths = spec.block_widths()
    probs = spec.survival_schedule().probabilities
    n = blocks_per_stage(spec.depth)
    buf = io.StringIO()
    if fmt == "text":
        buf.write(f"variant      {spec.variant.value}\n")
        buf.write(f"depth        {spec.depth}\n")
        buf.write(f"alpha        {spec.alpha:g}\n")
        buf.write(f"blocks (N)   {len(widths)}\n")
        buf.write(f"p_last       {spec.p_last:g}\n")
        buf.write(f"final width  {widths[-1]}\n")
        buf.write(f"parameters   {parameter_count(spec)}\n\n")
    elif fmt != "csv":
        raise ConfigError(f"unknown inspect format {fmt!r}; use text or csv")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "stage", "c_in", "c_out", "stride", "survival"])
    c_in = spec.base_width
    for k, (c_out, p) in enumerate(zip(widths, probs)):
        stage, j = divmod(k, n)
        w.writerow([k + 1, stage + 1, c_in, c_out, 2 if (stage and j == 0) else 1, repr(float(p))])
        c_in = c_out
    return buf.getvalue()


def cmd_inspect(cfg: Dict[str, object]) -> int:
    print(inspect_report(network_spec(cfg), cfg["format"]), end="")
    return EXIT_OK


def cmd_gradcheck(cfg: Dict[str, object]) -> int:
    if cfg["depth"] > GRADCHECK_MAX_DEPTH:
        raise ConfigError(f"depth {cfg['depth']} is too large for gradcheck (max {GRADCHECK_MAX_DEPTH})")
    spec = network_spec(cfg)
    net = build(spec, cfg["seed"])
    results = gradcheck.run_all(net, seed=cfg["seed"])
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.component:24s} max_rel_error {r.max_rel_error:.3e}  tol {r.tolerance:.0e}  {status}")
    failed = [r.component for r in results if not r.passed]
    if failed:
        _error_line("verification", f"gradient check failed for: {', '.join(failed)}")
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS: Dict[str, Callable[[Dict[str, object]], int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "gradcheck": cmd_gradcheck,
}

# gradcheck and inspect default to the small toy network
_COMMAND_DEFAULTS = {"gradcheck": {"depth": 8, "alpha": 5}}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pyramidsep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        for key, (_, _, help_text) in KEYS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=help_text)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        raw = dict(_COMMAND_DEFAULTS.get(args.command, {}))
        if args.config:
            raw.update(parse_config_text(Path(args.config).read_text(), args.config))
        raw.update({k: v for k, v in vars(args).items() if k in KEYS and v is not None})
        cfg = resolve(raw)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        _error_line("config", str(exc))
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        _error_line("non-finite-loss", str(exc))
        return EXIT_RUNTIME
    except (OSError, CheckpointError) as exc:
        _error_line("io", str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
