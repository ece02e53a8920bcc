"""``analogic`` command line: gen-data, train, translate, interpolate, evaluate, gradcheck.

Exit codes: 0 ok, 2 invalid config, 3 I/O failure, 4 non-finite loss,
5 checkpoint/manifest mismatch. Settings resolve as flag > config file >
default, and the resolved settings land in ``config.resolved.json`` in every
output directory.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .gist_core import DEFAULT_Z, Z_PRESETS, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4, 5
GRADCHECK_TOL = 1e-4

log = logging.getLogger("analogic")


class CliError(Exception):
    def __init__(self, msg, code):
        super().__init__(msg)
        self.code = code


DEFAULTS = {
    "gen-data": {
        "out": None, "size": "64x32", "source_pairs": 256, "target": 256, "heldout": 64,
        "seed": 0, "beta_range": [0.8, 1.2], "airlight_range": [0.8, 0.9],
        "objects": [2, 6], "target_depth_noise": 0.0, "workers": 1, "n_down": 2,
    },
    "train": {
        "data": None, "out": None, "steps": 4000, "seed": 0, "lr": 0.0002, "batch_size": 4,
        "ablate": [], "gan_form": "log", "features": "random", "checkpoint_interval": 1000,
        "base_width": 16, "n_res": 2, "n_down": 2, "gist_channels": 1, "resume": None, "deterministic": True,
        "w_gist_adv": 3.0, "w_cyc_adv": 1.0, "w_sup": 10.0, "w_rec": 10.0, "w_dep": 10.0,
        "w_percep": 10.0,
    },
    "translate": {"ckpt": None, "input": [], "out": None, "z": DEFAULT_Z},
    "interpolate": {"ckpt": None, "input": None, "out": None, "z_steps": 11},
    "evaluate": {"ckpt": None, "data": None, "out": None, "z": DEFAULT_Z, "calibrate": False,
                 "val_count": 16, "sheets": False},
    "gradcheck": {"loss": "all", "seed": 0},
}


def _pair(typ):
    def parse(s):
        parts = s.replace("x", ",").split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected two values, got {s!r}")
        return [typ(p) for p in parts]
    return parse


def _z(s):
    if s in Z_PRESETS:
        return Z_PRESETS[s]
    return float(s)


def build_parser():
    p = argparse.ArgumentParser(prog="analogic", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)
    S = argparse.SUPPRESS

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=S)
        sp.add_argument("--config", help="JSON config file", default=None)
        return sp

    g = cmd("gen-data", "generate the procedural fog corpus")
    g.add_argument("--out")
    g.add_argument("--size", help="WIDTHxHEIGHT")
    g.add_argument("--source-pairs", dest="source_pairs", type=int)
    g.add_argument("--target", type=int)
    g.add_argument("--heldout", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--beta-range", dest="beta_range", type=_pair(float), help="per 10 m, lo,hi")
    g.add_argument("--airlight-range", dest="airlight_range", type=_pair(float))
    g.add_argument("--objects", type=_pair(int), help="min,max objects per scene")
    g.add_argument("--target-depth-noise", dest="target_depth_noise", type=float)
    g.add_argument("--workers", type=int)
    g.add_argument("--n-down", dest="n_down", type=int, help="generator downsampling stages to validate size against")

    t = cmd("train", "train a model")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--ablate", type=lambda s: [x for x in s.split(",") if x],
                   help="comma list of gist_adv,cyc,percep,dep,sup")
    t.add_argument("--gan-form", dest="gan_form", choices=["log", "least_squares"])
    t.add_argument("--features", choices=["random", "vgg"])
    t.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    t.add_argument("--base-width", dest="base_width", type=int)
    t.add_argument("--n-res", dest="n_res", type=int)
    t.add_argument("--n-down", dest="n_down", type=int)
    t.add_argument("--gist-channels", dest="gist_channels", type=int, choices=[1, 3],
                   help="1: one M and one N map shared by all colour channels; 3: per channel")
    t.add_argument("--resume")
    t.add_argument("--fast", dest="deterministic", action="store_false")
    for k in ("w_gist_adv", "w_cyc_adv", "w_sup", "w_rec", "w_dep", "w_percep"):
        t.add_argument("--" + k.replace("_", "-"), dest=k, type=float)

    tr = cmd("translate", "fog images with a trained checkpoint")
    tr.add_argument("--ckpt")
    tr.add_argument("--input", nargs="+", help="PNG files or directories")
    tr.add_argument("--out")
    tr.add_argument("--z", type=_z, help="domainness in [0,1] or a preset name")

    it = cmd("interpolate", "domainness sweep for one image")
    it.add_argument("--ckpt")
    it.add_argument("--input")
    it.add_argument("--out")
    it.add_argument("--z-steps", dest="z_steps", type=int)

    ev = cmd("evaluate", "oracle-grounded zero-shot evaluation")
    ev.add_argument("--ckpt")
    ev.add_argument("--data")
    ev.add_argument("--out")
    ev.add_argument("--z", type=_z)
    ev.add_argument("--calibrate", action="store_true")
    ev.add_argument("--val-count", dest="val_count", type=int)
    ev.add_argument("--sheets", action="store_true")

    gc = cmd("gradcheck", "finite-difference gradient check")
    gc.add_argument("--loss", choices=["all", "sup", "gist_adv", "cyc", "percep", "dep", "full"])
    gc.add_argument("--seed", type=int)
    return p


def resolve(cmd, flags: dict, config_path=None):
    """Merge flag > file > default for one subcommand; unknown file keys are errors."""
    defaults = DEFAULTS[cmd]
    file_cfg = {}
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except OSError as e:
            raise CliError(f"cannot read config file {config_path}: {e}", EXIT_IO)
        except json.JSONDecodeError as e:
            raise CliError(f"config file {config_path} is not valid JSON: {e}", EXIT_CONFIG)
        if not isinstance(raw, dict):
            raise CliError("config file must hold a JSON object", EXIT_CONFIG)
        for k, v in raw.items():
            if k in DEFAULTS:
                if not isinstance(v, dict):
                    raise CliError(f"config section {k!r} must be an object", EXIT_CONFIG)
                if k == cmd:
                    file_cfg.update(v)
            else:
                file_cfg[k] = v
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise CliError(f"unknown config keys for {cmd}: {sorted(unknown)}", EXIT_CONFIG)
    out = dict(defaults)
    out.update(file_cfg)
    out.update({k: v for k, v in flags.items() if k in defaults})
    return out


def _echo_config(out_dir, cmd, cfg):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(
        json.dumps({"command": cmd, **cfg}, indent=1, sort_keys=True, default=str) + "\n")


def _require(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, [], ""):
            raise CliError(f"missing required setting --{k.replace('_', '-')}", EXIT_CONFIG)


def _parse_size(s):
    try:
        w, h = (int(v) for v in str(s).lower().split("x"))
    except ValueError:
        raise CliError(f"size must look like 64x32, got {s!r}", EXIT_CONFIG)
    return w, h


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg):
    from .fog_synth import DatasetConfig, build_dataset

    _require(cfg, "out")
    w, h = _parse_size(cfg["size"])
    f = 2 ** int(cfg["n_down"])
    if w <= 0 or h <= 0 or w % f or h % f:
        raise CliError(f"size {w}x{h} must be positive and divisible by the generator's "
                       f"downsampling factor {f}", EXIT_CONFIG)
    dc = DatasetConfig(
        out_dir=cfg["out"], width=w, height=h, source_pairs=cfg["source_pairs"],
        target_train=cfg["target"], target_heldout=cfg["heldout"], seed=cfg["seed"],
        beta_range=tuple(cfg["beta_range"]), airlight_range=tuple(cfg["airlight_range"]),
        object_count=tuple(cfg["objects"]), target_depth_noise=cfg["target_depth_noise"],
        workers=cfg["workers"],
    )
    try:
        dc.validate()
    except ValueError as e:
        raise CliError(str(e), EXIT_CONFIG)
    m = build_dataset(dc)
    _echo_config(cfg["out"], "gen-data", cfg)
    path = Path(cfg["out"]) / "manifest.json"
    counts = {
        "entries": len(m.entries),
        "source_pairs": len(m.source_pairs),
        "target_train": len(m.target_train),
        "heldout_oracle": len(m.heldout),
    }
    (Path(cfg["out"]) / "counts.json").write_text(json.dumps(counts, indent=1) + "\n")
    print(path)
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return path


def _train_config(cfg):
    from .objectives import LossWeights
    from .trainer import TrainConfig

    from .fog_synth import load_manifest

    m = load_manifest(cfg["data"])
    ws = (m.config.get("width"), m.config.get("height"))
    tc = TrainConfig(
        learning_rate=cfg["lr"], batch_size=cfg["batch_size"], steps=cfg["steps"], seed=cfg["seed"],
        width=ws[0] or 64, height=ws[1] or 32, base_width=cfg["base_width"], n_res=cfg["n_res"],
        n_down=cfg["n_down"], gist_channels=cfg["gist_channels"], checkpoint_interval=cfg["checkpoint_interval"], gan_form=cfg["gan_form"],
        features=cfg["features"], deterministic=cfg["deterministic"],
        weights=LossWeights(**{k: cfg[k] for k in ("w_gist_adv", "w_cyc_adv", "w_sup", "w_rec",
                                                  "w_dep", "w_percep")}),
    )
    tc.ablate(cfg["ablate"])
    tc.validate()
    return m, tc


def cmd_train(cfg):
    from .trainer import NonFiniteLoss, train

    _require(cfg, "data", "out")
    try:
        m, tc = _train_config(cfg)
    except (ValueError, TypeError) as e:
        raise CliError(str(e), EXIT_CONFIG)
    _echo_config(cfg["out"], "train", {**cfg, "effective_weights": tc.effective_weights().__dict__})
    try:
        ckpt = train(m, tc, cfg["out"], resume=cfg["resume"])
    except NonFiniteLoss as e:
        print(f"aborted at step {e.step}: {e}", file=sys.stderr)
        raise CliError(str(e), EXIT_NUMERIC)
    except ShapeError as e:
        raise CliError(str(e), EXIT_MISMATCH)
    print(ckpt)
    return ckpt


def _collect_inputs(items):
    paths = []
    for it in items:
        p = Path(it)
        if p.is_dir():
            paths += sorted(p.glob("*.png"))
        elif p.exists():
            paths.append(p)
        else:
            raise CliError(f"input not found: {p}", EXIT_IO)
    if not paths:
        raise CliError("no input images", EXIT_CONFIG)
    return paths


def _load_ckpt(path):
    from .networks import load_checkpoint

    try:
        return load_checkpoint(path)[0]
    except OSError as e:
        raise CliError(f"cannot read checkpoint {path}: {e}", EXIT_IO)
    except (ValueError, KeyError) as e:
        raise CliError(f"bad checkpoint {path}: {e}", EXIT_MISMATCH)


def cmd_translate(cfg):
    from .fog_synth import load_png
    from .trainer import translate

    _require(cfg, "ckpt", "input", "out")
    if not 0.0 <= cfg["z"] <= 1.0:
        raise CliError(f"z must lie in [0, 1], got {cfg['z']}", EXIT_CONFIG)
    state = _load_ckpt(cfg["ckpt"])
    paths = _collect_inputs(cfg["input"])
    images = np.stack([load_png(p) for p in paths]) if paths else None
    out_dir = Path(cfg["out"])
    try:
        translate(state, images, cfg["z"], out_paths=[out_dir / p.name for p in paths])
    except ShapeError as e:
        raise CliError(str(e), EXIT_MISMATCH)
    except ValueError as e:
        raise CliError(str(e), EXIT_MISMATCH)
    _echo_config(out_dir, "translate", cfg)
    print(f"translated {len(paths)} images into {out_dir}")
    return out_dir


def cmd_interpolate(cfg):
    from .evaluate import sweep_interpolation
    from .fog_synth import load_png, save_png
    from .trainer import translate

    _require(cfg, "ckpt", "input", "out")
    n = int(cfg["z_steps"])
    if n < 2:
        raise CliError("--z-steps must be >= 2", EXIT_CONFIG)
    state = _load_ckpt(cfg["ckpt"])
    image = load_png(_collect_inputs([cfg["input"]])[0])
    zs = [i / (n - 1) for i in range(n)]
    try:
        curve = sweep_interpolation(state, image, zs)
        frames = [translate(state, image, z) for z in zs]
    except ShapeError as e:
        raise CliError(str(e), EXIT_MISMATCH)
    out_dir = Path(cfg["out"])
    save_png(out_dir / "filmstrip.png", np.concatenate(frames, axis=1))
    with open(out_dir / "fog_effect.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["z", "mean_abs_effect"])
        wr.writerows([[f"{z:.6g}", f"{c:.8g}"] for z, c in zip(zs, curve)])
    _echo_config(out_dir, "interpolate", cfg)
    print(out_dir / "filmstrip.png")
    return out_dir


def cmd_evaluate(cfg):
    from .evaluate import SplitLeak, calibrate_z, evaluate_gist_oracle, evaluate_zero_shot
    from .fog_synth import load_manifest

    _require(cfg, "ckpt", "data", "out")
    state = _load_ckpt(cfg["ckpt"])
    try:
        m = load_manifest(cfg["data"])
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load manifest: {e}", EXIT_IO)
    out_dir = Path(cfg["out"])
    held = m.heldout
    z, calibration, entries = cfg["z"], None, held
    metrics_log = Path(cfg["ckpt"]).parent / "metrics.jsonl"
    try:
        if cfg["calibrate"]:
            k = int(cfg["val_count"])
            if not 0 < k < len(held):
                raise CliError("--val-count must leave held-out images for the report", EXIT_CONFIG)
            z, curve = calibrate_z(state, m, held[:k])
            calibration = {"validation_ids": [e.id for e in held[:k]], "curve": curve, "z": z}
            entries = held[k:]
        report = evaluate_zero_shot(state, m, z, entries=entries,
                                    metrics_log=metrics_log if metrics_log.exists() else None,
                                    sheet_dir=out_dir / "sheets" if cfg["sheets"] else None)
        report.calibration = calibration
        mae_src = evaluate_gist_oracle(state, m, split="source")
    except ShapeError as e:
        raise CliError(str(e), EXIT_MISMATCH)
    except SplitLeak as e:
        raise CliError(str(e), EXIT_MISMATCH)
    except ValueError as e:
        raise CliError(str(e), EXIT_CONFIG)
    path = report.write(out_dir / "report.json")
    data = json.loads(path.read_text())
    data["source_gist_M_mae"], data["source_gist_N_mae"] = mae_src
    path.write_text(json.dumps(data, indent=1) + "\n")
    _echo_config(out_dir, "evaluate", cfg)
    print(report.statement)
    print(f"z={report.z:.3f} zero_shot_l1={report.zero_shot_l1:.5f} baseline_l1={report.baseline_l1:.5f} "
          f"gist_M_mae={report.gist_M_mae:.5f} gist_N_mae={report.gist_N_mae:.5f} "
          f"depth_corr={report.depth_corr:.4f}")
    return path


def cmd_gradcheck(cfg):
    from .evaluate import LOSS_NAMES, gradcheck

    names = LOSS_NAMES if cfg["loss"] == "all" else [cfg["loss"]]
    worst = 0.0
    for n in names:
        err = gradcheck(n, seed=cfg["seed"])
        worst = max(worst, err)
        print(f"{n}: max relative error {err:.3e} {'ok' if err < GRADCHECK_TOL else 'FAIL'}")
    return 0 if worst < GRADCHECK_TOL else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "interpolate": cmd_interpolate,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("cmd", "config", "verbose")}
    try:
        cfg = resolve(args.cmd, flags, args.config)
        result = COMMANDS[args.cmd](cfg)
    except CliError as e:
        print(f"analogic {args.cmd}: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"analogic {args.cmd}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    if args.cmd == "gradcheck":
        return result
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
