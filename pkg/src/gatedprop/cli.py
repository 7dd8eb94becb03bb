"""Command line entry point.

Subcommands: gen-data, train, infer, eval, gradcheck, bench. Every
command reads an optional key=value config file (dotted keys with
engine./train./data. prefixes, unknown keys rejected), applies --set
overrides, logs the fully resolved configuration, and writes its
delimited outputs with a rendered figure next to each.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime
failure (non-finite loss, I/O trouble, failed verification).
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import EngineConfig, TrainConfig
from .data import SyntheticSpec, generate_sequence
from .errors import ConfigError, ContractError, GatedPropError
from .idmask import MaskMap

USAGE_ERROR, RUNTIME_ERROR = 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit2(message)


class SystemExit2(Exception):
    """Usage error carrying exit code 1."""


# -- config plumbing -----------------------------------------------------


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if like and isinstance(like[0], (int, float)):
            return tuple(type(like[0])(p) for p in parts)
        return tuple(parts)
    return value


class RunConfig:
    """Merged engine/train/data configuration with strict key checking."""

    def __init__(self):
        self.engine = EngineConfig()
        self.train = TrainConfig()
        self.data = SyntheticSpec()

    _sections = ("engine", "train", "data")

    def apply(self, key: str, value: str):
        if "." not in key:
            raise ConfigError(f"config key {key!r} needs a section prefix "
                              f"({'/'.join(self._sections)})")
        section, name = key.split(".", 1)
        if section not in self._sections:
            raise ConfigError(f"unknown config section {section!r} in {key!r}")
        target = getattr(self, section)
        valid = {f.name for f in fields(target)}
        if name not in valid:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(value, getattr(target, name)))

    def load_file(self, path):
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            self.apply(key, value)

    def validate(self):
        self.engine.validate()
        self.train.validate()
        return self

    def resolved_lines(self):
        lines = []
        for section in self._sections:
            for k, v in asdict(getattr(self, section)).items():
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                lines.append(f"{section}.{k} = {v}")
        return lines


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg.load_file(args.config)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        cfg.apply(key, value)
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.data.seed = args.seed
    cfg.data.max_objects = cfg.engine.max_objects
    return cfg.validate()


def _log_config(cfg: RunConfig, out_dir=None):
    lines = cfg.resolved_lines()
    print("resolved configuration:")
    for line in lines:
        print("  " + line)
    if out_dir is not None:
        Path(out_dir, "resolved_config.txt").write_text("\n".join(lines) + "\n")


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------


def cmd_gen_data(args):
    from . import seqio

    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force)
    _log_config(cfg, out)
    seq = generate_sequence(cfg.data)
    seqio.write_sequence(out, [f for f, _ in seq], [m for _, m in seq],
                         {"width": cfg.data.width, "height": cfg.data.height,
                          "frames": cfg.data.frames, "objects": cfg.data.objects,
                          "seed": cfg.data.seed})
    print(f"wrote {len(seq)} frame/mask pairs to {out}")
    return 0


def cmd_train(args):
    from . import plots, seqio
    from .engine import Engine
    from .train import train

    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force)
    _log_config(cfg, out)
    specs = [SyntheticSpec(**{**asdict(cfg.data), "seed": cfg.data.seed + i})
             for i in range(args.sequences)]
    engine = Engine(cfg.engine, seed=cfg.train.seed)
    result = train(engine, specs, cfg.train, log_every=args.log_every)
    seqio.save_weights(out / "checkpoint.deaotw", engine.named_params())
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, loss in enumerate(result.losses):
            w.writerow([i, f"{loss:.6f}"])
    plots.save_loss_curve(result.losses, out / "loss.png", result.grad_norms)
    print(f"trained {cfg.train.steps} steps in {result.seconds:.1f}s, "
          f"final loss {result.final_loss:.4f}")
    print(f"checkpoint: {out / 'checkpoint.deaotw'}")
    return 0


def cmd_infer(args):
    from . import plots, seqio, tensor
    from .engine import Engine

    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force)
    _log_config(cfg, out)
    frames, masks, meta = seqio.read_sequence(args.sequence)
    if not masks or masks[0] is None:
        raise ContractError(f"{args.sequence}: no reference mask (masks/00000.pgm)")
    engine = Engine(cfg.engine, seed=cfg.train.seed)
    engine.load_state(seqio.load_weights(args.checkpoint))
    state = engine.new_state()
    (out / "masks").mkdir(exist_ok=True)
    if args.overlay:
        (out / "overlays").mkdir(exist_ok=True)
    with tensor.no_grad():
        predictions = []
        for i, frame in enumerate(frames):
            if i == 0 or (masks[i] is not None and args.use_given_masks):
                engine.commit_reference(frame, MaskMap(masks[i]), state)
                pred = MaskMap(masks[i])
            else:
                pred = engine.step(frame, state).mask
            predictions.append(pred)
            seqio.write_pgm(out / "masks" / f"{seqio.frame_name(i)}.pgm", pred.values)
            if args.overlay:
                seqio.write_ppm(out / "overlays" / f"{seqio.frame_name(i)}.ppm",
                                plots.overlay(frame, pred.values))
    if meta:
        seqio.write_meta(out / "meta.txt", meta)
    print(f"wrote {len(predictions)} predicted masks to {out / 'masks'}")
    return 0


def _read_mask_dir(path):
    from . import seqio

    mask_dir = Path(path) / "masks"
    if not mask_dir.is_dir():
        mask_dir = Path(path)
    files = sorted(mask_dir.glob("*.pgm"))
    if not files:
        raise ContractError(f"{path}: no .pgm masks found")
    return [MaskMap(seqio.read_pgm(p)) for p in files]


def cmd_eval(args):
    from concurrent.futures import ThreadPoolExecutor

    from . import plots
    from .metrics import EvalReport, evaluate_sequence, f_score, j_score

    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force)
    _log_config(cfg, out)
    preds = _read_mask_dir(args.pred)
    gts = _read_mask_dir(args.gt)
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions vs {len(gts)} ground-truth masks")
    objects = gts[0].labels()
    if args.jobs > 1 and len(gts) > 2:
        # frames are independent; compute them in parallel and reassemble
        def one(idx):
            return idx, {o: (j_score(preds[idx], gts[idx], o),
                             f_score(preds[idx], gts[idx], o)) for o in objects}

        with ThreadPoolExecutor(max_workers=args.jobs) as ex:
            per_frame = sorted(ex.map(one, range(1, len(gts))))
        report = EvalReport(
            objects,
            {o: float(np.mean([s[o][0] for _, s in per_frame])) for o in objects},
            {o: float(np.mean([s[o][1] for _, s in per_frame])) for o in objects},
            per_frame)
    else:
        report = evaluate_sequence(preds, gts)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scope", "object", "J", "F", "JF"])
        for scope, obj, j, f, jf in report.rows():
            w.writerow([scope, obj, f"{j:.6f}", f"{f:.6f}", f"{jf:.6f}"])
    table = report.format_table()
    (out / "report.txt").write_text(table + "\n")
    plots.save_eval_figure(report, out / "report.png")
    print(table)
    print(f"J&F = {report.jf_mean:.4f}")
    return 0


def cmd_gradcheck(args):
    from . import plots
    from .train import engine_gradcheck

    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force) if args.out else None
    _log_config(cfg, out)
    report = engine_gradcheck(cfg.engine, spatial=(cfg.data.height, cfg.data.width),
                              objects=cfg.data.objects, tolerance=args.tolerance,
                              max_per_tensor=min(args.samples, 64), seed=cfg.train.seed)
    for line in report.format_lines():
        print(line)
    if out is not None:
        (out / "gradcheck.txt").write_text("\n".join(report.format_lines()) + "\n")
        plots.save_gradcheck_figure(report, out / "gradcheck.png")
    return 0 if report.passed else RUNTIME_ERROR


def cmd_bench(args):
    from . import plots
    from .bench import default_cases, run_bench, write_csv

    cfg = _load_config(args)
    out = _prepare_out(args.out, args.force)
    _log_config(cfg, out)
    cases = default_cases(quick=args.quick)
    for case in cases:
        case.repetitions = max(case.repetitions, args.repetitions)
    rows = run_bench(cases, seed=cfg.train.seed,
                     progress=lambda r: print(f"{r.case.label:<28} {r.median_ns/1e6:9.2f} ms "
                                              f"{r.macs/1e6:10.0f} MMAC"))
    write_csv(rows, out / "bench.csv")
    plots.save_bench_figure(rows, out / "bench.png")
    print(f"wrote {out / 'bench.csv'}")
    return 0


# -- argument wiring -----------------------------------------------------


def build_parser():
    p = _Parser(prog="gatedprop",
                description="dual-branch gated propagation for video object segmentation")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="key=value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--seed", type=int, help="seed override for train/data")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--force", action="store_true",
                        help="allow writing into a non-empty output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads where supported")

    sp = sub.add_parser("gen-data", help="write a synthetic sequence directory")
    common(sp)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train on synthetic sequences")
    common(sp)
    sp.add_argument("--sequences", type=int, default=4, help="number of training sequences")
    sp.add_argument("--log-every", type=int, default=100)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("infer", help="propagate a reference mask through a sequence")
    common(sp)
    sp.add_argument("checkpoint", help="weights file")
    sp.add_argument("sequence", help="sequence directory (frames/ + masks/00000.pgm)")
    sp.add_argument("--overlay", action="store_true", help="also write tinted overlay frames")
    sp.add_argument("--use-given-masks", action="store_true",
                    help="re-commit every provided mask as a new reference")
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    common(sp)
    sp.add_argument("pred", help="directory with predicted masks")
    sp.add_argument("gt", help="directory with ground-truth masks")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full engine")
    common(sp, out_required=False)
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.add_argument("--samples", type=int, default=16,
                    help="coordinates checked per tensor (max 64)")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("bench", help="propagation-layer microbenchmarks")
    common(sp)
    sp.add_argument("--quick", action="store_true", help="small desk dimensions")
    sp.add_argument("--repetitions", type=int, default=10)
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit2 as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except GatedPropError as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
