"""Command line: ``tricod {train,infer,eval,diag} --config PATH [--set key=value]...``"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, FingerprintMismatch, load_into_model
from .config import Config, ConfigError, dumps, load_config, resolve_data_path
from .data import DatasetError, normalization_for
from .metrics import MetricConfig
from .model import build_model

log = logging.getLogger("tricod")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_REFUSED = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tricod", description=__doc__)
    parser.add_argument("command", choices=("train", "infer", "eval", "diag"))
    parser.add_argument("--config", required=True, help="key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config field (repeatable)")
    parser.add_argument("--checkpoint", help="shorthand for --set run.checkpoint=PATH")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_trained(cfg: Config):
    if not cfg.run.checkpoint:
        raise ConfigError("a checkpoint is required (run.checkpoint or --checkpoint)")
    ckpt = Path(cfg.run.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = build_model(cfg.model)
    load_into_model(model, ckpt, cfg.fingerprint())
    return model.to(cfg.run.device)


def cmd_train(cfg: Config) -> int:
    from .train import train

    out = Path(cfg.run.output_dir)
    result = train(cfg, out_dir=out)
    (out / "config.cfg").write_text(dumps(cfg))
    print(f"trained {result.total_iters} iterations; checkpoint {out / 'last.ckpt'}, log {out / 'loss_log.csv'}")
    return EXIT_OK


def _infer(cfg: Config, in_root, out_dir) -> Path:
    from .infer import infer_folder

    model = load_trained(cfg)
    infer_folder(model, in_root, out_dir, cfg.train.main_scale, normalization_for(cfg.model.backbone),
                 debug=cfg.run.dump_debug, device=cfg.run.device)
    return Path(out_dir)


def cmd_infer(cfg: Config) -> int:
    if not cfg.data.infer_root:
        raise ConfigError("data.infer_root is not set")
    out = _infer(cfg, resolve_data_path(cfg.data.infer_root), Path(cfg.run.output_dir) / "pred")
    print(f"predictions written to {out}")
    return EXIT_OK


def cmd_eval(cfg: Config) -> int:
    from .reports import emit_reports

    e = cfg.eval
    gt_dir = e.gt_dir or (cfg.data.test_roots[0] if cfg.data.test_roots else "")
    if not gt_dir:
        raise ConfigError("eval.gt_dir (or data.test_roots) is not set")
    gt_dir = resolve_data_path(gt_dir)
    if e.pred_dir:
        pred_dir = Path(e.pred_dir)
    else:
        pred_dir = _infer(cfg, gt_dir, Path(cfg.run.output_dir) / "pred")
    out = Path(cfg.run.output_dir) / "eval"
    report = emit_reports(pred_dir, gt_dir, MetricConfig(e.beta2, e.num_thresholds, e.sm_alpha), out,
                          histogram_band=e.histogram_band, workers=e.workers)
    print(json.dumps(report.summary(), indent=2))
    return EXIT_OK


def cmd_diag(cfg: Config) -> int:
    from .diagnostics import run_diagnostics

    report = run_diagnostics(cfg)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "diag.json").write_text(report.to_json())
    print(report.to_json())
    for failure in report.failures:
        print(f"FAILED: {failure}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "diag": cmd_diag}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.checkpoint:
        overrides.append(f"run.checkpoint={args.checkpoint}")
    try:
        cfg = load_config(args.config, overrides)
        torch.manual_seed(cfg.train.seed)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"tricod: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FingerprintMismatch as exc:
        print(f"tricod: refusing checkpoint: config fingerprint {exc.expected}, "
              f"checkpoint fingerprint {exc.found}", file=sys.stderr)
        return EXIT_REFUSED
    except CheckpointError as exc:
        print(f"tricod: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except (FileNotFoundError, DatasetError) as exc:
        print(f"tricod: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
