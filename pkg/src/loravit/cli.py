"""Command-line surface: data generation, training, evaluation, the
three experiment harnesses, and the verification commands.

Exit codes: 0 success, 1 usage or configuration problems, 2 data
integrity problems, 3 numeric failures. Tables go to stdout; every
writing command also drops its fully resolved config next to its
outputs. Diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .autograd import Tensor
from .config import RunConfig, format_config, load_config, write_resolved_config
from .data import Quality, build_dataset, read_dataset, write_dataset
from .errors import (ConfigError, ContractError, IntegrityError, LoravitError,
                     MetricError, NumericError, OracleError, ParseError,
                     ProtocolError, ShapeError)
from .lora import freeze_backbone, inject, trainable_parameter_count
from .losses import LossConfig
from .metrics import report_from_scores
from .train import (GRADCHECK_CONFIG, TrainConfig, ablation_run,
                    cross_dataset_protocol, cross_manipulation_protocol, evaluate,
                    model_gradient_check, train)
from .vit import init_model, load_checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GRADCHECK_TOLERANCE = 1e-4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _echo(text: str):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _diag(text: str):
    sys.stderr.write(text + "\n")


def _ensure_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _resolve(args) -> RunConfig:
    return load_config(getattr(args, "config", None), getattr(args, "set", None))


def _variant_for(cfg: RunConfig) -> str:
    return "lora_scl" if cfg.lora_enabled else "head_only"


def cmd_gen_data(args) -> int:
    cfg = load_config(args.spec, args.set)
    out = _ensure_out(args.out)
    total = 0
    for quality in cfg.data.qualities:
        for domain in range(cfg.data.domains):
            spec = cfg.dataset_spec(quality, domain)
            samples = build_dataset(spec, cfg.data.families)
            target = os.path.join(out, quality.value.lower(), f"domain{domain}")
            write_dataset(target, samples)
            total += len(samples)
            _echo(f"wrote {len(samples)} samples to {target}")
    write_resolved_config(cfg, os.path.join(out, "config.resolved"))
    _echo(f"generated {total} samples under {out}")
    return EXIT_OK


def _fit_from_config(cfg: RunConfig, samples, out_dir=None):
    model = init_model(cfg.model)
    if cfg.lora_enabled:
        adapters = inject(model, cfg.train.lora, freeze_head=cfg.train.freeze_head)
    else:
        adapters = None
        if cfg.train.full_finetune_baseline:
            model.set_all_trainable(True)
        else:
            freeze_backbone(model, train_head=True)
    log = train(model, adapters, samples, cfg.train, out_dir=out_dir)
    return model, adapters, log


def _metrics_csv(report) -> str:
    return ("auc,acc,n_pos,n_neg\n"
            f"{report.auc!r},{report.acc!r},{report.n_pos},{report.n_neg}\n")


def cmd_train(args) -> int:
    cfg = _resolve(args)
    samples = read_dataset(args.data)
    out = _ensure_out(args.out)
    model, adapters, _log = _fit_from_config(cfg, samples, out_dir=out)
    write_resolved_config(cfg, os.path.join(out, "config.resolved"))
    scores, labels = evaluate(model, adapters, samples)
    report = report_from_scores(scores, labels, tag="train-data")
    csv = _metrics_csv(report)
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv)
    _echo(csv)
    return EXIT_OK


def cmd_eval(args) -> int:
    config_path = args.config
    if config_path is None:
        config_path = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                   "config.resolved")
        if not os.path.exists(config_path):
            raise IntegrityError(
                f"no config found at {config_path}; pass --config explicitly"
            )
    cfg = load_config(config_path, args.set)
    if not os.path.exists(args.checkpoint):
        raise IntegrityError(f"missing checkpoint {args.checkpoint}")
    model, adapters = load_checkpoint(args.checkpoint, cfg.model)
    samples = read_dataset(args.data)
    scores, labels = evaluate(model, adapters, samples)
    report = report_from_scores(scores, labels, tag="eval")
    _echo(_metrics_csv(report))
    return EXIT_OK


def cmd_xmanip(args) -> int:
    cfg = _resolve(args)
    quality = Quality.LQ if args.quality.upper() == "LQ" else Quality.HQ
    spec = cfg.dataset_spec(quality, 0)
    out_path = None
    if args.out:
        out = _ensure_out(args.out)
        out_path = os.path.join(out, f"xmanip_{quality.value.lower()}.csv")
        write_resolved_config(cfg, os.path.join(out, "config.resolved"))
    reports, avg = cross_manipulation_protocol(
        cfg.model, cfg.train, spec, quality,
        variant=_variant_for(cfg), out_path=out_path)
    from .train import reports_to_csv

    _echo(reports_to_csv(reports, avg))
    return EXIT_OK


def cmd_xdataset(args) -> int:
    cfg = _resolve(args)
    n_domains = cfg.data.domains - 1
    if n_domains < 1:
        raise ConfigError("cross-dataset evaluation needs data.domains >= 2")
    spec = cfg.dataset_spec(cfg.data.qualities[0], 0)
    out_path = None
    if args.out:
        out = _ensure_out(args.out)
        out_path = os.path.join(out, "xdataset.csv")
        write_resolved_config(cfg, os.path.join(out, "config.resolved"))
    reports, avg = cross_dataset_protocol(
        cfg.model, cfg.train, spec, n_domains=n_domains,
        variant=_variant_for(cfg), out_path=out_path)
    header = ",".join(r.tag for r in reports) + ",average"
    row = ",".join(repr(r.auc) for r in reports) + f",{avg.auc!r}"
    _echo(header + "\n" + row)
    return EXIT_OK


def _ablation_variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant == "head_only":
        train_cfg = replace(cfg.train, loss=replace(cfg.train.loss, lam=0.0))
        return replace(cfg, lora_enabled=False, train=train_cfg)
    if variant == "lora":
        train_cfg = replace(cfg.train, loss=replace(cfg.train.loss, lam=0.0))
        return replace(cfg, lora_enabled=True, train=train_cfg)
    return replace(cfg, lora_enabled=True)


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    spec = cfg.dataset_spec(Quality.LQ, 0)
    out_path = None
    if args.out:
        out = _ensure_out(args.out)
        out_path = os.path.join(out, "ablation.csv")
        write_resolved_config(cfg, os.path.join(out, "config.resolved"))
        for variant in ("head_only", "lora", "lora_scl"):
            write_resolved_config(
                _ablation_variant_config(cfg, variant),
                os.path.join(out, f"config_{variant}.resolved"))
    results = ablation_run(cfg.model, cfg.train, spec, out_path=out_path)
    lines = ["configuration,auc,acc"]
    for variant, (_reports, avg) in results.items():
        lines.append(f"{variant},{avg.auc!r},{avg.acc!r}")
    _echo("\n".join(lines))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _resolve(args)
    model_cfg = replace(GRADCHECK_CONFIG, seed=cfg.model.seed)
    model = init_model(model_cfg, dtype=np.float64)
    rank = min(cfg.train.lora.rank, model_cfg.embed_dim - 1)
    adapters = inject(model, replace(cfg.train.lora, rank=rank),
                      freeze_head=cfg.train.freeze_head)
    rng = np.random.default_rng(cfg.train.seed)
    images = Tensor(rng.uniform(0, 1, size=(4, 1, model_cfg.image_size,
                                            model_cfg.image_size)), dtype=np.float64)
    labels = np.array([1, 0, 1, 0])
    loss_cfg = LossConfig(lam=cfg.train.loss.lam, margin=cfg.train.loss.margin)
    errors = model_gradient_check(model, adapters, images, labels, loss_cfg)
    failures = []
    for name in sorted(errors):
        status = "PASS" if errors[name] < GRADCHECK_TOLERANCE else "FAIL"
        _echo(f"{status} {name} rel_err={errors[name]:.3e}")
        if status == "FAIL":
            failures.append(name)
    if failures:
        _diag(f"gradient check failed for: {', '.join(failures)}")
        return EXIT_NUMERIC
    _echo(f"all {len(errors)} trainable parameters pass at {GRADCHECK_TOLERANCE:g}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    cfg = _resolve(args)
    model = init_model(cfg.model)
    adapters = inject(model, cfg.train.lora,
                      freeze_head=cfg.train.freeze_head) if cfg.lora_enabled else None
    if adapters is None:
        freeze_backbone(model, train_head=True)
    report = trainable_parameter_count(model, adapters)
    d = cfg.model.embed_dim
    _echo(f"trainable={report.trainable}")
    _echo(f"frozen={report.frozen}")
    _echo(f"per_projection_adapter={report.per_projection_adapter}  # r(D+d), D=d={d}")
    _echo(f"per_projection_dense={report.per_projection_dense}  # D*d")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="loravit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name)
        for flag, kwargs in flags.items():
            p.add_argument(flag, **kwargs)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (flag wins over file)")
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data,
        **{"--spec": dict(required=False, default=None, help="key=value dataset spec file"),
           "--out": dict(required=True, help="output directory")})
    add("train", cmd_train,
        **{"--config": dict(default=None), "--data": dict(required=True),
           "--out": dict(required=True)})
    add("eval", cmd_eval,
        **{"--checkpoint": dict(required=True), "--data": dict(required=True),
           "--config": dict(default=None)})
    add("xmanip", cmd_xmanip,
        **{"--config": dict(default=None), "--out": dict(default=None),
           "--quality": dict(default="HQ", choices=["HQ", "LQ", "hq", "lq"])})
    add("xdataset", cmd_xdataset,
        **{"--config": dict(default=None), "--out": dict(default=None)})
    add("ablate", cmd_ablate,
        **{"--config": dict(default=None), "--out": dict(default=None)})
    add("gradcheck", cmd_gradcheck, **{"--config": dict(default=None)})
    add("param-count", cmd_param_count, **{"--config": dict(default=None)})
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        _diag(f"usage error: {exc}")
        return EXIT_USAGE
    except (ConfigError, ContractError, ProtocolError, MetricError, ShapeError) as exc:
        _diag(f"error: {exc}")
        return EXIT_USAGE
    except (ParseError, IntegrityError) as exc:
        _diag(f"data error: {exc}")
        return EXIT_DATA
    except FileNotFoundError as exc:
        _diag(f"data error: {exc}")
        return EXIT_DATA
    except (NumericError, OracleError) as exc:
        _diag(f"numeric error: {exc}")
        return EXIT_NUMERIC
    except LoravitError as exc:
        _diag(f"error: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
