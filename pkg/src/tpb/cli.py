"""Command-line surface.

Grammar::

    tpb <pretrain|build-bank|meta-train|fine-tune|evaluate|generate-data|sweep-k>
        [--config FILE] [--seed INT] [--deterministic] [--out PATH] ...

Exit codes: 0 success, 2 configuration error, 3 missing/inconsistent
dependency. ``TPB_DATA_DIR`` supplies the default corpus directory.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import PipelineConfig, load_config_file
from .errors import ArchiveError, ConfigError, DependencyError, TpbError
from .seeding import enable_deterministic_mode


def _resolve_corpus_dir(value: str | None) -> Path:
    if value:
        return Path(value)
    env = os.environ.get("TPB_DATA_DIR")
    if env:
        return Path(env)
    raise ConfigError("no corpus directory given: pass --corpus/--target or set TPB_DATA_DIR")


def _load_pipeline_config(args, seed_section: str | None = None) -> PipelineConfig:
    tree = load_config_file(args.config) if args.config else {}
    if getattr(args, "seed", None) is not None and seed_section:
        tree.setdefault(seed_section, {})
        if not isinstance(tree[seed_section], dict):
            raise ConfigError(f"config section {seed_section!r} must be a mapping")
        tree[seed_section]["seed"] = args.seed
    return PipelineConfig.from_tree(tree)


def _maybe_deterministic(args, seed: int) -> None:
    if getattr(args, "deterministic", False):
        enable_deterministic_mode(seed)


# ---------------------------------------------------------------------------
# Commands


def cmd_generate_data(args) -> int:
    from .data import generate_corpus
    from .experiment import save_corpus_dir

    cfg = _load_pipeline_config(args, seed_section="data")
    out = Path(args.out) if args.out else _resolve_corpus_dir(None)
    _maybe_deterministic(args, cfg.data.seed)
    save_corpus_dir(out, generate_corpus(cfg.data))
    print(f"wrote corpus to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .autoencoder import pretrain, save_checkpoint
    from .experiment import load_corpus_dir
    from .reporting import render_pretrain_curve

    cfg = _load_pipeline_config(args, seed_section="pretrain")
    _maybe_deterministic(args, cfg.pretrain.seed)
    source, _, _ = load_corpus_dir(_resolve_corpus_dir(args.corpus))
    model, scaler, history = pretrain(source, cfg.pretrain)
    out = Path(args.out)
    save_checkpoint(out, model, scaler, cfg.pretrain, history)
    render_pretrain_curve(out.parent / "reports", history.val_mse)
    print(
        f"wrote encoder to {out} (best epoch {history.best_epoch}, "
        f"val MSE {min(history.val_mse):.6f})"
    )
    return 0


def cmd_build_bank(args) -> int:
    import dataclasses

    from .autoencoder import load_checkpoint
    from .bank import save_bank
    from .experiment import build_bank_from_corpus, load_corpus_dir

    cfg = _load_pipeline_config(args, seed_section="bank")
    bank_cfg = cfg.bank
    if args.k is not None:
        k = args.k if args.k == "auto" else int(args.k)
        bank_cfg = dataclasses.replace(bank_cfg, k=k)
    encoder_path = Path(args.encoder)
    if not encoder_path.exists():
        raise DependencyError(f"encoder checkpoint {encoder_path} not found")
    _maybe_deterministic(args, bank_cfg.seed)
    source, _, _ = load_corpus_dir(_resolve_corpus_dir(args.corpus))
    autoenc, scaler, _ = load_checkpoint(encoder_path)
    bank, info = build_bank_from_corpus(
        source, autoenc, scaler, bank_cfg, cfg.pretrain.T0, cfg.pretrain.P
    )
    save_bank(args.out, bank)
    print(f"wrote bank K={info['k']} silhouette={info['silhouette']:.4f} to {args.out}")
    return 0


def cmd_meta_train(args) -> int:
    from .autoencoder import load_checkpoint
    from .bank import load_bank
    from .experiment import load_corpus_dir, train_forecast_arm
    from .forecaster import save_model
    import dataclasses

    cfg = _load_pipeline_config(args, seed_section="meta")
    seed = args.seed if args.seed is not None else cfg.experiment.seeds[0]
    _maybe_deterministic(args, seed)
    bank_path = Path(args.bank)
    if not bank_path.exists():
        raise DependencyError(f"bank file {bank_path} not found")
    encoder_path = Path(args.encoder)
    if not encoder_path.exists():
        raise DependencyError(f"encoder checkpoint {encoder_path} not found")
    source, target, _ = load_corpus_dir(_resolve_corpus_dir(args.corpus))
    _, scaler, _ = load_checkpoint(encoder_path)
    bank = load_bank(bank_path)
    model_cfg = dataclasses.replace(cfg.model, variant=args.variant)
    model = train_forecast_arm(
        bank, source, target, scaler, model_cfg, cfg.meta, None, seed=seed
    )
    save_model(args.out, model, scaler, bank_path, extra={"train_seed": seed})
    print(f"wrote meta-trained model ({args.variant}) to {args.out}")
    return 0


def cmd_fine_tune(args) -> int:
    from .experiment import load_corpus_dir
    from .forecaster import load_model, save_model
    from .meta import fine_tune
    import dataclasses

    cfg = _load_pipeline_config(args, seed_section="finetune")
    ft_cfg = cfg.finetune
    if args.seed is not None:
        ft_cfg = dataclasses.replace(ft_cfg, seed=args.seed)
    _maybe_deterministic(args, ft_cfg.seed)
    model_path = Path(args.model)
    if not model_path.exists():
        raise DependencyError(f"model checkpoint {model_path} not found")
    model, scaler, header = load_model(model_path)
    _, target, _ = load_corpus_dir(_resolve_corpus_dir(args.target))
    history = fine_tune(model, target, scaler, ft_cfg)
    save_model(
        args.out, model, scaler, header["bank_path"],
        extra={"train_seed": header.get("train_seed", ft_cfg.seed)},
    )
    print(f"fine-tuned for {len(history)} epochs, final loss {history[-1]:.6f}; wrote {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .experiment import MetricReport, evaluate_model, load_corpus_dir, summarize_seeds
    from .forecaster import load_model
    from .reporting import render_variant_comparison, write_metric_report

    cfg = _load_pipeline_config(args)
    horizons = cfg.experiment.horizons
    _maybe_deterministic(args, cfg.data.seed)
    _, _, test = load_corpus_dir(_resolve_corpus_dir(args.corpus))
    reports = []
    for model_path in args.model:
        path = Path(model_path)
        if not path.exists():
            raise DependencyError(f"model checkpoint {path} not found")
        model, scaler, header = load_model(path)
        seed = int(header.get("train_seed", 0))
        result = evaluate_model(model, scaler, test, horizons)
        per_seed = {seed: result}
        reports.append(
            MetricReport(
                variant=model.cfg.variant,
                horizons=horizons,
                per_seed=per_seed,
                summary=summarize_seeds(per_seed, horizons),
            )
        )
    out = Path(args.out)
    metadata = {"models": [str(m) for m in args.model], "horizons": list(horizons)}
    write_metric_report(out, reports, metadata)
    render_variant_comparison(out, reports)
    for rep in reports:
        o = rep.summary["overall"]
        print(
            f"{rep.variant}: rmse={o['rmse']['mean']:.4f} mae={o['mae']['mean']:.4f} "
            f"mape={o['mape']['mean']:.4f}"
        )
    print(f"wrote report to {out}")
    return 0


def cmd_sweep_k(args) -> int:
    from .experiment import sweep_k_experiment

    cfg = _load_pipeline_config(args, seed_section="bank")
    _maybe_deterministic(args, cfg.bank.seed)
    grid = [int(k) for k in args.k_grid] if args.k_grid else None
    rows = sweep_k_experiment(
        cfg, _resolve_corpus_dir(args.corpus), args.encoder, args.out, grid
    )
    for row in rows:
        print(f"K={row['k']}: silhouette={row['silhouette']:.4f} rmse@1={row['rmse']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tpb",
        description="Cross-city few-shot traffic forecasting with a clustered pattern bank.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="YAML config file (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="override the stage seed")
        p.add_argument("--deterministic", action="store_true", help="bit-reproducible mode")
        p.add_argument("--out", required=out_required, help="output path")

    p = sub.add_parser("generate-data", help="synthesize the multi-city corpus")
    common(p, out_required=False)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("pretrain", help="masked-patch autoencoder pre-training")
    common(p)
    p.add_argument("--corpus", help="corpus directory (default: $TPB_DATA_DIR)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("build-bank", help="embed, cluster, persist the pattern bank")
    common(p)
    p.add_argument("--encoder", required=True, help="pre-trained encoder checkpoint")
    p.add_argument("--corpus", help="corpus directory (default: $TPB_DATA_DIR)")
    p.add_argument("--k", help="'auto' (silhouette selection) or an integer")
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("meta-train", help="Reptile meta-training on source cities")
    common(p)
    p.add_argument("--bank", required=True, help="pattern bank file")
    p.add_argument("--encoder", required=True, help="encoder checkpoint (for the scaler)")
    p.add_argument("--corpus", help="corpus directory (default: $TPB_DATA_DIR)")
    p.add_argument(
        "--variant",
        default="full",
        choices=["full", "no_meta", "no_adj", "no_clu_bank"],
        help="model variant to train",
    )
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("fine-tune", help="fine-tune on the few-shot target city")
    common(p)
    p.add_argument("--model", required=True, help="model checkpoint to start from")
    p.add_argument("--target", help="corpus directory holding the target city")
    p.set_defaults(func=cmd_fine_tune)

    p = sub.add_parser("evaluate", help="metric report on the target test span")
    common(p)
    p.add_argument("--model", required=True, action="append", help="model checkpoint (repeatable)")
    p.add_argument("--corpus", help="corpus directory (default: $TPB_DATA_DIR)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-k", help="silhouette vs forecast RMSE across K")
    common(p)
    p.add_argument("--encoder", required=True, help="encoder checkpoint")
    p.add_argument("--corpus", help="corpus directory (default: $TPB_DATA_DIR)")
    p.add_argument("--k-grid", nargs="+", type=int, help="K values to sweep")
    p.set_defaults(func=cmd_sweep_k)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DependencyError, ArchiveError) as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except TpbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
