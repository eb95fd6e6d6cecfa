"""Experiment orchestration: stage execution, artifact files, dependency
checks, multi-seed variant runs, K sweeps, and metric reports.

Artifacts live under one working directory::

    workdir/
      corpus/            series files + corpus.json manifest
      encoder.npz        pre-trained autoencoder checkpoint
      bank.tpb           clustered pattern bank (bank_random.tpb for no_clu_bank)
      models/            forecast model checkpoints per (variant, seed)
      reports/           report.csv / report.txt / report.json + figures/
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .archive import file_sha256, load_archive, save_archive
from .autoencoder import (
    MaskedPatchAutoencoder,
    Standardizer,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)
from .bank import (
    PatternBank,
    assign_to_bank,
    build_random_bank,
    corpus_patch_refs,
    embed_corpus,
    kmeans_cosine,
    load_bank,
    save_bank,
    select_k,
    silhouette,
    subsample,
)
from .config import BankBuildConfig, PipelineConfig
from .data import (
    CityCorpus,
    CorpusBundle,
    forecast_arrays,
    generate_corpus,
    load_series,
    prior_adjacency,
    save_series,
    supervised_starts,
)
from .errors import ConfigError, DependencyError
from .forecaster import ForecastConfig, ForecastModel, load_model, save_model
from .meta import FinetuneConfig, MetaConfig, fine_tune, reptile_meta_train
from .metrics import mae, mape, rmse
from .reporting import (
    render_k_sweep,
    render_pretrain_curve,
    render_variant_comparison,
    write_csv,
    write_metric_report,
)
from .seeding import derive_seed, enable_deterministic_mode

STAGES = ("generate-data", "pretrain", "build-bank", "meta-train", "fine-tune", "evaluate")


@dataclass(frozen=True)
class ExperimentPlan:
    stages: tuple[str, ...]
    config: PipelineConfig
    workdir: Path
    deterministic: bool = False

    def __post_init__(self):
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ConfigError(f"unknown stages {unknown}; valid: {list(STAGES)}")
        object.__setattr__(self, "workdir", Path(self.workdir))

    def has(self, stage: str) -> bool:
        return stage in self.stages


@dataclass
class MetricReport:
    variant: str
    horizons: tuple[int, ...]
    per_seed: dict[int, dict]
    summary: dict
    metadata: dict = field(default_factory=dict)


class Paths:
    def __init__(self, workdir: Path):
        self.workdir = Path(workdir)
        self.corpus_dir = self.workdir / "corpus"
        self.encoder = self.workdir / "encoder.npz"
        self.bank = self.workdir / "bank.tpb"
        self.random_bank = self.workdir / "bank_random.tpb"
        self.models = self.workdir / "models"
        self.reports = self.workdir / "reports"

    def model(self, variant: str, seed: int) -> Path:
        return self.models / f"{variant}_seed{seed}.npz"


# ---------------------------------------------------------------------------
# Corpus directory


def save_corpus_dir(dir_path: str | Path, bundle: CorpusBundle) -> Path:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    entries = []
    for corpus in (bundle.source, bundle.target, bundle.test):
        for series in corpus.cities:
            fname = f"{corpus.role}_{series.city_id}.npz"
            save_series(dir_path / fname, series)
            entries.append(
                {
                    "id": series.city_id,
                    "role": corpus.role,
                    "file": fname,
                    "sha256": file_sha256(dir_path / fname),
                }
            )
    manifest = {"kind": "corpus", "cities": entries}
    (dir_path / "corpus.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return dir_path


def load_corpus_dir(dir_path: str | Path) -> tuple[CityCorpus, CityCorpus, CityCorpus]:
    dir_path = Path(dir_path)
    manifest_path = dir_path / "corpus.json"
    if not manifest_path.exists():
        raise DependencyError(f"corpus manifest {manifest_path} not found")
    manifest = json.loads(manifest_path.read_text())
    by_role: dict[str, list] = {"source": [], "target": [], "test": []}
    for entry in manifest["cities"]:
        f = dir_path / entry["file"]
        if not f.exists():
            raise DependencyError(f"corpus file {f} missing (listed in manifest)")
        if file_sha256(f) != entry["sha256"]:
            raise DependencyError(f"corpus file {f} does not match its manifest hash")
        by_role[entry["role"]].append(load_series(f))
    return (
        CityCorpus(by_role["source"], "source"),
        CityCorpus(by_role["target"], "target"),
        CityCorpus(by_role["test"], "test"),
    )


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_model(
    model: ForecastModel,
    scaler: Standardizer,
    test_corpus: CityCorpus,
    horizons: tuple[int, ...] = (1, 3, 6),
    batch_size: int = 32,
) -> dict:
    """Per-horizon and overall RMSE/MAE/MAPE on the test span, original units."""
    cfg = model.cfg
    series = test_corpus.cities[0]
    starts = supervised_starts(series, cfg.T0, cfg.P, cfg.horizon)
    if not starts:
        raise DependencyError("test span too short for a single forecast window")
    inputs, hours, labels = forecast_arrays(series, starts, cfg.T0, cfg.P, cfg.horizon)
    x = torch.as_tensor(scaler.apply(inputs), dtype=torch.float32)
    h = torch.as_tensor(hours)
    model.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            preds.append(model(x[i : i + batch_size], h[i : i + batch_size]).numpy())
    y_hat = scaler.invert(np.concatenate(preds, axis=0))
    out = {
        "overall": {
            "rmse": rmse(labels, y_hat),
            "mae": mae(labels, y_hat),
            "mape": mape(labels, y_hat),
        },
        "horizon": {},
        "n_windows": len(starts),
    }
    for hz in horizons:
        if not 1 <= hz <= cfg.horizon:
            raise ConfigError(f"horizon {hz} outside forecast range 1..{cfg.horizon}")
        y, p = labels[:, :, hz - 1, :], y_hat[:, :, hz - 1, :]
        out["horizon"][hz] = {"rmse": rmse(y, p), "mae": mae(y, p), "mape": mape(y, p)}
    return out


def summarize_seeds(per_seed: dict[int, dict], horizons: tuple[int, ...]) -> dict:
    def stat(values):
        arr = np.array(values, dtype=float)
        return {"mean": float(arr.mean()), "std": float(arr.std())}

    metrics = ("rmse", "mae", "mape")
    return {
        "overall": {m: stat([r["overall"][m] for r in per_seed.values()]) for m in metrics},
        "horizon": {
            h: {m: stat([r["horizon"][h][m] for r in per_seed.values()]) for m in metrics}
            for h in horizons
        },
    }


# ---------------------------------------------------------------------------
# Stage helpers


def config_fingerprint(cfg: PipelineConfig) -> str:
    def clean(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: clean(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, np.ndarray):
            return hashlib.sha256(np.ascontiguousarray(obj).tobytes()).hexdigest()
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        return obj

    blob = json.dumps(clean(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def build_bank_from_corpus(
    source: CityCorpus,
    encoder,
    scaler: Standardizer,
    cfg: BankBuildConfig,
    T0: int = 12,
    P: int = 24,
) -> tuple[PatternBank, dict]:
    """Embed, subsample, choose K (fixed or by silhouette), cluster."""
    embeddings = embed_corpus(source, encoder.encoder if hasattr(encoder, "encoder") else encoder, scaler, T0, P)
    sub = subsample(embeddings, cfg.sample_ratio, np.random.default_rng(cfg.seed))
    info: dict = {"n_embedded": int(embeddings.shape[0]), "n_clustered": int(sub.shape[0])}
    if cfg.k == "auto":
        chosen_k, scores = select_k(
            sub, list(cfg.k_grid), rng=np.random.default_rng(derive_seed(cfg.seed, "select_k")),
            n_init=cfg.n_init, max_iter=cfg.max_iter, tol=cfg.tol,
        )
        info["k_scores"] = {int(k): float(v) for k, v in scores.items()}
    else:
        chosen_k = int(cfg.k)
    bank, assignment = kmeans_cosine(
        sub,
        chosen_k,
        n_init=cfg.n_init,
        max_iter=cfg.max_iter,
        tol=cfg.tol,
        rng=np.random.default_rng(derive_seed(cfg.seed, "kmeans", chosen_k)),
    )
    score = silhouette(sub, assignment.labels)
    provenance = {
        "method": "kmeans_cosine",
        "source_cities": source.city_ids(),
        "sample_ratio": cfg.sample_ratio,
        "seed": cfg.seed,
        "silhouette": score,
        "k": chosen_k,
    }
    bank = PatternBank(
        centroids=bank.centroids,
        metric=bank.metric,
        unit_normalized=bank.unit_normalized,
        provenance=provenance,
    )
    info["k"] = chosen_k
    info["silhouette"] = score
    info["inertia"] = assignment.inertia
    return bank, info


def _node_count(corpora: list[CityCorpus]) -> int:
    counts = {s.node_count for c in corpora for s in c.cities}
    if len(counts) != 1:
        raise ConfigError(
            f"variants with node-indexed parameters need a uniform node count, got {sorted(counts)}"
        )
    return counts.pop()


def train_forecast_arm(
    bank: PatternBank,
    source: CityCorpus,
    target: CityCorpus,
    scaler: Standardizer,
    model_cfg: ForecastConfig,
    meta_cfg: MetaConfig | None,
    finetune_cfg: FinetuneConfig | None,
    seed: int,
) -> ForecastModel:
    """One (variant, seed) training arm: optional meta-training, then fine-tuning."""
    variant = model_cfg.variant
    n_nodes = _node_count([source, target])
    cfg = replace(model_cfg, node_count=n_nodes)
    prior = prior_adjacency(n_nodes) if variant == "no_adj" else None
    torch.manual_seed(derive_seed(seed, "init", variant))
    model = ForecastModel(bank, cfg, prior_adjacency=prior)
    if meta_cfg is not None:
        reptile_meta_train(model, source, scaler, replace(meta_cfg, seed=derive_seed(seed, "meta")))
    if finetune_cfg is not None:
        fine_tune(model, target, scaler, replace(finetune_cfg, seed=derive_seed(seed, "ft")))
    return model


def export_embeddings(
    encoder,
    scaler: Standardizer,
    corpus: CityCorpus,
    path: str | Path,
    bank: PatternBank | None = None,
    T0: int = 12,
    P: int = 24,
) -> Path:
    """Dump every patch embedding (plus nearest-pattern labels) for plotting."""
    enc = encoder.encoder if hasattr(encoder, "encoder") else encoder
    emb = embed_corpus(corpus, enc, scaler, T0, P)
    refs = corpus_patch_refs(corpus, T0, P)
    arrays = {
        "embeddings": emb,
        "city_index": np.array([r.city_index for r in refs], dtype=np.int32),
        "node": np.array([r.node for r in refs], dtype=np.int32),
        "start_step": np.array([r.start_step for r in refs], dtype=np.int32),
        "patch": np.array([r.patch for r in refs], dtype=np.int32),
        "hour_of_week": np.array([r.hour_of_week for r in refs], dtype=np.int32),
    }
    if bank is not None:
        arrays["labels"] = assign_to_bank(emb, bank).astype(np.int32)
    header = {"kind": "embedding_dump", "count": int(emb.shape[0]), "d": int(emb.shape[1])}
    save_archive(path, header, arrays)
    return Path(path)


# ---------------------------------------------------------------------------
# Plan validation and execution


def _validate_plan(plan: ExperimentPlan, paths: Paths) -> None:
    """Every staged step must find its inputs staged earlier or on disk."""
    staged = set(plan.stages)
    cfg = plan.config

    def available(artifact: Path, producer: str) -> bool:
        return producer in staged or artifact.exists()

    missing: list[str] = []
    needs_corpus = staged & {"pretrain", "build-bank", "meta-train", "fine-tune", "evaluate"}
    if needs_corpus and not available(paths.corpus_dir / "corpus.json", "generate-data"):
        missing.append(f"corpus (generate-data not staged, {paths.corpus_dir} missing)")
    for stage, artifact, producer in [
        ("build-bank", paths.encoder, "pretrain"),
        ("meta-train", paths.encoder, "pretrain"),
        ("fine-tune", paths.encoder, "pretrain"),
        ("meta-train", paths.bank, "build-bank"),
        ("fine-tune", paths.bank, "build-bank"),
    ]:
        if stage in staged and not available(artifact, producer):
            missing.append(f"{stage} needs {artifact.name} ({producer} not staged, file missing)")
    if "evaluate" in staged and "fine-tune" not in staged and "meta-train" not in staged:
        for variant in cfg.experiment.variants:
            for seed in cfg.experiment.seeds:
                f = paths.model(variant, seed)
                if not f.exists():
                    missing.append(f"evaluate needs model checkpoint {f}")
    if missing:
        raise DependencyError("; ".join(missing))


def run_experiment(plan: ExperimentPlan) -> list[MetricReport]:
    """Execute the staged pipeline; returns one MetricReport per variant.

    Reports and figures land under ``workdir/reports``; all artifacts carry
    content hashes and are re-validated when a later stage loads them.
    """
    cfg = plan.config
    paths = Paths(plan.workdir)
    if plan.deterministic:
        enable_deterministic_mode(cfg.data.seed)
    _validate_plan(plan, paths)
    timings: dict[str, float] = {}

    if plan.has("generate-data"):
        t0 = time.perf_counter()
        save_corpus_dir(paths.corpus_dir, generate_corpus(cfg.data))
        timings["generate-data"] = time.perf_counter() - t0

    source = target = test = None
    if {"pretrain", "build-bank", "meta-train", "fine-tune", "evaluate"} & set(plan.stages):
        source, target, test = load_corpus_dir(paths.corpus_dir)

    if plan.has("pretrain"):
        t0 = time.perf_counter()
        model, scaler, history = pretrain(source, cfg.pretrain)
        save_checkpoint(paths.encoder, model, scaler, cfg.pretrain, history)
        render_pretrain_curve(paths.reports, history.val_mse)
        timings["pretrain"] = time.perf_counter() - t0

    if plan.has("build-bank"):
        t0 = time.perf_counter()
        autoenc, scaler, _ = load_checkpoint(paths.encoder)
        bank, info = build_bank_from_corpus(
            source, autoenc, scaler, cfg.bank, cfg.pretrain.T0, cfg.pretrain.P
        )
        save_bank(paths.bank, bank)
        if "k_scores" in info:
            write_csv(
                paths.reports / "bank_selection.csv",
                [{"k": k, "silhouette": v} for k, v in sorted(info["k_scores"].items())],
                ["k", "silhouette"],
            )
        if "no_clu_bank" in cfg.experiment.variants:
            emb = embed_corpus(source, autoenc.encoder, scaler, cfg.pretrain.T0, cfg.pretrain.P)
            sub = subsample(emb, cfg.bank.sample_ratio, np.random.default_rng(cfg.bank.seed))
            rnd = build_random_bank(
                sub, bank.K, np.random.default_rng(derive_seed(cfg.bank.seed, "random_bank"))
            )
            save_bank(paths.random_bank, rnd)
        timings["build-bank"] = time.perf_counter() - t0

    if plan.has("meta-train") or plan.has("fine-tune"):
        t0 = time.perf_counter()
        autoenc, scaler, _ = load_checkpoint(paths.encoder)
        main_bank = load_bank(paths.bank)
        for variant in cfg.experiment.variants:
            if variant == "no_clu_bank":
                if not paths.random_bank.exists():
                    raise DependencyError(
                        f"variant no_clu_bank needs {paths.random_bank} (rerun build-bank)"
                    )
                bank_for_variant = load_bank(paths.random_bank)
                bank_file = paths.random_bank
            else:
                bank_for_variant = main_bank
                bank_file = paths.bank
            for seed in cfg.experiment.seeds:
                model_cfg = replace(cfg.model, variant=variant)
                model = train_forecast_arm(
                    bank_for_variant,
                    source,
                    target,
                    scaler,
                    model_cfg,
                    cfg.meta if plan.has("meta-train") else None,
                    cfg.finetune if plan.has("fine-tune") else None,
                    seed=seed,
                )
                save_model(paths.model(variant, seed), model, scaler, bank_file)
        timings["train"] = time.perf_counter() - t0

    reports: list[MetricReport] = []
    if plan.has("evaluate"):
        t0 = time.perf_counter()
        horizons = cfg.experiment.horizons
        input_hashes = {
            "encoder": file_sha256(paths.encoder) if paths.encoder.exists() else None,
            "bank": file_sha256(paths.bank) if paths.bank.exists() else None,
            "corpus": file_sha256(paths.corpus_dir / "corpus.json"),
        }
        for variant in cfg.experiment.variants:
            per_seed = {}
            for seed in cfg.experiment.seeds:
                model, scaler, _ = load_model(paths.model(variant, seed))
                per_seed[seed] = evaluate_model(model, scaler, test, horizons)
            reports.append(
                MetricReport(
                    variant=variant,
                    horizons=horizons,
                    per_seed=per_seed,
                    summary=summarize_seeds(per_seed, horizons),
                    metadata={"seeds": list(cfg.experiment.seeds)},
                )
            )
        metadata = {
            "config_sha256": config_fingerprint(cfg),
            "inputs": input_hashes,
            "variants": list(cfg.experiment.variants),
            "seeds": list(cfg.experiment.seeds),
            "deterministic": plan.deterministic,
        }
        write_metric_report(paths.reports, reports, metadata)
        render_variant_comparison(paths.reports, reports)
        timings["evaluate"] = time.perf_counter() - t0

    if timings:
        print("stage timings: " + ", ".join(f"{k}={v:.1f}s" for k, v in timings.items()))
    return reports


def sweep_k_experiment(
    cfg: PipelineConfig,
    corpus_dir: str | Path,
    encoder_path: str | Path,
    out_dir: str | Path,
    k_grid: list[int] | None = None,
) -> list[dict]:
    """Silhouette-vs-RMSE table over K: cluster, train the full variant once
    per K (first seed), evaluate the shortest horizon."""
    encoder_path = Path(encoder_path)
    if not encoder_path.exists():
        raise DependencyError(f"sweep-k needs encoder checkpoint {encoder_path}")
    source, target, test = load_corpus_dir(corpus_dir)
    autoenc, scaler, _ = load_checkpoint(encoder_path)
    grid = sorted(k_grid or cfg.bank.k_grid)
    emb = embed_corpus(source, autoenc.encoder, scaler, cfg.pretrain.T0, cfg.pretrain.P)
    sub = subsample(emb, cfg.bank.sample_ratio, np.random.default_rng(cfg.bank.seed))
    seed = cfg.experiment.seeds[0]
    rows = []
    for K in grid:
        bank, assignment = kmeans_cosine(
            sub,
            K,
            n_init=cfg.bank.n_init,
            max_iter=cfg.bank.max_iter,
            tol=cfg.bank.tol,
            rng=np.random.default_rng(derive_seed(cfg.bank.seed, "sweep", K)),
        )
        score = silhouette(sub, assignment.labels)
        model = train_forecast_arm(
            bank, source, target, scaler,
            replace(cfg.model, variant="full"), cfg.meta, cfg.finetune, seed=seed,
        )
        result = evaluate_model(model, scaler, test, horizons=(1,))
        rows.append({"k": K, "silhouette": score, "rmse": result["horizon"][1]["rmse"]})
    render_k_sweep(out_dir, rows)
    return rows
