"""Forecasting-stage model: pattern query, metaknowledge aggregation,
adaptive graph reconstruction, a pluggable spatio-temporal backend, and the
forecasting head.

The pattern bank is registered as a buffer: it is queried, never trained.
Query scores against the learnable Key matrix are softmax-normalized before
the weighted sum over bank rows (config flag ``raw_weights`` reproduces the
unnormalized sum instead). The adaptive adjacency is a per-input row softmax
with temperature over metaknowledge dot-product scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archive import file_sha256, load_archive, save_archive
from .autoencoder import Standardizer
from .bank import PatternBank, load_bank
from .errors import ConfigError, DataError, DependencyError

VARIANTS = ("full", "no_meta", "no_adj", "no_clu_bank")
HOW_SLOTS = 168


@dataclass(frozen=True)
class ForecastConfig:
    d: int = 128
    d_q: int = 128
    T0: int = 12
    P: int = 24
    C: int = 1
    horizon: int = 6
    epsilon: float = 1.0
    num_heads: int = 4
    aggregator_layers: int = 1
    backend_blocks: int = 2
    raw_weights: bool = False
    key_init: str = "gaussian"  # or "bank_projection"
    variant: str = "full"
    node_count: int | None = None

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError(f"softmax temperature must be positive, got {self.epsilon}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.key_init not in ("gaussian", "bank_projection"):
            raise ConfigError(f"unknown key_init {self.key_init!r}")
        if self.horizon < 1:
            raise ConfigError("forecast horizon must be positive")
        if self.variant == "no_meta" and not self.node_count:
            raise ConfigError("variant no_meta needs node_count for its learnable adjacency")


def adjacency_from_scores(scores: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Row softmax with temperature, max-subtracted for stability."""
    if epsilon <= 0:
        raise ConfigError(f"softmax temperature must be positive, got {epsilon}")
    z = scores / epsilon
    z = z - z.max(dim=-1, keepdim=True).values
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


class GatedTemporalGraphBackend(nn.Module):
    """Reference STmodel: gated temporal convolution plus one-hop graph mixing.

    Any module mapping (recent patches [B, N, T0, C], adjacency [B, N, N]) to
    node representations [B, N, d] can replace it.
    """

    def __init__(self, T0: int, C: int, d: int, blocks: int = 2):
        super().__init__()
        self.T0, self.C, self.d = T0, C, d
        self.input_proj = nn.Linear(C, d)
        self.convs = nn.ModuleList(
            nn.Conv1d(d, 2 * d, kernel_size=3, padding=1) for _ in range(blocks)
        )

    def forward(self, recent: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        B, N, T0, _ = recent.shape
        x = self.input_proj(recent)  # [B, N, T0, d]
        for conv in self.convs:
            flat = x.reshape(B * N, T0, self.d).transpose(1, 2)
            gates = conv(flat).transpose(1, 2).reshape(B, N, T0, 2 * self.d)
            h = torch.tanh(gates[..., : self.d]) * torch.sigmoid(gates[..., self.d :])
            x = x + torch.einsum("bij,bjtd->bitd", adjacency, h)
        return x[:, :, -1, :]


class PatternAggregator(nn.Module):
    """Transformer over the P retrieved patterns; output = last hidden state."""

    def __init__(self, d: int, num_heads: int = 4, num_layers: int = 1):
        super().__init__()
        self.positional = nn.Parameter(torch.empty(HOW_SLOTS, d).uniform_(-0.02, 0.02))
        layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=num_heads,
            dim_feedforward=4 * d,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, num_layers, enable_nested_tensor=False)

    def forward(self, patterns: torch.Tensor, hours: torch.Tensor) -> torch.Tensor:
        """patterns [.., P, d], hours [.., P] -> metaknowledge [.., d]."""
        if patterns.shape[-2] < 1:
            raise DataError("aggregator needs at least one retrieved pattern")
        lead = patterns.shape[:-2]
        x = patterns + self.positional[hours]
        x = x.reshape(-1, patterns.shape[-2], patterns.shape[-1])
        out = self.blocks(x)[:, -1, :]
        return out.reshape(*lead, patterns.shape[-1])


class ForecastModel(nn.Module):
    def __init__(
        self,
        bank: PatternBank,
        cfg: ForecastConfig,
        prior_adjacency: np.ndarray | None = None,
    ):
        super().__init__()
        if bank.d != cfg.d:
            raise ConfigError(f"bank width {bank.d} != model width {cfg.d}")
        self.cfg = cfg
        self.register_buffer("bank", torch.as_tensor(np.array(bank.centroids), dtype=torch.float32))
        self.bank_provenance = dict(bank.provenance)

        if cfg.key_init == "bank_projection":
            proj = torch.randn(cfg.d, cfg.d_q) / math.sqrt(cfg.d)
            key0 = self.bank @ proj
        else:
            key0 = torch.randn(bank.K, cfg.d_q) / math.sqrt(cfg.d_q)
        self.key = nn.Parameter(key0)
        self.query_proj = nn.Linear(cfg.T0 * cfg.C, cfg.d_q)
        self.aggregator = PatternAggregator(cfg.d, cfg.num_heads, cfg.aggregator_layers)
        self.graph_query = nn.Linear(cfg.d, cfg.d)
        self.graph_key = nn.Linear(cfg.d, cfg.d)
        self.backend = GatedTemporalGraphBackend(cfg.T0, cfg.C, cfg.d, cfg.backend_blocks)
        self.head = nn.Sequential(
            nn.Linear(2 * cfg.d, 2 * cfg.d),
            nn.GELU(),
            nn.Linear(2 * cfg.d, cfg.horizon * cfg.C),
        )
        if cfg.variant == "no_meta":
            self.adjacency_logits = nn.Parameter(torch.zeros(cfg.node_count, cfg.node_count))
        if cfg.variant == "no_adj":
            if prior_adjacency is None:
                raise ConfigError("variant no_adj needs the fixed prior adjacency")
            prior = torch.as_tensor(np.asarray(prior_adjacency), dtype=torch.float32)
            if not torch.allclose(prior.sum(dim=1), torch.ones(prior.shape[0]), atol=1e-6):
                raise DataError("prior adjacency rows must sum to 1")
            self.register_buffer("prior_adjacency", prior)

    @property
    def K(self) -> int:
        return self.bank.shape[0]

    def query_patterns(self, patches: torch.Tensor) -> torch.Tensor:
        """Retrieve one bank mixture per patch: [.., P, T0, C] -> [.., P, d]."""
        if self.key.shape[0] != self.bank.shape[0]:
            raise DataError("Key row count does not match bank size")
        flat = patches.reshape(*patches.shape[:-2], patches.shape[-2] * patches.shape[-1])
        q = self.query_proj(flat)
        scores = q @ self.key.transpose(0, 1)  # [.., P, K]
        bank = self.bank.to(scores.dtype)
        if self.cfg.raw_weights:
            return scores @ bank
        return adjacency_from_scores(scores, 1.0) @ bank

    def aggregate_metaknowledge(self, patterns: torch.Tensor, hours: torch.Tensor) -> torch.Tensor:
        return self.aggregator(patterns, hours)

    def reconstruct_graph(self, metaknowledge: torch.Tensor) -> torch.Tensor:
        """[.., N, d] -> row-stochastic adjacency [.., N, N]."""
        if metaknowledge.shape[-2] < 2:
            raise DataError("graph reconstruction needs at least two nodes")
        Q = self.graph_query(metaknowledge)
        Kp = self.graph_key(metaknowledge)
        scores = Q @ Kp.transpose(-1, -2)
        return adjacency_from_scores(scores, self.cfg.epsilon)

    def forecast(
        self, recent: torch.Tensor, metaknowledge: torch.Tensor, adjacency: torch.Tensor
    ) -> torch.Tensor:
        """recent [B, N, T0, C] + M [B, N, d] + A [B, N, N] -> [B, N, T', C]."""
        rep = self.backend(recent, adjacency)
        fused = torch.cat([metaknowledge, rep], dim=-1)
        out = self.head(fused)
        B, N = out.shape[:2]
        return out.reshape(B, N, self.cfg.horizon, self.cfg.C)

    def forward(self, patches: torch.Tensor, hours: torch.Tensor) -> torch.Tensor:
        """Variant-dispatching forecast.

        Args:
            patches: [B, N, P, T0, C] full (unmasked) history windows.
            hours: [B, P] hour-of-week indices shared across nodes.
        """
        if patches.ndim != 5:
            raise DataError(f"expected [B, N, P, T0, C] patches, got {tuple(patches.shape)}")
        B, N, P = patches.shape[:3]
        recent = patches[:, :, -1, :, :]
        variant = self.cfg.variant
        if variant in ("full", "no_clu_bank", "no_adj"):
            Z = self.query_patterns(patches)  # [B, N, P, d]
            node_hours = hours[:, None, :].expand(B, N, P)
            M = self.aggregate_metaknowledge(Z, node_hours)  # [B, N, d]
            if variant == "no_adj":
                A = self.prior_adjacency.to(patches.dtype).expand(B, N, N)
            else:
                A = self.reconstruct_graph(M)
            return self.forecast(recent, M, A)
        if variant == "no_meta":
            if self.adjacency_logits.shape[0] != N:
                raise DataError(
                    f"model was built for {self.adjacency_logits.shape[0]} nodes, got {N}"
                )
            A = torch.softmax(self.adjacency_logits.to(patches.dtype), dim=-1).expand(B, N, N)
            M = torch.zeros(B, N, self.cfg.d, dtype=patches.dtype)
            return self.forecast(recent, M, A)
        raise ConfigError(f"unknown variant {variant!r}")


def forecast_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every [N, T', C] entry."""
    if predicted.shape != target.shape:
        raise DataError(f"forecast/target shape mismatch: {predicted.shape} vs {target.shape}")
    return torch.mean((predicted - target) ** 2)


# ---------------------------------------------------------------------------
# Checkpoints


def save_model(
    path: str | Path,
    model: ForecastModel,
    scaler: Standardizer,
    bank_path: str | Path,
    extra: dict | None = None,
) -> None:
    cfg = model.cfg
    header = {
        "kind": "forecast_model",
        "K": model.K,
        "d": cfg.d,
        "d_q": cfg.d_q,
        "T0": cfg.T0,
        "P": cfg.P,
        "C": cfg.C,
        "T_prime": cfg.horizon,
        "epsilon": cfg.epsilon,
        "variant": cfg.variant,
        "num_heads": cfg.num_heads,
        "aggregator_layers": cfg.aggregator_layers,
        "backend_blocks": cfg.backend_blocks,
        "raw_weights": cfg.raw_weights,
        "key_init": cfg.key_init,
        "node_count": cfg.node_count,
        "scaler_mean": scaler.mean,
        "scaler_std": scaler.std,
        "bank_path": str(bank_path),
        "bank_sha256": file_sha256(bank_path),
    }
    if extra:
        header.update(extra)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_archive(path, header, arrays)


def load_model(
    path: str | Path, bank_path: str | Path | None = None
) -> tuple[ForecastModel, Standardizer, dict]:
    """Rebuild a checkpointed model; verifies the bank file hash."""
    header, arrays = load_archive(path)
    if header.get("kind") != "forecast_model":
        raise DataError(f"{path}: not a forecast model checkpoint")
    bank_file = Path(bank_path) if bank_path else Path(header["bank_path"])
    if not bank_file.exists():
        raise DependencyError(f"bank file {bank_file} not found (model depends on it)")
    actual = file_sha256(bank_file)
    if actual != header["bank_sha256"]:
        raise DependencyError(
            f"bank hash mismatch: model was trained against {header['bank_sha256'][:12]}, "
            f"file {bank_file} has {actual[:12]}"
        )
    bank = load_bank(bank_file)
    cfg = ForecastConfig(
        d=int(header["d"]),
        d_q=int(header["d_q"]),
        T0=int(header["T0"]),
        P=int(header["P"]),
        C=int(header["C"]),
        horizon=int(header["T_prime"]),
        epsilon=float(header["epsilon"]),
        num_heads=int(header["num_heads"]),
        aggregator_layers=int(header["aggregator_layers"]),
        backend_blocks=int(header["backend_blocks"]),
        raw_weights=bool(header["raw_weights"]),
        key_init=str(header["key_init"]),
        variant=str(header["variant"]),
        node_count=header.get("node_count"),
    )
    prior = None
    if cfg.variant == "no_adj":
        prior = arrays["param/prior_adjacency"]
    model = ForecastModel(bank, cfg, prior_adjacency=prior)
    state = {k[len("param/") :]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    scaler = Standardizer(mean=float(header["scaler_mean"]), std=float(header["scaler_std"]))
    return model, scaler, header
