"""Masked traffic-patch autoencoder: encoder, decoder, pre-training loop.

The encoder flattens each unmasked patch, projects it to width ``d``, adds a
learnable hour-of-week positional embedding (168 slots), and runs the kept
tokens through a transformer. The decoder fills masked positions with a
learnable token, re-adds the positional embedding at every position, applies
one transformer layer, and projects back to patch values.

Training data is standardized with source-corpus statistics; the scaler is
part of the checkpoint so later stages embed patches identically.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .archive import load_archive, save_archive
from .data import CityCorpus, PatchWindow, WindowRef, patch_stack, sample_mask, split_source
from .errors import ConfigError, DataError, TrainingDivergedError
from .metrics import mae, mape, rmse
from .seeding import rng_from

HOW_SLOTS = 168


@dataclass(frozen=True)
class Standardizer:
    mean: float
    std: float

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    @staticmethod
    def fit(x: np.ndarray) -> "Standardizer":
        return Standardizer(mean=float(np.mean(x)), std=max(float(np.std(x)), 1e-6))


class PatchEncoder(nn.Module):
    """Projects unmasked patches to tokens and contextualizes them."""

    def __init__(
        self,
        T0: int = 12,
        C: int = 1,
        d: int = 128,
        num_layers: int = 4,
        num_heads: int = 4,
        pe_dropout: float = 0.1,
    ):
        super().__init__()
        self.T0, self.C, self.d = T0, C, d
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.input_proj = nn.Linear(T0 * C, d)
        self.positional = nn.Parameter(torch.empty(HOW_SLOTS, d).uniform_(-0.02, 0.02))
        self.pe_dropout = nn.Dropout(pe_dropout)
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

    def tokens(self, patches: torch.Tensor, hours: torch.Tensor) -> torch.Tensor:
        """Linear projection plus (dropout-regularized) positional rows; [B, P, d]."""
        B, P = patches.shape[:2]
        if patches.shape[2] * patches.shape[3] != self.T0 * self.C:
            raise DataError(
                f"patch size {patches.shape[2:]} incompatible with encoder T0*C={self.T0 * self.C}"
            )
        flat = patches.reshape(B, P, self.T0 * self.C)
        return self.input_proj(flat) + self.pe_dropout(self.positional[hours])

    def forward(
        self, patches: torch.Tensor, hours: torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Encode unmasked patches.

        Args:
            patches: [B, P, T0, C]; masked entries are ignored entirely.
            hours: [B, P] hour-of-week indices.
            mask: [B, P] bool, True = masked. Every row must mask the same
                count. None means nothing is masked.
        Returns:
            H: [B, n_unmasked, d] in original patch order.
        """
        B, P = patches.shape[:2]
        toks = self.tokens(patches, hours)
        if mask is None:
            return self.blocks(toks)
        keep = ~mask
        counts = keep.sum(dim=1)
        if (counts == 0).any():
            raise DataError("encoder needs at least one unmasked patch per window")
        if not (counts == counts[0]).all():
            raise DataError("batched encode requires a uniform unmasked count per row")
        kept = toks[keep].reshape(B, int(counts[0]), self.d)
        return self.blocks(kept)


class PatchDecoder(nn.Module):
    """Reconstructs all P patches from unmasked embeddings plus a mask token."""

    def __init__(self, T0: int = 12, C: int = 1, d: int = 128, num_layers: int = 1, num_heads: int = 4):
        super().__init__()
        self.T0, self.C, self.d = T0, C, d
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.mask_token = nn.Parameter(torch.zeros(d))
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
        self.output_proj = nn.Linear(d, T0 * C)

    def forward(self, H: torch.Tensor, mask: torch.Tensor, pe: torch.Tensor) -> torch.Tensor:
        """Fill, re-position, decode, project.

        Args:
            H: [B, n_unmasked, d] encoder outputs, original order.
            mask: [B, P] bool, True = masked; per-row False count must equal H rows.
            pe: [B, P, d] positional rows for every position.
        Returns:
            [B, P, T0, C] reconstruction.
        """
        B, P = mask.shape
        keep = ~mask
        if int(keep.sum().item()) != H.shape[0] * H.shape[1]:
            raise DataError("mask/H length mismatch")
        full = self.mask_token.expand(B, P, self.d).clone()
        full[keep] = H.reshape(-1, self.d)
        full = full + pe
        out = self.blocks(full)
        out = self.output_proj(out)
        return out.reshape(B, P, self.T0, self.C)


class MaskedPatchAutoencoder(nn.Module):
    def __init__(
        self,
        T0: int = 12,
        C: int = 1,
        d: int = 128,
        encoder_layers: int = 4,
        decoder_layers: int = 1,
        num_heads: int = 4,
        pe_dropout: float = 0.1,
    ):
        super().__init__()
        self.encoder = PatchEncoder(T0, C, d, encoder_layers, num_heads, pe_dropout)
        self.decoder = PatchDecoder(T0, C, d, decoder_layers, num_heads)

    def reconstruct(
        self, patches: torch.Tensor, hours: torch.Tensor, mask: torch.Tensor
    ) -> torch.Tensor:
        H = self.encoder(patches, hours, mask)
        pe = self.encoder.positional[hours]
        return self.decoder(H, mask, pe)


def pretrain_loss(
    reconstructed: torch.Tensor, patches: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean squared error over masked patch entries only."""
    if reconstructed.shape != patches.shape:
        raise DataError("shape mismatch between reconstruction and target")
    m = mask.to(patches.dtype)[..., None, None]
    denom = m.sum() * patches.shape[-2] * patches.shape[-1]
    if denom.item() == 0:
        raise DataError("loss undefined with no masked patches")
    return ((reconstructed - patches) ** 2 * m).sum() / denom


def encode_window(encoder: PatchEncoder, window: PatchWindow) -> np.ndarray:
    """Spec surface for a single per-node window; returns [n_unmasked, d]."""
    encoder.eval()
    with torch.no_grad():
        H = encoder(
            torch.as_tensor(window.patches, dtype=torch.float32)[None],
            torch.as_tensor(window.hour_of_week)[None],
            torch.as_tensor(window.mask)[None],
        )
    return H[0].numpy()


# ---------------------------------------------------------------------------
# Pre-training


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    mask_ratio: float = 0.75
    seed: int = 0
    d: int = 128
    encoder_layers: int = 4
    decoder_layers: int = 1
    num_heads: int = 4
    pe_dropout: float = 0.1
    T0: int = 12
    P: int = 24
    fractions: tuple[float, float, float] = (0.7, 0.2, 0.1)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")


@dataclass
class PretrainHistory:
    """val_mse[0] is the untrained model; one entry per epoch afterwards."""

    val_mse: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0


def _gather_windows(
    corpus: CityCorpus, refs: list[WindowRef], T0: int, P: int
) -> tuple[np.ndarray, np.ndarray]:
    patches = np.empty((len(refs), P, T0, corpus.cities[0].channels), dtype=np.float32)
    hours = np.empty((len(refs), P), dtype=np.int64)
    cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    for i, ref in enumerate(refs):
        key = (ref.city_index, ref.start_step)
        if key not in cache:
            cache[key] = patch_stack(corpus.cities[ref.city_index], ref.start_step, T0, P)
        stack, hrs = cache[key]
        patches[i] = stack[ref.node]
        hours[i] = hrs
    return patches, hours


def _masked_val_mse(
    model: MaskedPatchAutoencoder,
    patches: torch.Tensor,
    hours: torch.Tensor,
    masks: torch.Tensor,
    batch_size: int = 64,
) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, patches.shape[0], batch_size):
            sl = slice(i, i + batch_size)
            recon = model.reconstruct(patches[sl], hours[sl], masks[sl])
            diff = (recon - patches[sl]) ** 2
            m = masks[sl].to(diff.dtype)[..., None, None]
            total += float((diff * m).sum())
            count += int(masks[sl].sum()) * patches.shape[-2] * patches.shape[-1]
    return total / max(count, 1)


def pretrain(
    corpus: CityCorpus, cfg: PretrainConfig
) -> tuple[MaskedPatchAutoencoder, Standardizer, PretrainHistory]:
    """Masked-reconstruction pre-training on the source corpus.

    Returns the best-validation checkpoint, the input standardizer, and the
    per-epoch history.
    """
    if not corpus.cities:
        raise DataError("cannot pretrain on an empty corpus")
    C = corpus.cities[0].channels
    rng = rng_from(cfg.seed)
    train_refs, val_refs, _ = split_source(corpus, cfg.fractions, rng, cfg.T0, cfg.P)
    if not train_refs or not val_refs:
        raise DataError("corpus too small to produce train and validation windows")

    train_np, train_hours = _gather_windows(corpus, train_refs, cfg.T0, cfg.P)
    val_np, val_hours = _gather_windows(corpus, val_refs, cfg.T0, cfg.P)
    scaler = Standardizer.fit(train_np)
    train_x = torch.as_tensor(scaler.apply(train_np), dtype=torch.float32)
    val_x = torch.as_tensor(scaler.apply(val_np), dtype=torch.float32)
    train_h = torch.as_tensor(train_hours)
    val_h = torch.as_tensor(val_hours)

    # Validation masks are fixed once so the curve is comparable across epochs.
    val_masks = torch.as_tensor(
        np.stack([sample_mask(cfg.P, cfg.mask_ratio, rng) for _ in range(len(val_refs))])
    )

    torch.manual_seed(cfg.seed)
    model = MaskedPatchAutoencoder(
        cfg.T0, C, cfg.d, cfg.encoder_layers, cfg.decoder_layers, cfg.num_heads, cfg.pe_dropout
    )
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas)

    history = PretrainHistory()
    history.val_mse.append(_masked_val_mse(model, val_x, val_h, val_masks))
    best_state = copy.deepcopy(model.state_dict())
    best_val = history.val_mse[0]
    best_epoch = 0

    n = train_x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        epoch_loss, n_batches = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[i : i + cfg.batch_size].copy())
            masks = torch.as_tensor(
                np.stack([sample_mask(cfg.P, cfg.mask_ratio, rng) for _ in range(len(idx))])
            )
            recon = model.reconstruct(train_x[idx], train_h[idx], masks)
            loss = pretrain_loss(recon, train_x[idx], masks)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite pre-training loss at epoch {epoch}, batch {n_batches}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach())
            n_batches += 1
        history.train_loss.append(epoch_loss / max(n_batches, 1))
        val = _masked_val_mse(model, val_x, val_h, val_masks)
        history.val_mse.append(val)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    history.best_epoch = best_epoch
    model.load_state_dict(best_state)
    model.eval()
    return model, scaler, history


def reconstruction_report(
    model: MaskedPatchAutoencoder,
    scaler: Standardizer,
    corpus: CityCorpus,
    refs: list[WindowRef],
    mask_ratio: float = 0.75,
    rng: int | np.random.Generator = 0,
    T0: int = 12,
    P: int = 24,
) -> dict[str, float]:
    """RMSE/MAE/MAPE over masked entries of the given windows, original units."""
    rng = rng_from(rng)
    raw, hours = _gather_windows(corpus, refs, T0, P)
    x = torch.as_tensor(scaler.apply(raw), dtype=torch.float32)
    h = torch.as_tensor(hours)
    masks_np = np.stack([sample_mask(P, mask_ratio, rng) for _ in range(len(refs))])
    masks = torch.as_tensor(masks_np)
    model.eval()
    preds, targets = [], []
    with torch.no_grad():
        for i in range(0, x.shape[0], 64):
            sl = slice(i, i + 64)
            recon = model.reconstruct(x[sl], h[sl], masks[sl]).numpy()
            preds.append(scaler.invert(recon)[masks_np[sl]])
            targets.append(raw[sl][masks_np[sl]])
    y_hat = np.concatenate([p.ravel() for p in preds])
    y = np.concatenate([t.ravel() for t in targets])
    return {"rmse": rmse(y, y_hat), "mae": mae(y, y_hat), "mape": mape(y, y_hat)}


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    path: str | Path,
    model: MaskedPatchAutoencoder,
    scaler: Standardizer,
    cfg: PretrainConfig,
    history: PretrainHistory,
) -> None:
    enc = model.encoder
    header = {
        "kind": "patch_autoencoder",
        "d": enc.d,
        "L_E": enc.num_layers,
        "L_D": model.decoder.num_layers,
        "T0": enc.T0,
        "P": cfg.P,
        "C": enc.C,
        "num_heads": enc.num_heads,
        "pe_dropout": cfg.pe_dropout,
        "mask_ratio": cfg.mask_ratio,
        "seed": cfg.seed,
        "epoch": history.best_epoch,
        "val_mse": min(history.val_mse) if history.val_mse else None,
        "scaler_mean": scaler.mean,
        "scaler_std": scaler.std,
        "history_val_mse": history.val_mse,
    }
    arrays = {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    save_archive(path, header, arrays)


def load_checkpoint(path: str | Path) -> tuple[MaskedPatchAutoencoder, Standardizer, dict]:
    header, arrays = load_archive(path)
    if header.get("kind") != "patch_autoencoder":
        raise DataError(f"{path}: not an autoencoder checkpoint")
    model = MaskedPatchAutoencoder(
        T0=int(header["T0"]),
        C=int(header["C"]),
        d=int(header["d"]),
        encoder_layers=int(header["L_E"]),
        decoder_layers=int(header["L_D"]),
        num_heads=int(header["num_heads"]),
        pe_dropout=float(header["pe_dropout"]),
    )
    state = {k[len("param/") :]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    model.eval()
    scaler = Standardizer(mean=float(header["scaler_mean"]), std=float(header["scaler_std"]))
    return model, scaler, header
