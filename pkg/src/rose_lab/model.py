"""Patch/register-token transformer with a reconstruction branch and multi-horizon heads.

Token layout is ``[register tokens | patch tokens]``. One decoder stack serves
both the reconstruction and prediction branches (the prediction decoder reuses
the reconstruction decoder's weights). In pretraining, the prediction loss is
cut off from the backbone so it trains the heads only.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from rose_lab.register import (
    LowRankAdapter,
    Register,
    RegisterSelection,
    adapt_tokens,
    center_to_tokens,
    embed,
    nearest_center,
    register_loss,
    straight_through,
    topk_average,
)

MODES = ("pretrain", "finetune", "zeroshot")
DEFAULT_HORIZONS = (96, 192, 336, 720)


@dataclass(frozen=True)
class ModelConfig:
    lookback: int = 512
    patch_len: int = 64
    d_model: int = 256
    n_heads: int = 16
    enc_layers: int = 3
    dec_layers: int = 3
    ff_mult: int = 4
    dropout: float = 0.1
    n_r: int = 3
    horizons: tuple[int, ...] = DEFAULT_HORIZONS
    k_f: int = 4
    register_size: int = 128
    top_k: int = 3
    recon_from_patches: bool = True
    isolate_prediction: bool = True

    def __post_init__(self):
        object.__setattr__(self, "horizons", tuple(int(h) for h in self.horizons))
        if self.lookback % self.patch_len:
            raise ValueError(f"lookback {self.lookback} is not divisible by patch_len {self.patch_len}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.lookback % 2:
            raise ValueError("lookback must be even")
        if not self.horizons:
            raise ValueError("at least one horizon is required")
        if not 1 <= self.top_k <= self.register_size:
            raise ValueError("top_k must lie in [1, register_size]")

    @property
    def n_patches(self) -> int:
        return self.lookback // self.patch_len

    @property
    def n_tokens(self) -> int:
        return self.n_r + self.n_patches

    def to_dict(self) -> dict:
        d = asdict(self)
        d["horizons"] = list(self.horizons)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        b, t, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).reshape(b, t, 3, self.n_heads, hd).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = self.drop(att.softmax(dim=-1))
        out = (att @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm transformer block with full bidirectional attention."""

    def __init__(self, d_model: int, n_heads: int, ff_mult: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ff_mult * d_model, d_model),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.ff(self.norm2(x)))


class RoseModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = self.config = config
        self.patch_embed = nn.Linear(c.patch_len, c.d_model)
        self.pos_embed = nn.Parameter(torch.randn(c.n_tokens, c.d_model) * 0.02)
        self.encoder = nn.ModuleList(Block(c.d_model, c.n_heads, c.ff_mult, c.dropout) for _ in range(c.enc_layers))
        self.decoder = nn.ModuleList(Block(c.d_model, c.n_heads, c.ff_mult, c.dropout) for _ in range(c.dec_layers))
        recon_rows = c.n_patches if c.recon_from_patches else c.n_tokens
        self.recon_head = nn.Linear(recon_rows * c.d_model, c.lookback)
        self.heads = nn.ModuleDict({str(h): nn.Linear(c.n_tokens * c.d_model, h) for h in c.horizons})
        self.register = Register(c.lookback, c.register_size, c.n_r, c.d_model)
        self.adapter = LowRankAdapter(c.n_r, c.d_model)

    # ---------------------------------------------------------------- pieces

    def patchify_embed(self, x: torch.Tensor, positional: bool = True) -> torch.Tensor:
        c = self.config
        if x.shape[-1] != c.lookback:
            raise ValueError(f"expected length {c.lookback}, got {x.shape[-1]}")
        tokens = self.patch_embed(x.reshape(*x.shape[:-1], c.n_patches, c.patch_len))
        if positional:
            tokens = tokens + self.pos_embed[c.n_r:]
        return tokens

    def encode(self, register_tokens: torch.Tensor, patch_tokens: torch.Tensor) -> torch.Tensor:
        h = torch.cat([register_tokens + self.pos_embed[:self.config.n_r], patch_tokens], dim=-2)
        for block in self.encoder:
            h = block(h)
        return h

    def decode(self, s: torch.Tensor) -> torch.Tensor:
        for block in self.decoder:
            s = block(s)
        return s

    def reconstruct_head(self, z: torch.Tensor) -> torch.Tensor:
        if self.config.recon_from_patches:
            z = z[..., self.config.n_r:, :]
        return self.recon_head(z.flatten(-2))

    def head(self, horizon: int, z: torch.Tensor) -> torch.Tensor:
        key = str(horizon)
        if key not in self.heads:
            raise KeyError(f"no prediction head for horizon {horizon}; available: {list(self.config.horizons)}")
        return self.heads[key](z.flatten(-2))

    def select_register(self, x: torch.Tensor, mode: str, indices: torch.Tensor | None = None) -> RegisterSelection:
        """Register tokens for a (B, L) batch.

        ``indices`` pins the pretraining arg-min (used by gradient checks).
        """
        c, reg = self.config, self.register
        x_e = embed(x, reg)
        if mode == "pretrain":
            if indices is None:
                indices, center = nearest_center(x_e, reg.codebook)
            else:
                center = reg.codebook[indices]
            tokens = center_to_tokens(straight_through(center, x_e), c.n_r, c.d_model)
            return RegisterSelection(indices, tokens, x_e, center)
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        indices, center = topk_average(x_e, reg.codebook, c.top_k)
        tokens = center_to_tokens(center, c.n_r, c.d_model)
        if mode == "finetune":
            tokens = adapt_tokens(tokens, self.adapter)
        return RegisterSelection(indices, tokens, x_e, center)

    # ---------------------------------------------------------------- paths

    def reconstruct_path(self, views: torch.Tensor, register_tokens: torch.Tensor):
        """Encode K masked views (B, K, L), average the representations, reconstruct (B, L)."""
        b, k, _ = views.shape
        patches = self.patchify_embed(views.reshape(b * k, -1))
        reg = register_tokens.unsqueeze(1).expand(b, k, *register_tokens.shape[1:]).reshape(b * k, *register_tokens.shape[1:])
        s = self.encode(reg, patches)
        s_m = s.reshape(b, k, *s.shape[1:]).mean(dim=1)
        return self.reconstruct_head(self.decode(s_m)), s_m

    def predict_path(self, x: torch.Tensor, mode: str, horizons=None, register_tokens: torch.Tensor | None = None):
        if register_tokens is None:
            register_tokens = self.select_register(x, mode).tokens
        horizons = self.config.horizons if horizons is None else horizons
        for h in horizons:
            if str(h) not in self.heads:
                raise KeyError(f"no prediction head for horizon {h}; available: {list(self.config.horizons)}")
        z = self.decode(self.encode(register_tokens, self.patchify_embed(x)))
        if mode == "pretrain" and self.config.isolate_prediction:
            z = z.detach()
        return {h: self.head(h, z) for h in horizons}

    def forward(self, x: torch.Tensor, mode: str = "zeroshot", horizons=None):
        return self.predict_path(x, mode, horizons)

    # ---------------------------------------------------------------- losses

    def pretrain_losses(self, x, views, targets, indices=None, weights=(1.0, 1.0, 1.0)) -> dict:
        """Reconstruction, prediction and register terms for one batch.

        ``targets`` maps horizon -> (values (B, F), valid (B,) bool); a window
        without a horizon's target is left out of that horizon's term.
        """
        sel = self.select_register(x, "pretrain", indices)
        x_hat, _ = self.reconstruct_path(views, sel.tokens)
        recon = F.mse_loss(x_hat, x)
        preds = self.predict_path(x, "pretrain", list(targets), register_tokens=sel.tokens)
        pred = x.new_zeros(())
        for h, (y, valid) in targets.items():
            if valid.any():
                pred = pred + F.mse_loss(preds[h][valid], y[valid])
        reg = register_loss(sel.embedding, sel.center)
        wr, wp, wg = weights
        return {
            "total": wr * recon + wp * pred + wg * reg,
            "reconstruction": recon,
            "prediction": pred,
            "register": reg,
            "indices": sel.indices,
        }

    def finetune_loss(self, x, y, horizon: int) -> torch.Tensor:
        return F.mse_loss(self.predict_path(x, "finetune", [horizon])[horizon], y)

    def backbone_parameters(self):
        for module in (self.patch_embed, self.encoder, self.decoder, self.recon_head):
            yield from module.parameters()
        yield self.pos_embed


def mse(a, b) -> float:
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(((a - b) ** 2).mean())


def mae(a, b) -> float:
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return float((a - b).abs().mean())
