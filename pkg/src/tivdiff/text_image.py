"""Caption and first-frame encoders and their cross-attention fusion."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import torch
from torch import nn
import torch.nn.functional as F

from .errors import RejectedInput

PAD = "<pad>"
UNK = "<unk>"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class Vocabulary:
    def __init__(self, tokens):
        self.tokens = dict(tokens)
        self.pad_id = self.tokens[PAD]
        self.unk_id = self.tokens[UNK]

    @classmethod
    @lru_cache(maxsize=1)
    def default(cls):
        with resources.files("tivdiff.assets").joinpath("vocab.json").open("r") as f:
            return cls(json.load(f)["tokens"])

    def __len__(self):
        return len(self.tokens)

    def tokenize(self, caption):
        words = _TOKEN_RE.findall(caption.lower())
        if not words:
            raise RejectedInput("empty caption")
        return [self.tokens.get(w, self.unk_id) for w in words]

    def batch(self, captions, device=None):
        """Pad tokenized captions to a common length.

        Returns ``(ids, pad_mask)``; ``pad_mask`` is True where a position is padding.
        """
        seqs = [self.tokenize(c) for c in captions]
        length = max(len(s) for s in seqs)
        ids = torch.full((len(seqs), length), self.pad_id, dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = torch.tensor(s)
        ids = ids.to(device)
        return ids, ids == self.pad_id


def tokenize(caption):
    return Vocabulary.default().tokenize(caption)


def _encoder_stack(d, depth, heads, ff):
    layer = nn.TransformerEncoderLayer(d, heads, ff, dropout=0.0, activation="gelu",
                                       batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size, d=512, depth=2, heads=4, ff=1024, max_len=32):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, d)
        self.pos = nn.Parameter(torch.randn(1, max_len, d) * 0.02)
        self.encoder = _encoder_stack(d, depth, heads, ff)

    def forward(self, ids, pad_mask=None):
        if ids.shape[1] < 1:
            raise RejectedInput("caption must contain at least one token")
        if ids.shape[1] > self.pos.shape[1]:
            raise RejectedInput(f"caption of {ids.shape[1]} tokens exceeds max_len {self.pos.shape[1]}")
        return self.encode_embeddings(self.embed(ids), pad_mask)

    def encode_embeddings(self, tok, pad_mask=None):
        x = tok + self.pos[:, :tok.shape[1]]
        return self.encoder(x, src_key_padding_mask=pad_mask)


class ImageEncoder(nn.Module):
    """ViT-style encoder: non-overlapping patches, flattened row-major over the patch grid."""

    def __init__(self, image_size=64, patch=16, channels=1, d=512, depth=2, heads=4, ff=1024):
        super().__init__()
        if image_size % patch:
            raise RejectedInput("image size must be a multiple of the patch size")
        self.image_size = image_size
        self.patch = patch
        self.grid = image_size // patch
        self.proj = nn.Linear(patch * patch * channels, d)
        self.pos = nn.Parameter(torch.randn(1, self.grid * self.grid, d) * 0.02)
        self.encoder = _encoder_stack(d, depth, heads, ff)

    def patchify(self, x):
        b, c, h, w = x.shape
        if (h, w) != (self.image_size, self.image_size):
            raise RejectedInput(f"expected {self.image_size}x{self.image_size} frames, got {h}x{w}")
        p = self.patch
        x = x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 3, 5, 1)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def patch_embed(self, x):
        return self.proj(self.patchify(x))

    def forward(self, x):
        return self.encoder(self.patch_embed(x) + self.pos)


class CrossAttention(nn.Module):
    """Single-head scaled dot-product attention with learned Q, K, V maps."""

    def __init__(self, query_dim, context_dim, attn_dim=None, value_dim=None):
        super().__init__()
        attn_dim = attn_dim or query_dim
        value_dim = value_dim or query_dim
        self.q = nn.Linear(query_dim, attn_dim)
        self.k = nn.Linear(context_dim, attn_dim)
        self.v = nn.Linear(context_dim, value_dim)
        self.scale = 1.0 / math.sqrt(attn_dim)

    def forward(self, query, context, context_mask=None, return_weights=False):
        if query.shape[-1] != self.q.in_features or context.shape[-1] != self.k.in_features:
            raise RejectedInput(
                f"cross-attention expects dims ({self.q.in_features}, {self.k.in_features}), "
                f"got ({query.shape[-1]}, {context.shape[-1]})")
        logits = torch.einsum("bqd,bkd->bqk", self.q(query), self.k(context)) * self.scale
        if context_mask is not None:
            logits = logits.masked_fill(context_mask[:, None, :], float("-inf"))
        w = logits.softmax(dim=-1)
        out = torch.einsum("bqk,bkd->bqd", w, self.v(context))
        return (out, w) if return_weights else out


class SpeedEmbedding(nn.Module):
    def __init__(self, d=512):
        super().__init__()
        self.phi = nn.Linear(1, d)

    def forward(self, eta):
        eta = torch.as_tensor(eta, dtype=self.phi.weight.dtype, device=self.phi.weight.device).reshape(-1, 1)
        if bool(((eta <= 0) | (eta >= 1)).any()):
            raise RejectedInput(f"speed must lie in (0, 1), got {eta.flatten().tolist()}")
        return self.phi(eta)[:, None, :]


@dataclass
class FusedCondition:
    c: torch.Tensor          # (B, tokens, d) fused image/text condition
    v: torch.Tensor          # (B, 1, d) speed embedding
    text: torch.Tensor       # (B, L, d) caption embedding, reused by the slot fusion
    text_mask: torch.Tensor  # (B, L) True at padding


class ConditionEncoder(nn.Module):
    def __init__(self, vocab_size, d=512, depth=2, heads=4, ff=1024, image_size=64, patch=16, max_len=32):
        super().__init__()
        self.text = TextEncoder(vocab_size, d, depth, heads, ff, max_len)
        self.image = ImageEncoder(image_size, patch, 1, d, depth, heads, ff)
        self.fuse = CrossAttention(d, d)
        self.speed = SpeedEmbedding(d)

    def forward(self, frame0, ids, pad_mask, eta):
        e_s = self.text(ids, pad_mask)
        e_x = self.image(frame0)
        c = self.fuse(e_x, e_s, pad_mask)
        return FusedCondition(c, self.speed(eta), e_s, pad_mask)


def fuse_grid(c, grid):
    """Reshape ``(B, grid*grid, d)`` tokens to a ``(B, d, grid, grid)`` map, row-major."""
    b, n, d = c.shape
    if n != grid * grid:
        raise RejectedInput(f"{n} condition tokens do not form a {grid}x{grid} grid")
    return c.transpose(1, 2).reshape(b, d, grid, grid)


def resize_grid(x, size):
    if x.shape[-1] == size:
        return x
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
