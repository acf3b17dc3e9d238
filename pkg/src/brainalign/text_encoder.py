"""Transformer report encoder: MLM pretraining, section-matching fine-tuning,
and whole-report embedding.

The encoder is a standard BERT-style stack (learned positions, post-layernorm
blocks, GELU feed-forward). Section matching runs the same module over both
sections of a pair (tied weights by construction), mean-pools token embeddings,
and regresses the cosine similarity onto the pair label with an MSE loss.
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import (
    CLS_ID,
    PAD_ID,
    SEP_ID,
    MASK_ID,
    SPECIAL_TOKENS,
    TokenSequence,
    Vocabulary,
    encode,
    pre_tokenize,
)

N_SPECIALS = len(SPECIAL_TOKENS)


class TextEncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    hidden_dim: int = 128
    embed_dim: int = 128
    block_length: int = 128
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise TextEncoderError("hidden_dim must be divisible by n_heads")
        if self.embed_dim < 1:
            raise TextEncoderError("embed_dim must be >= 1")


class _Block(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attn = nn.MultiheadAttention(
            cfg.hidden_dim, cfg.n_heads, dropout=cfg.dropout, batch_first=True
        )
        self.ln1 = nn.LayerNorm(cfg.hidden_dim)
        self.ff = nn.Sequential(
            nn.Linear(cfg.hidden_dim, 4 * cfg.hidden_dim),
            nn.GELU(),
            nn.Linear(4 * cfg.hidden_dim, cfg.hidden_dim),
        )
        self.ln2 = nn.LayerNorm(cfg.hidden_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, key_padding_mask):
        a, _ = self.attn(x, x, x, key_padding_mask=key_padding_mask, need_weights=False)
        x = self.ln1(x + self.drop(a))
        x = self.ln2(x + self.drop(self.ff(x)))
        return x


class TextEncoder(nn.Module):
    """Token ids (B, L) -> contextual embeddings (B, L, D)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden_dim, padding_idx=PAD_ID)
        self.pos_emb = nn.Embedding(cfg.block_length, cfg.hidden_dim)
        self.emb_ln = nn.LayerNorm(cfg.hidden_dim)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.out_proj = (
            nn.Linear(cfg.hidden_dim, cfg.embed_dim)
            if cfg.embed_dim != cfg.hidden_dim
            else nn.Identity()
        )
        self.mlm_trained = False
        self.apply(_init_bert)

    def forward(self, token_ids, attention_mask):
        b, length = token_ids.shape
        if length > self.cfg.block_length:
            raise TextEncoderError(
                f"truncation required: sequence length {length} > block_length {self.cfg.block_length}"
            )
        positions = torch.arange(length, device=token_ids.device).unsqueeze(0)
        x = self.tok_emb(token_ids) + self.pos_emb(positions)
        x = self.drop(self.emb_ln(x))
        pad_mask = attention_mask == 0
        for block in self.blocks:
            x = block(x, pad_mask)
        return self.out_proj(x)


class MlmHead(nn.Module):
    """Feed-forward prediction head producing a distribution over the vocabulary.

    When the encoder's hidden and output widths agree, the decoder weight is
    tied to the token embedding matrix (BERT's weight sharing), which also
    speeds up early training considerably.
    """

    def __init__(self, cfg: EncoderConfig, tie_to: nn.Embedding | None = None):
        super().__init__()
        self.dense = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.ln = nn.LayerNorm(cfg.embed_dim)
        self.decoder = nn.Linear(cfg.embed_dim, cfg.vocab_size)
        self.apply(_init_bert)
        if tie_to is not None and cfg.embed_dim == cfg.hidden_dim:
            self.decoder.weight = tie_to.weight

    def forward(self, x):
        return self.decoder(self.ln(F.gelu(self.dense(x))))


def _init_bert(module):
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.normal_(module.weight, mean=0.0, std=0.02)
        if isinstance(module, nn.Linear) and module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.MultiheadAttention):
        nn.init.normal_(module.in_proj_weight, mean=0.0, std=0.02)
        nn.init.zeros_(module.in_proj_bias)
        nn.init.normal_(module.out_proj.weight, mean=0.0, std=0.02)
        nn.init.zeros_(module.out_proj.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


@dataclass
class MlmBatch:
    input_ids: list[int]
    target_ids: list[int]
    mask_positions: list[bool]
    attention_mask: list[int]


@dataclass
class TrainState:
    model: TextEncoder
    head: MlmHead | None
    epoch: int
    best_val_loss: float
    best_epoch: int
    patience_counter: int
    history: list[tuple[float, float]] = field(default_factory=list)


def encode_tokens(model: TextEncoder, seq: TokenSequence) -> np.ndarray:
    """Embed one token sequence; returns (len(seq), D)."""
    model.eval()
    with torch.no_grad():
        ids = torch.tensor([seq.token_ids], dtype=torch.long)
        mask = torch.tensor([seq.attention_mask], dtype=torch.long)
        out = model(ids, mask)
    return out[0].cpu().numpy()


def mask_tokens(seq: TokenSequence, mask_rate: float = 0.15, rng: np.random.Generator | None = None) -> MlmBatch:
    """Independently replace eligible positions with <mask> at the given rate."""
    if not 0 < mask_rate < 1:
        raise TextEncoderError("mask_rate must lie strictly between 0 and 1")
    if rng is None:
        rng = np.random.default_rng()
    draws = rng.random(len(seq.token_ids))
    input_ids, positions = [], []
    for tid, attn, u in zip(seq.token_ids, seq.attention_mask, draws):
        eligible = attn == 1 and tid >= N_SPECIALS
        masked = bool(eligible and u < mask_rate)
        input_ids.append(MASK_ID if masked else tid)
        positions.append(masked)
    return MlmBatch(
        input_ids=input_ids,
        target_ids=list(seq.token_ids),
        mask_positions=positions,
        attention_mask=list(seq.attention_mask),
    )


def mlm_loss(model: TextEncoder, head: MlmHead, input_ids, attention_mask, target_ids, mask_positions):
    """Mean cross-entropy over masked positions (tensors, batch-first)."""
    if mask_positions.sum() == 0:
        raise TextEncoderError("batch has no masked positions")
    hidden = model(input_ids, attention_mask)
    logits = head(hidden[mask_positions])
    return F.cross_entropy(logits, target_ids[mask_positions])


def mlm_batch_loss(model: TextEncoder, head: MlmHead, batch: MlmBatch):
    """mlm_loss over a single masked sequence."""
    return mlm_loss(
        model,
        head,
        torch.tensor([batch.input_ids], dtype=torch.long),
        torch.tensor([batch.attention_mask], dtype=torch.long),
        torch.tensor([batch.target_ids], dtype=torch.long),
        torch.tensor([batch.mask_positions], dtype=torch.bool),
    )


def _stack_blocks(blocks):
    ids = torch.tensor([b.token_ids for b in blocks], dtype=torch.long)
    attn = torch.tensor([b.attention_mask for b in blocks], dtype=torch.long)
    return ids, attn


def _mask_batch(ids, attn, mask_rate, rng):
    eligible = (attn == 1) & (ids >= N_SPECIALS)
    draws = torch.from_numpy(rng.random(tuple(ids.shape)))
    positions = eligible & (draws < mask_rate)
    corrupted = ids.clone()
    corrupted[positions] = MASK_ID
    return corrupted, positions


def train_mlm(
    train_blocks,
    val_blocks,
    cfg: EncoderConfig,
    epochs: int = 250,
    batch_size: int = 64,
    lr: float = 1e-4,
    mask_rate: float = 0.15,
    patience: int = 10,
    seed: int = 0,
    model: TextEncoder | None = None,
    max_steps: int | None = None,
    warmup_steps: int = 50,
    log=None,
) -> TrainState:
    """MLM pretraining; returns the lowest-validation-loss checkpoint.

    A short linear warmup keeps the post-layernorm stack stable at the
    desk-profile learning rate.
    """
    if not train_blocks or not val_blocks:
        raise TextEncoderError("train and validation blocks are required")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if model is None:
        model = TextEncoder(cfg)
    head = MlmHead(cfg, tie_to=model.tok_emb)
    params = {id(p): p for p in list(model.parameters()) + list(head.parameters())}
    opt = torch.optim.Adam(params.values(), lr=lr)

    train_ids, train_attn = _stack_blocks(train_blocks)
    val_ids, val_attn = _stack_blocks(val_blocks)
    # one fixed corruption of the validation blocks keeps epoch losses comparable
    val_inputs, val_positions = _mask_batch(val_ids, val_attn, mask_rate, np.random.default_rng(seed + 1))

    best = None
    state = TrainState(model=model, head=head, epoch=0, best_val_loss=math.inf,
                       best_epoch=-1, patience_counter=0)
    steps = 0
    for epoch in range(epochs):
        model.train()
        head.train()
        order = rng.permutation(len(train_blocks))
        total, batches = 0.0, 0
        for start in range(0, len(order), batch_size):
            if max_steps is not None and steps >= max_steps:
                break
            sel = order[start : start + batch_size]
            ids, attn = train_ids[sel], train_attn[sel]
            inputs, positions = _mask_batch(ids, attn, mask_rate, rng)
            if positions.sum() == 0:
                continue
            for group in opt.param_groups:
                group["lr"] = warmup_lr(lr, steps + 1, warmup_steps)
            opt.zero_grad()
            loss = mlm_loss(model, head, inputs, attn, ids, positions)
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
            steps += 1
        train_loss = total / max(batches, 1)

        model.eval()
        head.eval()
        with torch.no_grad():
            val_loss = float(mlm_loss(model, head, val_inputs, val_attn, val_ids, val_positions))
        state.history.append((train_loss, val_loss))
        state.epoch = epoch + 1
        if log:
            log(f"mlm epoch {epoch + 1}/{epochs} train {train_loss:.4f} val {val_loss:.4f}")
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch + 1
            state.patience_counter = 0
            best = (copy.deepcopy(model.state_dict()), copy.deepcopy(head.state_dict()))
        else:
            state.patience_counter += 1
            if state.patience_counter >= patience:
                break
        if max_steps is not None and steps >= max_steps:
            break

    if best is not None:
        model.load_state_dict(best[0])
        head.load_state_dict(best[1])
    model.mlm_trained = True
    return state


def mean_pool(embeddings, pool_mask):
    """Mean of embedding rows where pool_mask is 1; errors when nothing pools.

    Works on (L, D) or batched (B, L, D) tensors/arrays.
    """
    if isinstance(embeddings, np.ndarray):
        mask = np.asarray(pool_mask)
        if mask.sum() == 0:
            raise TextEncoderError("mean_pool over empty mask")
        return embeddings[mask == 1].mean(axis=0)
    mask = pool_mask.to(embeddings.dtype)
    denom = mask.sum(dim=-1, keepdim=True)
    if (denom == 0).any():
        raise TextEncoderError("mean_pool over empty mask")
    return (embeddings * mask.unsqueeze(-1)).sum(dim=-2) / denom


def cosine(a, b):
    """Cosine similarity in [-1, 1]; rejects zero vectors."""
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        na = torch.linalg.vector_norm(a, dim=-1)
        nb = torch.linalg.vector_norm(b, dim=-1)
        if (na == 0).any() or (nb == 0).any():
            raise TextEncoderError("cosine of zero vector")
        return (a * b).sum(dim=-1) / (na * nb)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise TextEncoderError("cosine of zero vector")
    return float(a @ b / (na * nb))


def section_tokens(text: str, vocab: Vocabulary, block_length: int) -> tuple[list[int], list[int], list[int]]:
    """(ids, attention, pool) for one section: <cls> pieces <sep>, truncated."""
    if not text or not pre_tokenize(text):
        raise TextEncoderError("empty section text")
    ids = encode(text, vocab).token_ids[: block_length - 2]
    ids = [CLS_ID] + ids + [SEP_ID]
    attention = [1] * len(ids)
    pool = [0] + [1] * (len(ids) - 2) + [0]
    return ids, attention, pool


def _pad_to(rows, length, fill):
    return [row + [fill] * (length - len(row)) for row in rows]


def _section_batch(texts, vocab, block_length, dtype=torch.long):
    parts = [section_tokens(t, vocab, block_length) for t in texts]
    width = max(len(p[0]) for p in parts)
    ids = torch.tensor(_pad_to([p[0] for p in parts], width, PAD_ID), dtype=dtype)
    attn = torch.tensor(_pad_to([p[1] for p in parts], width, 0), dtype=dtype)
    pool = torch.tensor(_pad_to([p[2] for p in parts], width, 0), dtype=dtype)
    return ids, attn, pool


def rsm_loss(model: TextEncoder, vocab: Vocabulary, pairs, second_branch: TextEncoder | None = None):
    """MSE between pooled-section cosine and the pair label.

    Both sections run through the same weights; `second_branch`, when given,
    must be the identical module (the Siamese tying assertion).
    """
    if second_branch is not None and second_branch is not model:
        raise TextEncoderError("section-matching branches must share one module")
    labels = torch.tensor([float(p.label) for p in pairs])
    f_ids, f_attn, f_pool = _section_batch([p.findings_text for p in pairs], vocab, model.cfg.block_length)
    s_ids, s_attn, s_pool = _section_batch([p.summary_text for p in pairs], vocab, model.cfg.block_length)
    f_emb = mean_pool(model(f_ids, f_attn), f_pool)
    s_emb = mean_pool(model(s_ids, s_attn), s_pool)
    sims = cosine(f_emb, s_emb)
    return ((sims - labels.to(sims.dtype)) ** 2).mean()


def pair_cosines(model: TextEncoder, vocab: Vocabulary, pairs) -> np.ndarray:
    """Inference-mode section cosines for a list of pairs."""
    model.eval()
    with torch.no_grad():
        f_ids, f_attn, f_pool = _section_batch([p.findings_text for p in pairs], vocab, model.cfg.block_length)
        s_ids, s_attn, s_pool = _section_batch([p.summary_text for p in pairs], vocab, model.cfg.block_length)
        f_emb = mean_pool(model(f_ids, f_attn), f_pool)
        s_emb = mean_pool(model(s_ids, s_attn), s_pool)
        return cosine(f_emb, s_emb).cpu().numpy()


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear ramp from 0 to base_lr over warmup_steps, constant after."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


def train_rsm(
    train_pairs,
    val_pairs,
    model: TextEncoder,
    vocab: Vocabulary,
    epochs: int = 50,
    batch_size: int = 16,
    lr: float = 1e-6,
    warmup_steps: int = 100,
    seed: int = 0,
    log=None,
) -> TrainState:
    """Siamese section-matching fine-tuning; returns lowest-validation-loss weights."""
    if not train_pairs or not val_pairs:
        raise TextEncoderError("train and validation pairs are required")
    if not model.mlm_trained:
        warnings.warn("section matching started from weights without MLM pretraining")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)

    best = None
    state = TrainState(model=model, head=None, epoch=0, best_val_loss=math.inf,
                       best_epoch=-1, patience_counter=0)
    step = 0
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(train_pairs))
        total, batches = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = [train_pairs[i] for i in order[start : start + batch_size]]
            step += 1
            for group in opt.param_groups:
                group["lr"] = warmup_lr(lr, step, warmup_steps)
            opt.zero_grad()
            loss = rsm_loss(model, vocab, batch, second_branch=model)
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        train_loss = total / max(batches, 1)

        model.eval()
        with torch.no_grad():
            val_loss = float(rsm_loss(model, vocab, val_pairs, second_branch=model))
        state.history.append((train_loss, val_loss))
        state.epoch = epoch + 1
        if log:
            log(f"rsm epoch {epoch + 1}/{epochs} train {train_loss:.4f} val {val_loss:.4f}")
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_epoch = epoch + 1
            state.patience_counter = 0
            best = copy.deepcopy(model.state_dict())
        else:
            state.patience_counter += 1

    if best is not None:
        model.load_state_dict(best)
    return state


def embed_report(text: str, model: TextEncoder, vocab: Vocabulary) -> np.ndarray:
    """Embed a whole report: window into blocks, encode, global mean pool."""
    if not text or not pre_tokenize(text):
        raise TextEncoderError("empty report text")
    piece_ids = encode(text, vocab).token_ids
    window = model.cfg.block_length - 2
    model.eval()
    total = torch.zeros(model.cfg.embed_dim, dtype=next(model.parameters()).dtype)
    count = 0
    with torch.no_grad():
        for start in range(0, len(piece_ids), window):
            chunk = piece_ids[start : start + window]
            ids = torch.tensor([[CLS_ID] + chunk + [SEP_ID]], dtype=torch.long)
            attn = torch.ones_like(ids)
            hidden = model(ids, attn)[0]
            total += hidden[1:-1].sum(dim=0)
            count += len(chunk)
    return (total / count).cpu().numpy()


def save_checkpoint(path, model: TextEncoder, vocab: Vocabulary, head: MlmHead | None = None, extras: dict | None = None):
    payload = {
        "config": vars(model.cfg),
        "state_dict": model.state_dict(),
        "head_state_dict": head.state_dict() if head is not None else None,
        "vocab_tokens": list(vocab.tokens),
        "mlm_trained": model.mlm_trained,
        "extras": extras or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[TextEncoder, Vocabulary, MlmHead | None, dict]:
    payload = torch.load(path, weights_only=False)
    cfg = EncoderConfig(**payload["config"])
    model = TextEncoder(cfg)
    model.load_state_dict(payload["state_dict"])
    model.mlm_trained = payload.get("mlm_trained", False)
    vocab = Vocabulary(tokens=tuple(payload["vocab_tokens"]))
    head = None
    if payload.get("head_state_dict") is not None:
        head = MlmHead(cfg)
        head.load_state_dict(payload["head_state_dict"])
    return model, vocab, head, payload.get("extras", {})
