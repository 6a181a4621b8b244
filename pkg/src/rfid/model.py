"""Fusion-in-decoder reader with a per-passage rationale head and optional
rationale-embedding guidance of the decoder."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data import BOS_ID, EOS_ID, PAD_ID, ConfigurationError, Vocabulary

CKPT_MAGIC = b"RFIDCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    K: int = 4
    L: int = 32
    d: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    vocab_size: int = 512
    d_ff: int = 0
    max_target_len: int = 8
    guide_decoder: bool = True
    seed: int = 0

    def __post_init__(self):
        for f in ("K", "L", "d", "n_enc_layers", "n_dec_layers", "n_heads", "vocab_size", "max_target_len"):
            if getattr(self, f) < 1:
                raise ConfigurationError(f"{f} must be >= 1")
        if self.d % self.n_heads:
            raise ConfigurationError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.d_ff < 0:
            raise ConfigurationError("d_ff must be >= 0")

    @property
    def ffn_width(self) -> int:
        return self.d_ff or 4 * self.d

    @property
    def block_len(self) -> int:
        return self.L + 1 if self.guide_decoder else self.L

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AttentionTrace:
    """Post-softmax decoder cross-attention for one question.

    ``ca`` has shape (n_dec_layers, n_heads, steps, memory_len).
    """
    ca: np.ndarray
    K: int
    L: int
    guided: bool

    @property
    def block_len(self) -> int:
        return self.L + 1 if self.guided else self.L

    @property
    def n_layers(self) -> int:
        return self.ca.shape[0]

    @property
    def steps(self) -> int:
        return self.ca.shape[2]


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, mem, key_mask, causal=False):
        """``key_mask`` is (B, M) with True for valid memory positions.

        Returns the attended output and the (B, heads, T, M) probabilities.
        Masked positions get exactly zero probability.
        """
        B, T, _ = x.shape
        M = mem.shape[1]
        q = self.q(x).view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k(mem).view(B, M, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v(mem).view(B, M, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        allowed = key_mask[:, None, None, :]
        if causal:
            allowed = allowed & torch.ones(T, M, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~allowed, torch.finfo(scores.dtype).min)
        probs = torch.softmax(scores, dim=-1).masked_fill(~allowed, 0.0)
        out = (probs @ v).transpose(1, 2).reshape(B, T, -1)
        return self.o(out), probs


class FeedForward(nn.Sequential):
    def __init__(self, d: int, width: int):
        super().__init__(nn.Linear(d, width), nn.GELU(), nn.Linear(width, d))


class EncoderLayer(nn.Module):
    def __init__(self, d, n_heads, width):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, width)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)[0]
        return x + self.ffn(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, d, n_heads, width):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, n_heads)
        self.ln3 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, width)

    def forward(self, y, y_mask, memory, mem_mask):
        h = self.ln1(y)
        y = y + self.self_attn(h, h, y_mask, causal=True)[0]
        ca_out, ca = self.cross_attn(self.ln2(y), memory, mem_mask)
        y = y + ca_out
        return y + self.ffn(self.ln3(y)), ca


@dataclass
class ForwardOutput:
    rationale_logits: torch.Tensor  # (B, K, 2)
    preds: torch.Tensor  # (B, K) long
    logits: torch.Tensor  # (B, T, V)
    cross_attention: Optional[list]  # per layer (B, heads, T, M)
    memory_mask: torch.Tensor  # (B, M)


class RFiDModel(nn.Module):
    """K shared-parameter encoders, a linear rationale classifier on each
    passage's first hidden state, and a decoder over the fused memory.

    With ``cfg.guide_decoder`` each passage block in the decoder memory is
    followed by the rationale embedding selected by the predicted label.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.embed = nn.Embedding(cfg.vocab_size, d)
        self.encoder = nn.ModuleList(EncoderLayer(d, cfg.n_heads, cfg.ffn_width) for _ in range(cfg.n_enc_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.classifier = nn.Linear(d, 2)
        self.rationale_embedding = nn.Embedding(2, d)
        self.decoder = nn.ModuleList(DecoderLayer(d, cfg.n_heads, cfg.ffn_width) for _ in range(cfg.n_dec_layers))
        self.dec_norm = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, cfg.vocab_size)
        n_pos = max(cfg.L, cfg.max_target_len)
        self.register_buffer("positions", sinusoidal_positions(n_pos, d).float(), persistent=False)
        self.reset_parameters()

    def reset_parameters(self):
        g = torch.Generator().manual_seed(self.cfg.seed)
        for name, p in self.named_parameters():
            with torch.no_grad():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or "norm" in name:
                    p.fill_(1.0)
                elif p.dim() == 2:
                    p.normal_(0.0, 1.0 / math.sqrt(p.shape[1]), generator=g)
        with torch.no_grad():
            self.embed.weight.normal_(0.0, 1.0, generator=g)
            self.rationale_embedding.weight.normal_(0.0, 1.0, generator=g)

    def _embed(self, ids):
        x = self.embed(ids) + self.positions[: ids.shape[-1]].to(self.embed.weight.dtype)
        return x

    def encode(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, K, L) ids/mask -> (B, K, L, d) hidden states, each passage encoded independently."""
        B, K, L = ids.shape
        if K != self.cfg.K or L != self.cfg.L:
            raise ConfigurationError(f"expected (K, L)=({self.cfg.K}, {self.cfg.L}), got ({K}, {L})")
        flat_mask = mask.reshape(B * K, L)
        x = self._embed(ids.reshape(B * K, L))
        for layer in self.encoder:
            x = layer(x, flat_mask)
        return self.enc_norm(x).view(B, K, L, -1)

    def classify_rationale(self, states: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits from each passage's first hidden state; prediction ties go to 0."""
        logits = self.classifier(states[..., 0, :])
        return logits, predict_labels(logits)

    def assemble_memory(self, states, mask, preds, guide: Optional[bool] = None):
        """Concatenate passage blocks into the decoder memory.

        Guided blocks are ``[H_k; E[pred_k]]`` of length L+1; the appended
        position is always valid.
        """
        guide = self.cfg.guide_decoder if guide is None else guide
        B, K, L, d = states.shape
        if preds.shape != (B, K):
            raise ValueError(f"preds shape {tuple(preds.shape)} != {(B, K)}")
        if guide:
            if ((preds != 0) & (preds != 1)).any():
                raise ValueError("rationale predictions must be 0 or 1")
            extra = self.rationale_embedding(preds).unsqueeze(2)
            states = torch.cat([states, extra], dim=2)
            mask = torch.cat([mask, torch.ones(B, K, 1, dtype=torch.bool, device=mask.device)], dim=2)
        return states.reshape(B, -1, d), mask.reshape(B, -1)

    def decode(self, dec_ids, memory, mem_mask, trace: bool = False):
        B, T = dec_ids.shape
        if T > self.cfg.max_target_len:
            raise ValueError(f"target prefix length {T} exceeds max_target_len={self.cfg.max_target_len}")
        y = self._embed(dec_ids)
        y_mask = torch.ones(B, T, dtype=torch.bool, device=dec_ids.device)
        maps = []
        for layer in self.decoder:
            y, ca = layer(y, y_mask, memory, mem_mask)
            if trace:
                maps.append(ca.detach())
        logits = self.lm_head(self.dec_norm(y))
        return logits, (maps if trace else None)

    def forward(self, enc_ids, enc_mask, dec_ids, preds=None, trace=False) -> ForwardOutput:
        """Encode, classify, assemble memory and decode the teacher-forced prefix.

        ``preds`` overrides the argmax labels used for the embedding lookup.
        """
        states = self.encode(enc_ids, enc_mask)
        ratn_logits, argmax_preds = self.classify_rationale(states)
        preds = argmax_preds if preds is None else preds
        memory, mem_mask = self.assemble_memory(states, enc_mask, preds)
        logits, maps = self.decode(dec_ids, memory, mem_mask, trace=trace)
        return ForwardOutput(ratn_logits, preds, logits, maps, mem_mask)

    @torch.no_grad()
    def greedy_decode(self, enc_ids, enc_mask, max_len: Optional[int] = None, trace: bool = False):
        """Greedy decoding from BOS; ties go to the lowest token id.

        Returns generated ids per example (EOS excluded), rationale
        predictions, and optionally the cross-attention maps of the final
        prefix (one step per generated token, EOS included).
        """
        max_len = self.cfg.max_target_len if max_len is None else min(max_len, self.cfg.max_target_len)
        states = self.encode(enc_ids, enc_mask)
        ratn_logits, preds = self.classify_rationale(states)
        memory, mem_mask = self.assemble_memory(states, enc_mask, preds)
        B = enc_ids.shape[0]
        prefix = torch.full((B, 1), BOS_ID, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        lengths = torch.full((B,), max_len, dtype=torch.long)
        for step in range(max_len):
            logits, _ = self.decode(prefix, memory, mem_mask)
            nxt = logits[:, -1].argmax(-1).masked_fill(done, PAD_ID)
            newly = ~done & (nxt == EOS_ID)
            lengths[newly] = step + 1
            done |= newly
            prefix = torch.cat([prefix, nxt[:, None]], dim=1)
            if done.all():
                break
        generated = []
        for b in range(B):
            toks = prefix[b, 1:lengths[b] + 1].tolist()
            generated.append([t for t in toks if t not in (EOS_ID, PAD_ID)])
        maps = None
        if trace:
            T = int(lengths.max())
            _, maps = self.decode(prefix[:, :T], memory, mem_mask, trace=True)
        return generated, ratn_logits, preds, maps, lengths


def predict_labels(logits: torch.Tensor) -> torch.Tensor:
    """argmax over the two classes with ties resolved to 0."""
    return (logits[..., 1] > logits[..., 0]).long()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def traces_from_maps(maps, lengths, K: int, L: int, guided: bool) -> list[AttentionTrace]:
    """Split batched cross-attention maps into per-question traces."""
    stacked = torch.stack(maps, dim=1).double().numpy()  # (B, layers, heads, T, M)
    return [AttentionTrace(stacked[b, :, :, : int(lengths[b])].copy(), K, L, guided) for b in range(stacked.shape[0])]


# -- checkpoint I/O ------------------------------------------------------------

def save_checkpoint(path, model: RFiDModel, vocab: Optional[Vocabulary] = None, meta: Optional[dict] = None) -> None:
    """Binary container: magic, version, JSON header, then each tensor as
    ``ndim:u32, dims:u64*ndim, float32 LE data`` in header order."""
    state = model.state_dict()
    header = {
        "model_config": model.cfg.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "vocab": vocab.itos if vocab is not None else None,
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(raw)))
        fh.write(raw)
        for k, v in state.items():
            arr = v.detach().cpu().numpy().astype("<f4")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))
    tmp.replace(path)


@dataclass
class Checkpoint:
    model: RFiDModel
    vocab: Optional[Vocabulary]
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ConfigurationError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != CKPT_VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["model_config"])
        model = RFiDModel(cfg)
        expected = {k: tuple(v.shape) for k, v in model.state_dict().items()}
        state = {}
        for entry in header["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            (ndim,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            if tuple(dims) != shape:
                raise ConfigurationError(f"{path}: tensor {name} shape prefix {dims} disagrees with header {shape}")
            if expected.get(name) != shape:
                raise ConfigurationError(f"{path}: tensor {name} shape {shape} invalid for config (expected {expected.get(name)})")
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * n)
            if len(buf) != 4 * n:
                raise ConfigurationError(f"{path}: truncated data for tensor {name}")
            state[name] = torch.from_numpy(np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32))
        missing = set(expected) - set(state)
        if missing:
            raise ConfigurationError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(state)
    vocab = Vocabulary(header["vocab"][4:]) if header.get("vocab") else None
    return Checkpoint(model, vocab, header.get("meta", {}))


def build_batch(pairs: Sequence, device="cpu"):
    """Stack per-example lists of TokenizedPair into (B, K, L) tensors."""
    ids = torch.as_tensor(np.stack([[p.ids for p in ex] for ex in pairs]), device=device)
    mask = torch.as_tensor(np.stack([[p.attention_mask for p in ex] for ex in pairs]), device=device)
    return ids, mask
