"""Losses, the multi-task training loop and a finite-difference gradient check."""

from __future__ import annotations

import csv
import dataclasses
import enum
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import PAD_ID, ConfigurationError, QAExample, Vocabulary
from .evaluation import encode_corpus, evaluate
from .model import ModelConfig, RFiDModel, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "L_ratn", "L_FiD", "L_total", "dev_EM", "dev_ratn_acc", "wall_clock_s")

# sub-generator stream ids under the run seed
_BATCH_STREAM = 0xBA7C


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class Variant(str, enum.Enum):
    FID = "fid"
    RFID = "rfid"
    RFID_NO_GUIDE = "rfid-noguide"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "-")
        aliases = {"rfid-no-guide": "rfid-noguide"}
        return cls(aliases.get(key, key))

    @property
    def guide_decoder(self) -> bool:
        return self is Variant.RFID

    @property
    def uses_rationale_loss(self) -> bool:
        return self is not Variant.FID


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 16
    total_steps: int = 3000
    eval_interval: int = 250
    seed: int = 0
    variant: str = "rfid"
    ratn_weight: float = 1.0
    eval_batch_size: int = 125

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning_rate must be > 0 and weight_decay >= 0")
        for f in ("batch_size", "eval_interval", "eval_batch_size"):
            if getattr(self, f) < 1:
                raise ConfigurationError(f"{f} must be >= 1")
        if self.total_steps < 0:
            raise ConfigurationError("total_steps must be >= 0")
        Variant.parse(self.variant)

    @property
    def variant_enum(self) -> Variant:
        return Variant.parse(self.variant)


@dataclass(frozen=True)
class LossBreakdown:
    L_ratn: float
    L_FiD: float
    L_total: float


def rationale_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy per passage, averaged over passages and batch."""
    return F.cross_entropy(logits.reshape(-1, 2), labels.reshape(-1).long())


def seq2seq_loss(logits: torch.Tensor, gold: torch.Tensor) -> torch.Tensor:
    """Token cross-entropy averaged over non-PAD gold positions."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), gold.reshape(-1), ignore_index=PAD_ID)


def total_loss(ratn: float, fid: float, variant, ratn_weight: float = 1.0) -> LossBreakdown:
    variant = Variant.parse(variant)
    if not (math.isfinite(ratn) and math.isfinite(fid)):
        raise NumericError(f"non-finite loss: L_ratn={ratn}, L_FiD={fid}")
    if not variant.uses_rationale_loss:
        ratn = 0.0
    return LossBreakdown(ratn, fid, ratn_weight * ratn + fid)


def model_config_for(mcfg: ModelConfig, variant) -> ModelConfig:
    return dataclasses.replace(mcfg, guide_decoder=Variant.parse(variant).guide_decoder)


def compute_losses(model: RFiDModel, batch, variant: Variant, preds=None):
    enc_ids, enc_mask, dec_in, gold, labels = batch
    out = model(enc_ids, enc_mask, dec_in, preds=preds)
    fid = seq2seq_loss(out.logits, gold)
    ratn = rationale_loss(out.rationale_logits, labels) if variant.uses_rationale_loss else None
    return ratn, fid, out


def freeze_rationale_parameters(model: RFiDModel) -> None:
    for p in list(model.classifier.parameters()) + list(model.rationale_embedding.parameters()):
        p.requires_grad_(False)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for 1-based ``step``; each epoch is a fresh seeded permutation, remainder dropped."""
    per_epoch = max(n // batch_size, 1)
    epoch, pos = divmod(step - 1, per_epoch)
    perm = np.random.default_rng(np.random.SeedSequence([seed, _BATCH_STREAM, epoch])).permutation(n)
    return perm[pos * batch_size:(pos + 1) * batch_size]


@dataclass
class TrainResult:
    model: RFiDModel
    history: list
    best_step: int
    best_em: float
    out_dir: Optional[Path] = None


def _fmt(x) -> str:
    if x is None or x == "":
        return ""
    return repr(float(x)) if not isinstance(x, int) else str(x)


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k == "step" else (float(v) if v != "" else None)) for k, v in r.items()})
    return out


def train(train_examples: Sequence[QAExample], dev_examples: Sequence[QAExample], cfg: TrainConfig,
          mcfg: ModelConfig, vocab: Vocabulary, out_dir=None, resume: bool = False,
          stop_at: Optional[int] = None) -> TrainResult:
    """Minimise ``L_ratn + L_FiD`` with AdamW at a constant learning rate.

    Every ``eval_interval`` steps the interval-mean losses, dev EM and dev
    rationale accuracy are logged, and the best-dev-EM model is kept (and
    written to ``out_dir/best.ckpt``). ``stop_at`` ends the run early with a
    resumable state in ``out_dir``.
    """
    if not train_examples:
        raise ConfigurationError("training corpus is empty")
    variant = cfg.variant_enum
    mcfg = model_config_for(dataclasses.replace(mcfg, vocab_size=len(vocab)), variant)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    train_enc = encode_corpus(train_examples, vocab, mcfg.K, mcfg.L, mcfg.max_target_len)
    dev_enc = encode_corpus(dev_examples, vocab, mcfg.K, mcfg.L, mcfg.max_target_len) if dev_examples else None

    model = RFiDModel(mcfg)
    if variant is Variant.FID:
        freeze_rationale_parameters(model)
    optimizer = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad],
                                  lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    history: list = []
    best_em, best_step, best_state = -1.0, 0, None
    start_step = 0
    meta = {"variant": variant.value, "train_config": dataclasses.asdict(cfg)}

    if resume:
        if out_dir is None or not (out_dir / "trainer_state.pt").exists():
            raise ConfigurationError("resume requested but no trainer state found")
        state = torch.load(out_dir / "trainer_state.pt", weights_only=False)
        model.load_state_dict(load_checkpoint(out_dir / "last.ckpt").model.state_dict())
        optimizer.load_state_dict(state["optimizer"])
        history, start_step = state["history"], state["step"]
        best_em, best_step = state["best_em"], state["best_step"]
        best_state = load_checkpoint(out_dir / "best.ckpt").model.state_dict()

    t0 = time.perf_counter()
    wall_offset = history[-1]["wall_clock_s"] if history else 0.0

    def evaluate_dev():
        if dev_enc is None:
            return None, None
        report = evaluate(dev_examples, model, vocab, batch_size=cfg.eval_batch_size, encoded=dev_enc)
        return report.exact_match, (report.ratn_accuracy if variant.uses_rationale_loss else None)

    def log_row(step, ratn, fid):
        nonlocal best_em, best_step, best_state
        br = total_loss(ratn, fid, variant, cfg.ratn_weight)
        em, acc = evaluate_dev()
        row = {"step": step, "L_ratn": br.L_ratn, "L_FiD": br.L_FiD, "L_total": br.L_total,
               "dev_EM": em, "dev_ratn_acc": acc, "wall_clock_s": round(wall_offset + time.perf_counter() - t0, 3)}
        history.append(row)
        logger.info("step %d  L_ratn=%.4f  L_FiD=%.4f  L_total=%.4f  dev_EM=%s  dev_ratn_acc=%s",
                    step, br.L_ratn, br.L_FiD, br.L_total, em, acc)
        score = em if em is not None else -br.L_total
        if best_state is None or score > best_em:
            best_em, best_step = score, step
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            if out_dir is not None:
                save_checkpoint(out_dir / "best.ckpt", model, vocab, dict(meta, step=step, dev_EM=em))
        if out_dir is not None:
            write_metrics(out_dir / "metrics.csv", history)

    def snapshot(step):
        if out_dir is None:
            return
        save_checkpoint(out_dir / "last.ckpt", model, vocab, dict(meta, step=step))
        torch.save({"optimizer": optimizer.state_dict(), "history": history, "step": step,
                    "best_em": best_em, "best_step": best_step}, out_dir / "trainer_state.pt")

    if start_step == 0:
        with torch.no_grad():
            ratn, fid, _ = compute_losses(model, train_enc.batch(batch_indices(len(train_enc), cfg.batch_size, cfg.seed, 1)), variant)
        log_row(0, ratn.item() if ratn is not None else 0.0, fid.item())
        snapshot(0)

    sums = [0.0, 0.0]
    n_acc = 0
    model.train()
    end = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    for step in range(start_step + 1, end + 1):
        batch = train_enc.batch(batch_indices(len(train_enc), cfg.batch_size, cfg.seed, step))
        ratn, fid, _ = compute_losses(model, batch, variant)
        loss = fid if ratn is None else fid + cfg.ratn_weight * ratn
        ratn_v = ratn.item() if ratn is not None else 0.0
        fid_v = fid.item()
        if not (math.isfinite(ratn_v) and math.isfinite(fid_v)):
            if out_dir is not None:
                write_metrics(out_dir / "metrics.csv", history)
            raise NumericError(f"non-finite loss at step {step}: L_ratn={ratn_v}, L_FiD={fid_v}")
        optimizer.zero_grad(set_to_none=False)
        loss.backward()
        optimizer.step()
        sums[0] += ratn_v
        sums[1] += fid_v
        n_acc += 1
        if step % cfg.eval_interval == 0:
            log_row(step, sums[0] / n_acc, sums[1] / n_acc)
            sums, n_acc = [0.0, 0.0], 0
            snapshot(step)
    if stop_at is not None and end % cfg.eval_interval:
        raise ConfigurationError("stop_at must fall on an eval_interval boundary")

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_step, best_em, out_dir)


# -- gradient check ------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-tensor relative error ``|a - n| / max(|a|, |n|)`` over the sampled
    entries (vector norms), plus the worst single-entry ratio for reference."""
    max_rel_error: float
    tolerance: float
    per_tensor: dict = field(default_factory=dict)
    per_tensor_elementwise: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    a = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    n = np.atleast_1d(np.asarray(numeric, dtype=np.float64))
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def _random_batch(mcfg: ModelConfig, B: int, g: torch.Generator):
    ids = torch.randint(4, mcfg.vocab_size, (B, mcfg.K, mcfg.L), generator=g)
    lengths = torch.randint(mcfg.L // 2, mcfg.L + 1, (B, mcfg.K), generator=g)
    mask = torch.arange(mcfg.L)[None, None, :] < lengths[..., None]
    ids = ids.masked_fill(~mask, PAD_ID)
    T = mcfg.max_target_len
    dec_in = torch.randint(4, mcfg.vocab_size, (B, T), generator=g)
    dec_in[:, 0] = 1
    gold = torch.randint(4, mcfg.vocab_size, (B, T), generator=g)
    gold[:, -1] = PAD_ID
    labels = torch.randint(0, 2, (B, mcfg.K), generator=g)
    return ids, mask, dec_in, gold, labels


def gradient_check(mcfg: ModelConfig, tolerance: float = 1e-4, n_samples: int = 200, variant="rfid",
                   step: float = 1e-3, seed: int = 0, batch_size: int = 2, frozen: Sequence[str] = (),
                   loss: str = "total", model: Optional[RFiDModel] = None) -> GradCheckReport:
    """Compare autograd gradients of the loss (rationale predictions held
    fixed) against central differences in float64.

    ``loss`` selects ``"total"``, ``"ratn"`` or ``"fid"``. Tensors named in
    ``frozen`` (or with ``requires_grad`` off) are left out of the report.
    """
    variant = Variant.parse(variant)
    model = (model or RFiDModel(model_config_for(mcfg, variant))).double()
    for name, p in model.named_parameters():
        if name in frozen:
            p.requires_grad_(False)
    if variant is Variant.FID:
        freeze_rationale_parameters(model)
    g = torch.Generator().manual_seed(seed)
    batch = _random_batch(model.cfg, batch_size, g)
    with torch.no_grad():
        preds = model(*batch[:3]).preds

    def objective():
        ratn, fid, _ = compute_losses(model, batch, variant, preds=preds)
        if loss == "ratn":
            return ratn
        if loss == "fid":
            return fid
        return fid if ratn is None else ratn + fid

    model.zero_grad()
    objective().backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, tolerance)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if not p.requires_grad:
                continue
            analytic = p.grad.detach().clone().reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
            flat = p.data.view(-1)
            idx = np.arange(flat.numel()) if flat.numel() <= n_samples else rng.choice(flat.numel(), n_samples, replace=False)
            numeric = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                up = objective().item()
                flat[i] = orig - step
                down = objective().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * step)
            a = analytic[torch.as_tensor(idx)].numpy()
            worst = relative_error(a, numeric)
            report.per_tensor[name] = worst
            report.per_tensor_elementwise[name] = max(relative_error(x, y, 1e-6) for x, y in zip(a, numeric))
            report.n_checked += len(idx)
            if worst > tolerance:
                report.failures.append(name)
    report.max_rel_error = max(report.per_tensor.values(), default=0.0)
    return report
