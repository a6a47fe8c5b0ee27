"""Multi-level face/head/body detection loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .anchors import PyramidAnchorConfig, PyramidLabelSet
from .network import HeadLayout, face_scores
from .tensor import ContractError, Tensor


def smooth_l1(d: float) -> float:
    a = abs(d)
    return 0.5 * d * d if a < 1 else a - 0.5


def smooth_l1_grad(d: float) -> float:
    return d if abs(d) < 1 else float(np.sign(d))


@dataclass
class BranchLoss:
    cls_loss: float  # summed log loss over sampled anchors (whole batch)
    reg_loss: float  # summed smooth-L1 over positives (whole batch)
    n_cls: int
    n_reg: int
    cls_term: float  # batch mean of lambda/N_cls * cls, per image
    reg_term: float  # batch mean of 1/N_reg * reg, per image


@dataclass
class LossBreakdown:
    branches: list = field(default_factory=list)
    total: Tensor | None = None

    @property
    def value(self) -> float:
        return float(self.total.data)

    def as_dict(self) -> dict:
        out = {"total": self.value}
        for k, b in enumerate(self.branches):
            out[f"cls{k}"] = b.cls_term
            out[f"reg{k}"] = b.reg_term
        return out


def flatten_branches(predictions: Sequence[Tensor], K: int) -> tuple:
    """Per-anchor (N*A, 2) class logits and (N*A, 4) offsets for every level k.

    Face logits go through max-in-out; head/body use their two raw channels.
    Column 0 is the object class, column 1 background.
    """
    n = predictions[0].shape[0]
    cls = {k: [] for k in range(K + 1)}
    reg = {k: [] for k in range(K + 1)}
    for tap, hm in enumerate(predictions):
        lay = HeadLayout(tap, 0)
        h, w = hm.shape[2:]
        for k in range(K + 1):
            if k == 0:
                pos, neg = face_scores(hm, tap)
                c = T.concat([pos, neg], axis=1)
            else:
                c = T.slice_axis(hm, 1, *_span(lay.cls_slice(min(k, 2))))
            r = T.slice_axis(hm, 1, *_span(lay.reg_slice(min(k, 2))))
            cls[k].append(T.reshape(T.transpose(c, (0, 2, 3, 1)), (n, h * w, 2)))
            reg[k].append(T.reshape(T.transpose(r, (0, 2, 3, 1)), (n, h * w, 4)))
    out_cls, out_reg = [], []
    for k in range(K + 1):
        c = T.concat(cls[k], axis=1) if len(cls[k]) > 1 else cls[k][0]
        r = T.concat(reg[k], axis=1) if len(reg[k]) > 1 else reg[k][0]
        a = c.shape[1]
        out_cls.append(T.reshape(c, (n * a, 2)))
        out_reg.append(T.reshape(r, (n * a, 4)))
    return out_cls, out_reg


def _span(start_len: tuple) -> tuple:
    s, n = start_len
    return s, s + n


def mine_negatives(neg_loss: np.ndarray, candidates: np.ndarray, count: int) -> np.ndarray:
    """Highest-loss negatives; equal losses resolve to the lower anchor index."""
    if count >= candidates.size:
        return candidates
    order = np.argsort(-neg_loss[candidates], kind="stable")
    return np.sort(candidates[order[:count]])


def multi_level_loss(predictions: Sequence[Tensor], labels, cfg: PyramidAnchorConfig) -> LossBreakdown:
    """Per-image normalised loss summed over levels, averaged over the batch."""
    if isinstance(labels, PyramidLabelSet):
        labels = [labels]
    n = predictions[0].shape[0]
    if len(labels) != n:
        raise ContractError(f"{len(labels)} label sets for a batch of {n}")
    A = int(sum(p.shape[2] * p.shape[3] for p in predictions))
    for ls in labels:
        if ls.labels.shape[1] != A:
            raise ContractError(f"label set covers {ls.labels.shape[1]} anchors, predictions {A}")
        if ls.K < cfg.K:
            raise ContractError(f"label set has levels 0..{ls.K}, loss needs 0..{cfg.K}")
    cls_flat, reg_flat = flatten_branches(predictions, cfg.K)
    lam = cfg.lambda_cls_reg
    terms = []
    breakdown = LossBreakdown()
    for k in range(cfg.K + 1):
        logp = T.log_softmax(cls_flat[k], axis=1)
        lp = logp.data
        cls_idx, cls_w, reg_rows, reg_tgt, reg_w = [], [], [], [], []
        cls_sum = reg_sum = 0.0
        n_cls = n_reg = 0
        cls_term = reg_term = 0.0
        for i, ls in enumerate(labels):
            lab = ls.labels[k]
            base = i * A
            pos = np.flatnonzero(lab == 1)
            cand = np.flatnonzero(lab == 0)
            if cfg.hard_negative_mining:
                neg = mine_negatives(-lp[base + np.arange(A), 1], cand, int(cfg.neg_pos_ratio * pos.size))
            else:
                neg = cand
            nc = pos.size + neg.size
            npos = pos.size
            if nc:
                rows = np.concatenate([(base + pos) * 2, (base + neg) * 2 + 1])
                cls_idx.append(rows)
                cls_w.append(np.full(rows.size, lam / nc / n))
                ce = -lp.reshape(-1)[rows]
                cls_sum += float(ce.sum())
                cls_term += lam * float(ce.sum()) / nc / n
            if npos:
                reg_rows.append(base + pos)
                reg_tgt.append(ls.targets[k, pos])
                reg_w.append(np.full(npos, 1.0 / npos / n))
            n_cls += nc
            n_reg += npos
        weight = cfg.lambda_k[k]
        if cls_idx and weight:
            rows = np.concatenate(cls_idx)
            picked = T.take_rows(T.reshape(logp, (-1,)), rows)
            terms.append(T.mul(picked, -weight * np.concatenate(cls_w)))
        if reg_rows and weight:
            rows = np.concatenate(reg_rows)
            pred = T.take_rows(reg_flat[k], rows)
            tgt = np.concatenate(reg_tgt).astype(pred.data.dtype)
            sl = T.smooth_l1(T.sub(pred, Tensor(tgt, dtype=pred.data.dtype)))
            reg_loss_rows = sl.data.sum(axis=1)
            reg_sum += float(reg_loss_rows.sum())
            w = np.concatenate(reg_w)
            reg_term += float((reg_loss_rows * w).sum())
            terms.append(T.mul(sl, (weight * w)[:, None]))
        elif reg_rows:
            rows = np.concatenate(reg_rows)
            d = reg_flat[k].data[rows] - np.concatenate(reg_tgt)
            a = np.abs(d)
            per_row = np.where(a < 1, 0.5 * d * d, a - 0.5).sum(axis=1)
            reg_sum += float(per_row.sum())
            reg_term += float((per_row * np.concatenate(reg_w)).sum())
        breakdown.branches.append(BranchLoss(cls_sum, reg_sum, n_cls, n_reg, cls_term, reg_term))
    if terms:
        flat = [T.reshape(t, (-1,)) for t in terms]
        total = T.sum(T.concat(flat, axis=0) if len(flat) > 1 else flat[0])
    else:
        total = T.mul(T.sum(cls_flat[0]), 0.0)
    breakdown.total = total
    return breakdown
