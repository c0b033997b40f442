"""Pre-training objectives: contrastive, matching and language-modeling
losses per modality pair, their per-pair sums, and the total across pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .dataio import BOS

PAIRS = ("av", "a", "v")


class ProjectionHead:
    """Maps query outputs and text [CLS] into one normalized low-dim space."""

    def __init__(self, hidden, proj_dim, rng, init_std=0.02):
        from .encoders import _trunc_normal
        self.w_q = dc.Tensor(_trunc_normal(rng, (hidden, proj_dim), init_std), requires_grad=True)
        self.w_t = dc.Tensor(_trunc_normal(rng, (hidden, proj_dim), init_std), requires_grad=True)

    def project_queries(self, q):
        return dc.l2_normalize_last(dc.matmul(q, self.w_q))

    def project_text(self, t):
        return dc.l2_normalize_last(dc.matmul(t, self.w_t))

    def params(self):
        return {"heads.proj.q.w": self.w_q, "heads.proj.t.w": self.w_t}


class ContrastiveTemperature:
    """Learnable temperature, parameterized as log tau so tau stays positive."""

    def __init__(self, tau0=0.07):
        self.log_tau = dc.Tensor(np.log(tau0), requires_grad=True)

    @property
    def tau(self):
        return float(np.exp(self.log_tau.values))

    def inv_tau(self):
        return dc.exp(dc.scale(self.log_tau, -1.0))

    def params(self):
        return {"heads.temp.log_tau": self.log_tau}


class MatchingHead:
    """Two-class classifier applied independently to each query row."""

    def __init__(self, hidden, rng, init_std=0.02):
        from .encoders import _trunc_normal
        self.w = dc.Tensor(_trunc_normal(rng, (hidden, 2), init_std), requires_grad=True)
        self.b = dc.Tensor(np.zeros(2), requires_grad=True)

    def logits(self, q_outputs):
        return dc.add(dc.matmul(q_outputs, self.w), self.b)

    def params(self):
        return {"heads.match.w": self.w, "heads.match.b": self.b}


class PretrainHeads:
    def __init__(self, cfg, seed=0, init_std=0.02):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x4EAD)))
        self.projection = ProjectionHead(cfg.hidden, cfg.proj_dim, rng, init_std)
        self.temperature = ContrastiveTemperature()
        self.matching = MatchingHead(cfg.hidden, rng, init_std)

    def params(self):
        out = {}
        out.update(self.projection.params())
        out.update(self.temperature.params())
        out.update(self.matching.params())
        return out

    def zero_grad(self):
        for t in self.params().values():
            t.grad = None


@dataclass
class LossReport:
    """The nine loss terms, their sum, and the current temperature."""
    step: int
    components: dict  # {"av": {"xtc":, "xtm":, "xlm":}, "a": ..., "v": ...}
    total: float
    tau: float

    def to_json(self):
        row = {"step": self.step, "l_total": self.total, "tau": self.tau}
        for pair in PAIRS:
            for term in ("xtc", "xtm", "xlm"):
                row[f"{pair}_{term}"] = self.components[pair][term]
        return json.dumps(row)

    @staticmethod
    def from_json(line):
        row = json.loads(line)
        comps = {p: {t: row[f"{p}_{t}"] for t in ("xtc", "xtm", "xlm")} for p in PAIRS}
        return LossReport(step=row["step"], components=comps,
                          total=row["l_total"], tau=row["tau"])


# ---------------------------------------------------------------------------
# individual objectives
# ---------------------------------------------------------------------------

def similarity(q_outputs, t_cls, head):
    """Highest cosine between any projected query row and the projected [CLS].

    q_outputs: (Nq, C); t_cls: (C,). Returns a scalar Tensor in [-1, 1].
    """
    qp = head.project_queries(q_outputs)                       # (Nq, d)
    tp = head.project_text(dc.reshape(t_cls, (1, t_cls.shape[-1])))  # (1, d)
    dots = dc.matmul(qp, dc.transpose(tp, (1, 0)))             # (Nq, 1)
    return dc.reshape(dc.max_reduce(dots, axis=0), ())


def similarity_matrix(proj_q, proj_t):
    """All-pairs scores: sim[i, j] = max over queries of <q_hat(i), t_hat(j)>.

    proj_q: (B, Nq, d) normalized query projections; proj_t: (B, d).
    """
    bsz, n_q, d = proj_q.shape
    flat = dc.reshape(proj_q, (bsz * n_q, d))
    dots = dc.matmul(flat, dc.transpose(proj_t, (1, 0)))   # (B*Nq, B)
    return dc.max_reduce(dc.reshape(dots, (bsz, n_q, bsz)), axis=1)


def contrastive_loss(sim, inv_tau):
    """Symmetric InfoNCE over a square similarity matrix.

    Row softmax classifies modality->text, column softmax text->modality;
    the result is the mean of the two directional terms.
    """
    bsz = sim.shape[0]
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise dc.ShapeMismatch(f"contrastive_loss: similarity matrix must be square, got {sim.shape}")
    logits = dc.scale(sim, inv_tau) if isinstance(inv_tau, dc.Tensor) else dc.scale(sim, float(inv_tau))
    diag = np.arange(bsz)
    l_x2t = dc.mean_pool(dc.cross_entropy_from_logits(logits, diag), axis=None)
    l_t2x = dc.mean_pool(dc.cross_entropy_from_logits(dc.transpose(logits, (1, 0)), diag), axis=None)
    return dc.scale(dc.add(l_x2t, l_t2x), 0.5)


def matching_loss(q_outputs, head, labels):
    """Mean per-query binary cross-entropy against match labels.

    q_outputs: (B, Nq, C) from a match-mode forward; labels: (B,) in {0, 1}.
    Each query row is scored by the two-class head; the per-example loss
    averages the per-query cross-entropies, equivalent to BCE on the
    matched-class probability.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.isin(labels, (0, 1)).all():
        raise ValueError("matching_loss: labels must be a vector of {0,1}")
    logits = head.logits(q_outputs)                    # (B, Nq, 2)
    n_q = logits.shape[1]
    targets = np.broadcast_to(labels[:, None], (labels.shape[0], n_q)).astype(np.int64)
    return dc.mean_pool(dc.cross_entropy_from_logits(logits, targets), axis=None)


def lm_loss(logits, targets, pad_mask=None):
    """Mean per-token cross-entropy of next-token prediction.

    logits: (B, L, V); targets: (B, L) caption tokens shifted left (they end
    at [EOS] and never include [CLS]). Padded positions, when flagged, are
    excluded from the mean.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise dc.ShapeMismatch(
            f"lm_loss: logits {logits.shape} vs shifted targets {targets.shape}")
    per_tok = dc.cross_entropy_from_logits(logits, targets)
    if pad_mask is None:
        return dc.mean_pool(per_tok, axis=None)
    keep = np.asarray(pad_mask, dtype=float)
    kept = dc.mul(per_tok, dc.Tensor(keep))
    total = dc.mean_pool(kept, axis=None)
    return dc.scale(total, per_tok.values.size / keep.sum())


def decoder_io(captions):
    """Split captions into (decoder inputs, targets) for generation.

    Caption [CLS, c1..cn, EOS] becomes inputs [BOS, c1..cn] and targets
    [c1..cn, EOS].
    """
    captions = np.atleast_2d(np.asarray(captions))
    dec_in = captions.copy()[:, :-1]
    dec_in[:, 0] = BOS
    return dec_in, captions[:, 1:].copy()


# ---------------------------------------------------------------------------
# pair and total losses
# ---------------------------------------------------------------------------

def _zero():
    return dc.Tensor(0.0)


def pair_loss(model, heads, cond, captions, t_cls_proj, rng, contrastive_only=False):
    """L_X = XTC + XTM + XLM for one conditioning modality.

    cond: (B, Lc, C) joint output for this pair; captions: (B, L) token ids;
    t_cls_proj: (B, d) projected text globals shared across pairs. rng drives
    in-batch negative sampling for the matching task.
    """
    bsz = cond.shape[0]
    q_ext = model.query_forward(cond, "extract")["queries"]
    sim = similarity_matrix(heads.projection.project_queries(q_ext), t_cls_proj)
    xtc = contrastive_loss(sim, heads.temperature.inv_tau())
    if contrastive_only:
        return xtc, {"xtc": float(xtc.values), "xtm": 0.0, "xlm": 0.0}

    # one positive, one negative caption and one negative condition per item
    neg_text = np.array([_other_index(rng, i, bsz) for i in range(bsz)])
    neg_cond = np.array([_other_index(rng, i, bsz) for i in range(bsz)])
    cond3 = dc.concat_seq([cond, cond, dc.embedding_lookup(cond, neg_cond)], axis=0)
    text3 = np.concatenate([captions, captions[neg_text], captions])
    labels = np.concatenate([np.ones(bsz, dtype=np.int64),
                             np.zeros(2 * bsz, dtype=np.int64)])
    q_match = model.query_forward(cond3, "match", text_ids=text3)["queries"]
    xtm = matching_loss(q_match, heads.matching, labels)

    dec_in, targets = decoder_io(captions)
    logits = model.query_forward(cond, "generate", text_ids=dec_in)["logits"]
    xlm = lm_loss(logits, targets)

    loss = dc.add(dc.add(xtc, xtm), xlm)
    comps = {"xtc": float(xtc.values), "xtm": float(xtm.values), "xlm": float(xlm.values)}
    return loss, comps


def _other_index(rng, i, n):
    if n < 2:
        return i
    j = int(rng.integers(0, n - 1))
    return j if j < i else j + 1


def total_loss(model, heads, batch, rng, step=0,
               disable_pair_a=False, disable_pair_v=False, contrastive_only=False):
    """Sum of the pair losses over {AV, A, V}, honoring ablation flags.

    batch: dict with "audio"/"visual" patch-sequence lists and "captions"
    (B, L). Disabled pairs contribute exactly zero and report zeros.
    """
    captions = batch["captions"]
    if captions.shape[0] < 1:
        raise ValueError("total_loss: empty batch")
    ea = model.encode_audio(batch["audio"])
    ev = model.encode_visual(batch["visual"])
    e_a, e_v, e_av = model.joint_forward(ea, ev)
    t_cls, _ = model.encode_text(captions)
    t_proj = heads.projection.project_text(t_cls)

    conds = {"av": e_av, "a": e_a, "v": e_v}
    enabled = {"av": True, "a": not disable_pair_a, "v": not disable_pair_v}
    total = _zero()
    components = {}
    for pair in PAIRS:
        if not enabled[pair]:
            components[pair] = {"xtc": 0.0, "xtm": 0.0, "xlm": 0.0}
            continue
        loss, comps = pair_loss(model, heads, conds[pair], captions, t_proj, rng,
                                contrastive_only=contrastive_only)
        total = dc.add(total, loss)
        components[pair] = comps

    report = LossReport(step=step, components=components,
                        total=float(total.values), tau=heads.temperature.tau)
    return total, report
