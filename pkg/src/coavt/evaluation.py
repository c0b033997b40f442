"""Retrieval (contrastive candidate selection + matching re-rank, Recall@k),
classification with frame aggregation (accuracy / mAP), and audio-visual
retrieval over mean-pooled query outputs.

Everything here runs under no_grad on a frozen model and is side-effect free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .trainer import assemble_batch, classification_cond

RECALL_KS = (1, 5, 10)


@dataclass
class RankedList:
    query_id: int
    candidate_ids: list
    scores: list
    stage: str  # "contrastive" | "reranked"


def rank_contrastive(query_id, gallery_ids, scores, k):
    """Top-k gallery candidates by descending score; ties by ascending id."""
    if len(gallery_ids) == 0:
        raise ValueError("rank_contrastive: empty gallery")
    if k > len(gallery_ids):
        raise ValueError(f"rank_contrastive: k={k} exceeds gallery size {len(gallery_ids)}")
    order = sorted(range(len(gallery_ids)), key=lambda i: (-scores[i], gallery_ids[i]))[:k]
    return RankedList(
        query_id=query_id,
        candidate_ids=[gallery_ids[i] for i in order],
        scores=[float(scores[i]) for i in order],
        stage="contrastive",
    )


def rerank_matching(ranked, match_scorer):
    """Rescore the candidate set with pairwise matching probabilities.

    match_scorer(query_id, candidate_ids) -> array of mean matched-class
    probabilities. The sort is stable, so equal scores keep the contrastive
    stage's order, and the candidate set is returned as a permutation.
    """
    if ranked.stage != "contrastive":
        raise ValueError(f"rerank_matching: expected contrastive stage, got {ranked.stage!r}")
    probs = np.asarray(match_scorer(ranked.query_id, ranked.candidate_ids), dtype=float)
    order = sorted(range(len(ranked.candidate_ids)), key=lambda i: -probs[i])
    return RankedList(
        query_id=ranked.query_id,
        candidate_ids=[ranked.candidate_ids[i] for i in order],
        scores=[float(probs[i]) for i in order],
        stage="reranked",
    )


def recall_at_k(ranked_lists, ground_truth, ks=RECALL_KS):
    """Percent of queries whose ground-truth item appears in the top k."""
    out = {}
    for k in ks:
        hits = 0
        for rl in ranked_lists:
            if rl.query_id not in ground_truth:
                raise ValueError(f"recall_at_k: no ground truth for query {rl.query_id}")
            if ground_truth[rl.query_id] in rl.candidate_ids[:k]:
                hits += 1
        out[f"R@{k}"] = 100.0 * hits / len(ranked_lists)
    return out


# ---------------------------------------------------------------------------
# text -> X retrieval
# ---------------------------------------------------------------------------

def build_retrieval_index(model, heads, items, modality):
    """Projected, normalized query-side vectors per item plus text globals.

    Retrieval uses the central frame of each item and no masking.
    """
    with dc.no_grad():
        batch = assemble_batch(items, model.cfg.patch_edge, rng=None, central_frame=True)
        cond = classification_cond(model, batch, modality)
        q = model.query_forward(cond, "extract")["queries"]
        qp = heads.projection.project_queries(q).values          # (N, Nq, d)
        t_cls, _ = model.encode_text(batch["captions"])
        tp = heads.projection.project_text(t_cls).values          # (N, d)
    return {
        "query_vecs": qp,
        "text_vecs": tp,
        "item_ids": batch["item_ids"],
        "cond_values": cond.values,
    }


def make_match_scorer(model, heads, index, captions_by_item):
    """Matching-probability scorer over cached conditioning sequences."""
    id_to_row = {int(i): r for r, i in enumerate(index["item_ids"])}

    def scorer(query_item_id, candidate_ids):
        rows = [id_to_row[int(c)] for c in candidate_ids]
        with dc.no_grad():
            cond = dc.Tensor(index["cond_values"][rows])
            text = np.stack([captions_by_item[int(query_item_id)]] * len(rows))
            q = model.query_forward(cond, "match", text_ids=text)["queries"]
            logits = heads.matching.logits(q)
            probs = dc.softmax_last(logits).values[:, :, 1].mean(axis=1)
        return probs

    return scorer


def text_to_x_retrieval(model, heads, items, modality, k=128, rerank=True):
    """Full protocol: contrastive top-k then matching re-rank, Recall@{1,5,10}."""
    index = build_retrieval_index(model, heads, items, modality)
    ids = [int(i) for i in index["item_ids"]]
    k = min(k, len(ids))
    # sim[j, i] = max over queries of <q_hat(item i), t_hat(caption j)>
    sims = np.einsum("iqd,jd->jiq", index["query_vecs"], index["text_vecs"]).max(axis=2)
    captions_by_item = {int(it.item_id): it.caption for it in items}
    scorer = make_match_scorer(model, heads, index, captions_by_item) if rerank else None
    ranked = []
    for j, qid in enumerate(ids):
        rl = rank_contrastive(qid, ids, sims[j], k)
        if rerank:
            rl = rerank_matching(rl, scorer)
        ranked.append(rl)
    truth = {qid: qid for qid in ids}
    metrics = recall_at_k(ranked, truth)
    metrics.update({"n_queries": len(ids), "k": k,
                    "stage": "reranked" if rerank else "contrastive"})
    return metrics


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def classify(model, cls_head, item, modality):
    """Post-softmax class probabilities for one item.

    For visual/audio-visual input, every stored frame is scored and the
    per-frame probabilities are arithmetically averaged; audio-only runs a
    single pass.
    """
    if cls_head is None:
        raise ValueError("classify: no classification head attached")
    frames = item.video_frames if modality in ("v", "av") else [None]
    probs = []
    with dc.no_grad():
        for frame in frames:
            batch = _single_item_batch(model, item, frame)
            cond = classification_cond(model, batch, modality)
            pooled = dc.mean_pool(model.query_forward(cond, "extract")["queries"], axis=-2)
            probs.append(dc.softmax_last(cls_head.logits(pooled)).values[0])
    return np.mean(probs, axis=0)


def _single_item_batch(model, item, frame):
    from .dataio import patchify
    audio = [patchify(item.audio, model.cfg.patch_edge)]
    visual = [patchify(frame if frame is not None else item.video_frames[0],
                       model.cfg.patch_edge)]
    return {"audio": audio, "visual": visual,
            "captions": np.atleast_2d(item.caption),
            "item_ids": np.array([item.item_id]),
            "class_ids": np.array([item.class_id])}


def accuracy_and_map(scores, labels):
    """Top-1 accuracy and macro mAP (one-vs-rest AP per class), in percent.

    Classes absent from the labels are excluded from the mAP average and
    counted in the returned warning field.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    acc = 100.0 * float((scores.argmax(axis=1) == labels).mean())
    n_classes = scores.shape[1]
    aps, absent = [], 0
    for c in range(n_classes):
        positives = labels == c
        if not positives.any():
            absent += 1
            continue
        order = np.argsort(-scores[:, c], kind="stable")
        pos_sorted = positives[order]
        cum_hits = np.cumsum(pos_sorted)
        precision = cum_hits / np.arange(1, len(labels) + 1)
        aps.append(float(precision[pos_sorted].sum() / positives.sum()))
    return {"accuracy": acc, "mAP": 100.0 * float(np.mean(aps)),
            "classes_absent": absent}


def evaluate_classification(model, cls_head, items, modality):
    scores = np.stack([classify(model, cls_head, it, modality) for it in items])
    labels = np.array([it.class_id for it in items])
    metrics = accuracy_and_map(scores, labels)
    metrics.update({"n_items": len(items)})
    return metrics


# ---------------------------------------------------------------------------
# audio-visual retrieval
# ---------------------------------------------------------------------------

def av_representations(model, items):
    """Mean-pooled query outputs per modality, from independent forward passes."""
    with dc.no_grad():
        batch = assemble_batch(items, model.cfg.patch_edge, rng=None, central_frame=True)
        ea = model.encode_audio(batch["audio"])
        ev = model.encode_visual(batch["visual"])
        e_a = model.joint_single(ea, "audio")
        e_v = model.joint_single(ev, "visual")
        q_a = model.query_forward(e_a, "extract")["queries"].values.mean(axis=1)
        q_v = model.query_forward(e_v, "extract")["queries"].values.mean(axis=1)
    return q_a, q_v, batch["item_ids"]


def av_retrieval(model, items, direction="a2v", k=None, reps=None):
    """Cosine ranking between mean-pooled audio and visual representations."""
    if len(items) == 0:
        raise ValueError("av_retrieval: empty item set")
    q_a, q_v, item_ids = reps if reps is not None else av_representations(model, items)
    if direction == "a2v":
        src, dst = q_a, q_v
    elif direction == "v2a":
        src, dst = q_v, q_a
    else:
        raise ValueError(f"av_retrieval: unknown direction {direction!r}")
    src = src / np.linalg.norm(src, axis=1, keepdims=True)
    dst = dst / np.linalg.norm(dst, axis=1, keepdims=True)
    sims = src @ dst.T
    ids = [int(i) for i in item_ids]
    k = min(k or len(ids), len(ids))
    ranked = [rank_contrastive(ids[i], ids, sims[i], k) for i in range(len(ids))]
    metrics = recall_at_k(ranked, {i: i for i in ids})
    metrics.update({"direction": direction, "n_queries": len(ids), "k": k})
    return metrics
