"""Transformer encoders: audio/visual streams, the single shared joint layer,
the text encoder, and the query path that cross-attends into joint outputs.

The text encoder and the query path run through the same block parameters
(one storage); the query path adds a cross-attention sublayer per block plus
the learnable query embeddings. Blocks are pre-norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .dataio import CLS, PatchSequence


@dataclass
class ModelConfig:
    hidden: int = 64
    heads: int = 4
    audio_layers: int = 2
    visual_layers: int = 2
    text_layers: int = 2
    n_queries: int = 16
    proj_dim: int = 32
    vocab_size: int = 64
    max_text_len: int = 16
    patch_edge: int = 8
    audio_frames: int = 64
    audio_bins: int = 16
    frame_height: int = 32
    frame_width: int = 32
    frame_channels: int = 1

    def validate(self):
        if self.hidden % self.heads:
            raise ValueError(f"model: hidden={self.hidden} not divisible by heads={self.heads}")
        if self.audio_frames % self.patch_edge or self.audio_bins % self.patch_edge:
            raise ValueError("model: spectrogram extents not divisible by patch edge")
        if self.frame_height % self.patch_edge or self.frame_width % self.patch_edge:
            raise ValueError("model: frame extents not divisible by patch edge")
        if self.n_queries < 1 or self.text_layers < 1:
            raise ValueError("model: need at least one query and one text layer")

    @property
    def audio_patches(self):
        return (self.audio_frames // self.patch_edge) * (self.audio_bins // self.patch_edge)

    @property
    def visual_patches(self):
        return (self.frame_height // self.patch_edge) * (self.frame_width // self.patch_edge)

    @property
    def audio_patch_dim(self):
        return self.patch_edge * self.patch_edge

    @property
    def visual_patch_dim(self):
        return self.patch_edge * self.patch_edge * self.frame_channels


def _trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) redrawn outside +-2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


MODES = ("extract", "match", "generate")


class CoavtModel:
    """Parameter container plus the forward passes of all encoder paths."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, init_std: float = 0.02):
        cfg.validate()
        self.cfg = cfg
        self._params: dict[str, dc.Tensor] = {}
        self._std = init_std
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1417)))
        c = cfg.hidden

        self._add("audio.patch.w", _trunc_normal(rng, (cfg.audio_patch_dim, c), self._std))
        self._add("audio.patch.b", np.zeros(c))
        self._add("audio.pos", _trunc_normal(rng, (cfg.audio_patches, c), self._std))
        self._add("audio.type", _trunc_normal(rng, (c,), self._std))
        for i in range(cfg.audio_layers):
            self._init_block(rng, f"audio.block{i}")
        self._init_ln(f"audio.ln_out")

        self._add("visual.patch.w", _trunc_normal(rng, (cfg.visual_patch_dim, c), self._std))
        self._add("visual.patch.b", np.zeros(c))
        self._add("visual.pos", _trunc_normal(rng, (cfg.visual_patches, c), self._std))
        self._add("visual.type", _trunc_normal(rng, (c,), self._std))
        for i in range(cfg.visual_layers):
            self._init_block(rng, f"visual.block{i}")
        self._init_ln("visual.ln_out")

        self._init_block(rng, "joint.block")
        self._init_ln("joint.ln_out")

        self._add("text.tok", _trunc_normal(rng, (cfg.vocab_size, c), self._std))
        self._add("text.pos", _trunc_normal(rng, (cfg.max_text_len, c), self._std))
        for i in range(cfg.text_layers):
            self._init_block(rng, f"text.block{i}")
        self._init_ln("text.ln_out")

        self._add("query.embeddings", _trunc_normal(rng, (cfg.n_queries, c), self._std))
        for i in range(cfg.text_layers):
            self._init_attn(rng, f"query.block{i}.cross")
            self._init_ln(f"query.block{i}.lnx")

    def _add(self, name, values):
        self._params[name] = dc.Tensor(values, requires_grad=True)

    def _init_attn(self, rng, prefix):
        c = self.cfg.hidden
        for nm in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.{nm}", _trunc_normal(rng, (c, c), self._std))
        for nm in ("bq", "bk", "bv", "bo"):
            self._add(f"{prefix}.{nm}", np.zeros(c))

    def _init_ln(self, prefix):
        c = self.cfg.hidden
        self._add(f"{prefix}.g", np.ones(c))
        self._add(f"{prefix}.b", np.zeros(c))

    def _init_block(self, rng, prefix):
        c = self.cfg.hidden
        self._init_attn(rng, f"{prefix}.attn")
        self._init_ln(f"{prefix}.ln1")
        self._add(f"{prefix}.ffn.w1", _trunc_normal(rng, (c, 4 * c), self._std))
        self._add(f"{prefix}.ffn.b1", np.zeros(4 * c))
        self._add(f"{prefix}.ffn.w2", _trunc_normal(rng, (4 * c, c), self._std))
        self._add(f"{prefix}.ffn.b2", np.zeros(c))
        self._init_ln(f"{prefix}.ln2")

    def params(self):
        return self._params

    def p(self, name):
        return self._params[name]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    # -- sublayers ----------------------------------------------------------

    def _linear(self, x, prefix, nm):
        return dc.add(dc.matmul(x, self.p(f"{prefix}.w{nm}")), self.p(f"{prefix}.b{nm}"))

    def _attention(self, x_q, x_kv, prefix, keep_mask=None):
        """Multi-head attention; keep_mask broadcasts over (B, H, Lq, Lk)."""
        cfg = self.cfg
        h, dh = cfg.heads, cfg.hidden // cfg.heads
        bsz, lq = x_q.shape[0], x_q.shape[1]
        lk = x_kv.shape[1]
        q = self._linear(x_q, prefix, "q")
        k = self._linear(x_kv, prefix, "k")
        v = self._linear(x_kv, prefix, "v")
        q = dc.transpose(dc.reshape(q, (bsz, lq, h, dh)), (0, 2, 1, 3))
        k = dc.transpose(dc.reshape(k, (bsz, lk, h, dh)), (0, 2, 1, 3))
        v = dc.transpose(dc.reshape(v, (bsz, lk, h, dh)), (0, 2, 1, 3))
        scores = dc.scale(dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if keep_mask is not None:
            scores = dc.masked_fill(scores, keep_mask)
        attn = dc.softmax_last(scores)
        out = dc.matmul(attn, v)
        out = dc.reshape(dc.transpose(out, (0, 2, 1, 3)), (bsz, lq, cfg.hidden))
        return self._linear(out, prefix, "o")

    def _ln(self, x, prefix):
        return dc.layer_norm(x, self.p(f"{prefix}.g"), self.p(f"{prefix}.b"))

    def _ffn(self, x, prefix):
        hmid = dc.gelu(dc.add(dc.matmul(x, self.p(f"{prefix}.w1")), self.p(f"{prefix}.b1")))
        return dc.add(dc.matmul(hmid, self.p(f"{prefix}.w2")), self.p(f"{prefix}.b2"))

    def _base_block(self, x, prefix, keep_mask=None):
        # pre-norm: x + attn(ln1(x)), then x + ffn(ln2(x))
        normed = self._ln(x, f"{prefix}.ln1")
        x = dc.add(x, self._attention(normed, normed, f"{prefix}.attn", keep_mask))
        x = dc.add(x, self._ffn(self._ln(x, f"{prefix}.ln2"), f"{prefix}.ffn"))
        return x

    # -- modality encoders ---------------------------------------------------

    def _stack_patches(self, seqs, modality):
        if isinstance(seqs, PatchSequence):
            seqs = [seqs]
        if not seqs:
            raise ValueError("encoder: empty batch")
        expect_dim = self.cfg.audio_patch_dim if modality == "audio" else self.cfg.visual_patch_dim
        for s in seqs:
            if s.modality != modality:
                raise ValueError(f"encoder: expected {modality} patches, got {s.modality}")
            if s.patches.shape[1] != expect_dim:
                raise ValueError(
                    f"encoder: patch vectors of length {s.patches.shape[1]}, "
                    f"embedding table expects {expect_dim}")
        lens = {len(s.positions) for s in seqs}
        if len(lens) != 1:
            raise ValueError("encoder: a batch must share one retained-patch count")
        patches = np.stack([s.patches for s in seqs])
        positions = np.stack([s.positions for s in seqs])
        return patches, positions

    def _encode_stream(self, seqs, stream):
        patches, positions = self._stack_patches(seqs, stream)
        n_layers = self.cfg.audio_layers if stream == "audio" else self.cfg.visual_layers
        x = dc.add(dc.matmul(dc.Tensor(patches), self.p(f"{stream}.patch.w")),
                   self.p(f"{stream}.patch.b"))
        x = dc.add(x, dc.embedding_lookup(self.p(f"{stream}.pos"), positions))
        for i in range(n_layers):
            x = self._base_block(x, f"{stream}.block{i}")
        return self._ln(x, f"{stream}.ln_out")

    def encode_audio(self, seqs):
        """Patch batch -> E_A' of shape (B, n_retained, C).

        Positional rows are indexed by each sequence's retained positions, so
        masked inputs keep their original grid coordinates.
        """
        return self._encode_stream(seqs, "audio")

    def encode_visual(self, seqs):
        """Patch batch -> E_V' of shape (B, n_retained, C)."""
        return self._encode_stream(seqs, "visual")

    def joint_single(self, e, stream):
        """One joint-layer pass over a single stream (adds its type embedding)."""
        x = dc.add(e, self.p(f"{stream}.type"))
        x = self._base_block(x, "joint.block")
        return self._ln(x, "joint.ln_out")

    def joint_forward(self, ea, ev):
        """Three independent passes of the shared joint layer.

        Returns (E_A, E_V, E_AV); the AV pass runs on the concatenation of
        both streams (each carrying its modality-type embedding), so
        |E_AV| = |E_A'| + |E_V'|.
        """
        if ea.shape[1] == 0 or ev.shape[1] == 0:
            raise ValueError("joint_forward: empty input sequence")
        e_a = self.joint_single(ea, "audio")
        e_v = self.joint_single(ev, "visual")
        cat = dc.concat_seq([dc.add(ea, self.p("audio.type")),
                             dc.add(ev, self.p("visual.type"))], axis=-2)
        e_av = self._ln(self._base_block(cat, "joint.block"), "joint.ln_out")
        return e_a, e_v, e_av

    # -- text and query paths --------------------------------------------------

    def _embed_text(self, token_ids, position_offset=0):
        token_ids = np.atleast_2d(np.asarray(token_ids))
        lt = token_ids.shape[1]
        if lt > self.cfg.max_text_len:
            raise ValueError(f"text: sequence length {lt} exceeds max {self.cfg.max_text_len}")
        pos = np.arange(position_offset, position_offset + lt)
        x = dc.embedding_lookup(self.p("text.tok"), token_ids)
        return dc.add(x, dc.embedding_lookup(self.p("text.pos"), pos)), token_ids

    def encode_text(self, token_ids, pad_mask=None):
        """Bidirectional text encoding; returns (t_cls (B, C), sequence (B, L, C)).

        pad_mask, when given, is (B, L) with True at real tokens; padded key
        positions are excluded from attention so t_cls matches the unpadded run.
        """
        x, token_ids = self._embed_text(token_ids)
        if token_ids.shape[1] == 0 or np.any(token_ids[:, 0] != CLS):
            raise ValueError("encode_text: sequences must start with the [CLS] token")
        keep = None
        if pad_mask is not None:
            keep = np.asarray(pad_mask, dtype=bool)[:, None, None, :]
        for i in range(self.cfg.text_layers):
            x = self._base_block(x, f"text.block{i}", keep_mask=keep)
        x = self._ln(x, "text.ln_out")
        t_cls = dc.slice_seq(x, 0, 1, axis=-2)
        bsz = token_ids.shape[0]
        return dc.reshape(t_cls, (bsz, self.cfg.hidden)), x

    def _generate_mask(self, n_q, lt):
        """Queries attend only to queries; text token i sees all queries and text <= i."""
        n = n_q + lt
        keep = np.zeros((n, n), dtype=bool)
        keep[:n_q, :n_q] = True
        keep[n_q:, :n_q] = True
        keep[n_q:, n_q:] = np.tril(np.ones((lt, lt), dtype=bool))
        return keep

    def query_forward(self, cond, mode, text_ids=None):
        """Run the query path against a conditioning sequence.

        cond: (B, Lc, C) joint-encoder output (E_A, E_V or E_AV).
        mode: "extract" pools cond into the queries alone; "match" runs the
        joint [queries; text] sequence with a full bidirectional mask;
        "generate" applies the multimodal causal mask and returns vocabulary
        logits for the text positions via the tied token embedding.

        Returns {"queries": (B, Nq, C)} plus, for match, "text" (B, L, C) and,
        for generate, "logits" (B, L, vocab).
        """
        if mode not in MODES:
            raise ValueError(f"query_forward: unknown mode {mode!r}")
        if cond.shape[1] == 0:
            raise ValueError("query_forward: empty conditioning sequence")
        if mode != "extract" and text_ids is None:
            raise ValueError(f"query_forward: mode {mode!r} needs text tokens")
        cfg = self.cfg
        bsz, n_q = cond.shape[0], cfg.n_queries

        x = dc.expand_batch(self.p("query.embeddings"), bsz)
        lt = 0
        keep = None
        if mode != "extract":
            t_emb, text_ids = self._embed_text(text_ids)
            if text_ids.shape[0] != bsz:
                raise ValueError("query_forward: text batch size differs from cond")
            lt = text_ids.shape[1]
            x = dc.concat_seq([x, t_emb], axis=-2)
            if mode == "generate":
                keep = self._generate_mask(n_q, lt)

        for i in range(cfg.text_layers):
            normed = self._ln(x, f"text.block{i}.ln1")
            x = dc.add(x, self._attention(normed, normed, f"text.block{i}.attn", keep))
            if lt:
                xq = dc.slice_seq(x, 0, n_q, axis=-2)
                xt = dc.slice_seq(x, n_q, n_q + lt, axis=-2)
            else:
                xq, xt = x, None
            xq = dc.add(xq, self._attention(self._ln(xq, f"query.block{i}.lnx"), cond,
                                            f"query.block{i}.cross"))
            x = dc.concat_seq([xq, xt], axis=-2) if xt is not None else xq
            x = dc.add(x, self._ffn(self._ln(x, f"text.block{i}.ln2"), f"text.block{i}.ffn"))

        x = self._ln(x, "text.ln_out")
        if mode == "extract":
            return {"queries": x}
        out = {"queries": dc.slice_seq(x, 0, n_q, axis=-2)}
        text_h = dc.slice_seq(x, n_q, n_q + lt, axis=-2)
        if mode == "match":
            out["text"] = text_h
        else:
            out["logits"] = dc.matmul(text_h, dc.transpose(self.p("text.tok"), (1, 0)))
        return out
