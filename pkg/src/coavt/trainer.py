"""AdamW optimization, the warmup-cosine schedule, pre-training and
fine-tuning loops, and checkpoint persistence.

Per-step randomness (batch sampling, frame choice, masking, negatives) is
drawn from a stream keyed by (seed, step), so runs are reproducible and a
resumed run continues bit-for-bit where the interrupted one left off.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .dataio import Frame, Spectrogram, mask_patches, patchify
from .encoders import CoavtModel, _trunc_normal
from .objectives import PretrainHeads, total_loss

CKPT_MAGIC = b"COAVT-CKPT v1\n"


class CheckpointError(ValueError):
    """Checkpoint file has a bad header, is truncated, or names don't match."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 25
    peak_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_steps: int = -1  # -1: min(2000, 10% of total steps)
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.05
    mask_ratio_audio: float = 0.75
    mask_ratio_visual: float = 0.5
    seed: int = 0
    grad_clip: float = 1.0  # 0 disables
    disable_pair_a: bool = False
    disable_pair_v: bool = False
    disable_masking: bool = False
    contrastive_only: bool = False

    def validate(self):
        if not (0 < self.min_lr <= self.peak_lr):
            raise ValueError(f"train: need 0 < min_lr <= peak_lr, got {self.min_lr}/{self.peak_lr}")
        for r in (self.mask_ratio_audio, self.mask_ratio_visual):
            if not (0.0 <= r < 1.0):
                raise ValueError(f"train: mask ratio must be in [0, 1), got {r}")
        for b in (self.beta1, self.beta2):
            if not (0.0 < b < 1.0):
                raise ValueError(f"train: betas must be in (0, 1), got {b}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("train: batch_size and epochs must be positive")

    def resolved_warmup(self, total_steps):
        if self.warmup_steps >= 0:
            return self.warmup_steps
        return min(2000, max(1, total_steps // 10))


def lr_at(step, cfg, total_steps, warmup=None):
    """Linear 0 -> peak over warmup, then cosine peak -> min_lr."""
    if step < 0 or step > total_steps:
        raise ValueError(f"lr_at: step {step} outside [0, {total_steps}]")
    w = cfg.resolved_warmup(total_steps) if warmup is None else warmup
    if w > 0 and step <= w:
        return cfg.peak_lr * step / w
    span = max(total_steps - w, 1)
    progress = (step - w) / span
    return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Decay applies only to weight matrices (ndim >= 2), never to biases,
    layer-norm parameters, the temperature, or the query embeddings.
    """

    EPS = 1e-8

    def __init__(self, params, cfg):
        self.params = dict(params)
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.values) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.values) for k, t in self.params.items()}
        self.t = 0

    @staticmethod
    def decays(name, tensor):
        return tensor.values.ndim >= 2 and name != "query.embeddings"

    def step(self, lr):
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.EPS)
            if self.cfg.weight_decay and self.decays(name, p):
                p.values -= lr * self.cfg.weight_decay * p.values
            p.values -= lr * update


def adamw_step(params, lr, cfg, state=None):
    """Functional single step; returns the optimizer so state can carry over."""
    opt = state if state is not None else AdamW(params, cfg)
    opt.step(lr)
    return opt


def clip_global_norm(params, max_norm):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= s
    return norm


# ---------------------------------------------------------------------------
# train state and batches
# ---------------------------------------------------------------------------

class ClassifierHead:
    def __init__(self, hidden, n_classes, rng):
        self.w = dc.Tensor(_trunc_normal(rng, (hidden, n_classes)), requires_grad=True)
        self.b = dc.Tensor(np.zeros(n_classes), requires_grad=True)

    def logits(self, pooled):
        return dc.add(dc.matmul(pooled, self.w), self.b)

    def params(self):
        return {"cls.w": self.w, "cls.b": self.b}


class TrainState:
    """Model plus heads (plus an optional classifier) as one named-param set."""

    def __init__(self, model: CoavtModel, heads: PretrainHeads, cls_head=None):
        self.model = model
        self.heads = heads
        self.cls_head = cls_head

    @classmethod
    def fresh(cls, model_cfg, seed=0, init_std=0.02):
        return cls(CoavtModel(model_cfg, seed=seed, init_std=init_std),
                   PretrainHeads(model_cfg, seed=seed, init_std=init_std))

    def params(self):
        out = dict(self.model.params())
        out.update(self.heads.params())
        if self.cls_head is not None:
            out.update(self.cls_head.params())
        return out

    def zero_grad(self):
        for t in self.params().values():
            t.grad = None

    def attach_classifier(self, n_classes, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC195)))
        self.cls_head = ClassifierHead(self.model.cfg.hidden, n_classes, rng)
        return self.cls_head


def step_rng(seed, step, lane=0):
    return np.random.default_rng(np.random.SeedSequence((seed, lane, step)))


def select_frame(item, rng=None, central=False):
    if central or rng is None:
        return item.video_frames[len(item.video_frames) // 2]
    return item.video_frames[int(rng.integers(0, len(item.video_frames)))]


def assemble_batch(items, edge, rng, mask_a=0.0, mask_v=0.0, central_frame=False):
    """Patchify + mask one batch; one frame per item (random or central)."""
    audio, visual = [], []
    for it in items:
        a = patchify(it.audio, edge)
        frame = select_frame(it, rng, central=central_frame)
        v = patchify(frame, edge)
        if mask_a > 0:
            a = mask_patches(a, mask_a, rng)
        if mask_v > 0:
            v = mask_patches(v, mask_v, rng)
        audio.append(a)
        visual.append(v)
    captions = np.stack([it.caption for it in items])
    return {
        "audio": audio,
        "visual": visual,
        "captions": captions,
        "item_ids": np.array([it.item_id for it in items]),
        "class_ids": np.array([it.class_id for it in items]),
    }


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------

def pretrain_step(state, train_items, cfg, step, total_steps, opt):
    """One optimization step; returns the LossReport."""
    rng = step_rng(cfg.seed, step)
    idx = rng.choice(len(train_items), size=cfg.batch_size, replace=False)
    mask_a = 0.0 if cfg.disable_masking else cfg.mask_ratio_audio
    mask_v = 0.0 if cfg.disable_masking else cfg.mask_ratio_visual
    batch = assemble_batch([train_items[i] for i in idx],
                           state.model.cfg.patch_edge, rng, mask_a, mask_v)
    state.zero_grad()
    loss, report = total_loss(
        state.model, state.heads, batch, rng, step=step,
        disable_pair_a=cfg.disable_pair_a, disable_pair_v=cfg.disable_pair_v,
        contrastive_only=cfg.contrastive_only)
    dc.backward(loss)
    clip_global_norm(state.params(), cfg.grad_clip)
    opt.step(lr_at(step, cfg, total_steps))
    return report


def pretrain(state, train_items, cfg, out_dir=None, start_step=0, opt=None,
             metrics_fh=None, on_epoch_end=None):
    """Full pre-training loop. Returns (reports, optimizer).

    Checkpoints are written at each epoch end when out_dir is given; resuming
    from such a checkpoint (start_step, opt restored) reproduces the
    uninterrupted run exactly.
    """
    cfg.validate()
    if len(train_items) < cfg.batch_size:
        raise ValueError(
            f"pretrain: corpus of {len(train_items)} items is smaller than "
            f"batch_size={cfg.batch_size}")
    steps_per_epoch = len(train_items) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    if opt is None:
        opt = AdamW(state.params(), cfg)
    reports = []
    for step in range(start_step + 1, total_steps + 1):
        report = pretrain_step(state, train_items, cfg, step, total_steps, opt)
        reports.append(report)
        if metrics_fh is not None:
            metrics_fh.write(report.to_json() + "\n")
        if step % steps_per_epoch == 0:
            epoch = step // steps_per_epoch
            if out_dir is not None:
                save_checkpoint(f"{out_dir}/epoch_{epoch:03d}.ckpt", state, opt, step)
            if on_epoch_end is not None:
                on_epoch_end(epoch, step, reports)
    return reports, opt


def benchmark_step_time(state, train_items, cfg, n_steps):
    """Mean wall-clock seconds per pretrain step over n_steps."""
    opt = AdamW(state.params(), cfg)
    times = []
    for step in range(1, n_steps + 1):
        t0 = time.perf_counter()
        pretrain_step(state, train_items, cfg, step, n_steps, opt)
        times.append(time.perf_counter() - t0)
    return float(np.mean(times))


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def classification_cond(model, batch, modality):
    ea = model.encode_audio(batch["audio"]) if modality in ("a", "av") else None
    ev = model.encode_visual(batch["visual"]) if modality in ("v", "av") else None
    if modality == "a":
        return model.joint_single(ea, "audio")
    if modality == "v":
        return model.joint_single(ev, "visual")
    _, _, e_av = model.joint_forward(ea, ev)
    return e_av


def finetune(state, train_items, task, cfg, modality="av", n_classes=None, out_dir=None,
             metrics_fh=None):
    """Fine-tune for retrieval (pre-training objectives, no masking) or
    classification (fresh linear head over mean-pooled query outputs)."""
    if task == "retrieval":
        ft_cfg = replace(cfg, disable_masking=True)
        return pretrain(state, train_items, ft_cfg, out_dir=out_dir, metrics_fh=metrics_fh)
    if task != "classification":
        raise ValueError(f"finetune: unknown task {task!r}")
    if modality not in ("a", "v", "av"):
        raise ValueError(f"finetune: unknown modality {modality!r}")
    cfg.validate()
    if n_classes is None:
        n_classes = int(max(it.class_id for it in train_items)) + 1
    if state.cls_head is None:
        state.attach_classifier(n_classes, seed=cfg.seed)
    if len(train_items) < cfg.batch_size:
        raise ValueError("finetune: corpus smaller than batch_size")
    steps_per_epoch = len(train_items) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    opt = AdamW(state.params(), cfg)
    history = []
    for step in range(1, total_steps + 1):
        rng = step_rng(cfg.seed, step, lane=1)
        idx = rng.choice(len(train_items), size=cfg.batch_size, replace=False)
        batch = assemble_batch([train_items[i] for i in idx],
                               state.model.cfg.patch_edge, rng)
        state.zero_grad()
        cond = classification_cond(state.model, batch, modality)
        pooled = dc.mean_pool(state.model.query_forward(cond, "extract")["queries"], axis=-2)
        ce = dc.mean_pool(
            dc.cross_entropy_from_logits(state.cls_head.logits(pooled), batch["class_ids"]),
            axis=None)
        dc.backward(ce)
        clip_global_norm(state.params(), cfg.grad_clip)
        opt.step(lr_at(step, cfg, total_steps))
        history.append(float(ce.values))
        if metrics_fh is not None:
            metrics_fh.write(
                f'{{"step": {step}, "task": "classification", "modality": "{modality}", '
                f'"ce": {float(ce.values)}}}\n')
    if out_dir is not None:
        save_checkpoint(f"{out_dir}/finetune_{task}_{modality}.ckpt", state, opt, total_steps)
    return history, opt


# ---------------------------------------------------------------------------
# checkpoints (COAVT-CKPT v1)
# ---------------------------------------------------------------------------

def _write_record(fh, name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    enc = name.encode("utf-8")
    fh.write(struct.pack("<I", len(enc)))
    fh.write(enc)
    fh.write(struct.pack("<I", arr.ndim))
    for s in arr.shape:
        fh.write(struct.pack("<I", s))
    fh.write(arr.tobytes())


def save_named_tensors(path, named):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        for name, arr in named.items():
            _write_record(fh, name, arr)


def load_named_tensors(path):
    named = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad or missing checkpoint header {magic!r}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) < 4:
                raise CheckpointError(f"{path}: truncated record")
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            rank_raw = fh.read(4)
            if len(rank_raw) < 4:
                raise CheckpointError(f"{path}: truncated record for {name!r}")
            (rank,) = struct.unpack("<I", rank_raw)
            shape = []
            for _ in range(rank):
                ext = fh.read(4)
                if len(ext) < 4:
                    raise CheckpointError(f"{path}: truncated extents for {name!r}")
                shape.append(struct.unpack("<I", ext)[0])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) < count * 8:
                raise CheckpointError(f"{path}: truncated values for {name!r}")
            named[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return named


def save_checkpoint(path, state, opt=None, step=0):
    """Model + heads parameters, optimizer moments, and the step counter.

    Shared text/query parameters are one storage and therefore serialize
    once, under the text-encoder name.
    """
    named = {name: t.values for name, t in state.params().items()}
    named["meta.step"] = np.asarray(float(step))
    if opt is not None:
        named["meta.opt_t"] = np.asarray(float(opt.t))
        for name in state.params():
            named[f"opt.m.{name}"] = opt.m[name]
            named[f"opt.v.{name}"] = opt.v[name]
    save_named_tensors(path, named)


def load_checkpoint(path, state, cfg=None):
    """Restore parameters (and optimizer state if present) into `state`.

    Returns (step, optimizer-or-None). Unknown parameter names are an error;
    missing ones too.
    """
    named = load_named_tensors(path)
    step = int(named.pop("meta.step", np.asarray(0.0)))
    opt_t = named.pop("meta.opt_t", None)
    if "cls.w" in named and state.cls_head is None:
        state.attach_classifier(named["cls.w"].shape[1])
    params = state.params()
    opt = None
    if opt_t is not None:
        if cfg is None:
            cfg = TrainConfig()
        opt = AdamW(params, cfg)
        opt.t = int(opt_t)
    for name, arr in named.items():
        if name.startswith("opt.m.") or name.startswith("opt.v."):
            target, key = (opt.m, name[6:]) if name.startswith("opt.m.") else (opt.v, name[6:])
            if opt is None or key not in params:
                raise CheckpointError(f"{path}: optimizer record for unknown tensor {key!r}")
            target[key] = arr
            continue
        if name not in params:
            raise CheckpointError(f"{path}: unknown tensor name {name!r}")
        if params[name].values.shape != arr.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: "
                f"{params[name].values.shape} vs {arr.shape}")
        params[name].values = arr
    missing = set(params) - {n for n in named if not n.startswith("opt.")}
    if missing:
        raise CheckpointError(f"{path}: checkpoint missing tensors {sorted(missing)[:4]}...")
    return step, opt
