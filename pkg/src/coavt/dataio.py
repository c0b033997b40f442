"""Synthetic correlated triplets, patchification, masking, and corpus files.

Each corpus item couples a spectrogram, a short stack of frames, and a
token caption through a shared latent vector, so cross-modal alignment is
learnable by construction and retrieval ground truth is exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CLS, BOS, PAD, EOS = 0, 1, 2, 3
N_SPECIALS = 4

CORPUS_MAGIC = b"COAVT-CORPUS v1\n"


class CorpusFormatError(ValueError):
    """Corpus file is missing the v1 header or is structurally invalid."""


@dataclass
class Spectrogram:
    values: np.ndarray  # (frames, bins), log-mel magnitudes

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def bins(self):
        return self.values.shape[1]


@dataclass
class Frame:
    values: np.ndarray  # (height, width, channels)


@dataclass
class PatchSequence:
    patches: np.ndarray    # (n, edge*edge*channels) row-major flattened blocks
    positions: np.ndarray  # (n,) original patch index, strictly increasing
    modality: str          # "audio" | "visual"
    patch_edge: int


@dataclass
class TripletExample:
    item_id: int
    class_id: int
    audio: Spectrogram
    video_frames: list
    caption: np.ndarray  # int64 token ids, [CLS] ... [EOS]


@dataclass
class CorpusConfig:
    n_train: int = 512
    n_test: int = 128
    n_classes: int = 16
    latent_dim: int = 12
    noise_sigma_audio: float = 0.5
    noise_sigma_visual: float = 0.5
    offset_scale: float = 1.0
    attribute_tokens_per_item: int = 3
    attribute_bins: int = 8
    seed: int = 0
    audio_frames: int = 64
    audio_bins: int = 16
    frame_height: int = 32
    frame_width: int = 32
    frame_channels: int = 1
    n_video_frames: int = 10
    vocab_size: int = 64
    max_text_len: int = 16

    def validate(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("corpus: split sizes must be positive")
        if self.n_test < 2 * self.n_classes:
            raise ValueError(
                f"corpus: n_test={self.n_test} < 2*n_classes={2 * self.n_classes}; "
                "chance-level retrieval would not be measurable")
        if self.noise_sigma_audio < 0 or self.noise_sigma_visual < 0:
            raise ValueError("corpus: noise sigma must be >= 0")
        if self.n_video_frames < 1:
            raise ValueError("corpus: need at least one video frame per item")
        needed = N_SPECIALS + self.n_classes + self.attribute_tokens_per_item * self.attribute_bins
        if needed > self.vocab_size:
            raise ValueError(
                f"corpus: vocab_size={self.vocab_size} too small for "
                f"{self.n_classes} classes and "
                f"{self.attribute_tokens_per_item}x{self.attribute_bins} attribute tokens "
                f"(needs {needed})")
        if self.attribute_tokens_per_item + 3 > self.max_text_len:
            raise ValueError("corpus: caption would exceed max_text_len")

    @property
    def caption_len(self):
        # [CLS] class attr... [EOS]
        return self.attribute_tokens_per_item + 3

    def class_token(self, class_id):
        return N_SPECIALS + class_id

    def attribute_token(self, position, bin_index):
        return N_SPECIALS + self.n_classes + position * self.attribute_bins + bin_index


# ---------------------------------------------------------------------------
# patchify / mask
# ---------------------------------------------------------------------------

def patchify(source, patch_edge):
    """Split a Spectrogram or Frame into row-major square patches.

    Patch p covers block (p // cols_p, p % cols_p); each patch vector is the
    edge x edge (x channels) block flattened row-major.
    """
    if isinstance(source, Spectrogram):
        arr = source.values[:, :, None]
        modality = "audio"
    elif isinstance(source, Frame):
        arr = source.values
        modality = "visual"
    else:
        raise TypeError(f"patchify: expected Spectrogram or Frame, got {type(source).__name__}")
    rows, cols, ch = arr.shape
    if rows % patch_edge or cols % patch_edge:
        raise ValueError(
            f"patchify: extents {rows}x{cols} not divisible by patch edge {patch_edge}")
    rp, cp = rows // patch_edge, cols // patch_edge
    blocks = arr.reshape(rp, patch_edge, cp, patch_edge, ch)
    patches = blocks.transpose(0, 2, 1, 3, 4).reshape(rp * cp, patch_edge * patch_edge * ch)
    return PatchSequence(
        patches=np.ascontiguousarray(patches, dtype=np.float64),
        positions=np.arange(rp * cp, dtype=np.int64),
        modality=modality,
        patch_edge=patch_edge,
    )


def unpatchify(seq, rows, cols, channels=1):
    """Inverse of patchify for a full (unmasked) sequence."""
    e = seq.patch_edge
    rp, cp = rows // e, cols // e
    if len(seq.positions) != rp * cp or not np.array_equal(seq.positions, np.arange(rp * cp)):
        raise ValueError("unpatchify: sequence is not a full patch grid")
    blocks = seq.patches.reshape(rp, cp, e, e, channels)
    out = blocks.transpose(0, 2, 1, 3, 4).reshape(rows, cols, channels)
    return out[:, :, 0] if channels == 1 and seq.modality == "audio" else out


def round_half_up(x):
    return int(np.floor(x + 0.5))


def mask_patches(seq, ratio, rng):
    """Keep round((1-ratio)*N) patches, uniformly without replacement.

    Positions come from the source sequence and original order is kept, so
    positional lookups downstream stay aligned with the unmasked grid.
    """
    if not (0.0 <= ratio < 1.0):
        raise ValueError(f"mask_patches: ratio must be in [0, 1), got {ratio}")
    n = len(seq.positions)
    keep = round_half_up((1.0 - ratio) * n)
    if keep == n:
        return PatchSequence(seq.patches.copy(), seq.positions.copy(),
                             seq.modality, seq.patch_edge)
    chosen = np.sort(rng.choice(n, size=keep, replace=False))
    return PatchSequence(
        patches=seq.patches[chosen].copy(),
        positions=seq.positions[chosen].copy(),
        modality=seq.modality,
        patch_edge=seq.patch_edge,
    )


def caption_from_labels(labels):
    """[CLS] + labels in order + [EOS]; plain concatenation, no separators."""
    labels = list(labels)
    if not labels:
        raise ValueError("caption_from_labels: empty label list")
    return np.asarray([CLS] + labels + [EOS], dtype=np.int64)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def _quantize_offsets(offsets, scale, bins):
    # spread +-2 scale units across the bin range; clip the tails
    ratio = offsets / scale if scale > 0 else offsets
    raw = np.floor((ratio + 2.0) / 4.0 * bins)
    return np.clip(raw, 0, bins - 1).astype(np.int64)


def generate_corpus(cfg):
    """Build (train, test) triplet lists, fully determined by cfg.seed.

    Every item renders one latent vector (class centroid + per-item offset)
    through fixed random linear maps into a spectrogram and frames; the
    caption concatenates the class token with attribute tokens quantized
    from the offset. Captions are unique across both splits by rejection.
    """
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xC0A)))

    centroids = rng.normal(0.0, 1.0, size=(cfg.n_classes, cfg.latent_dim))
    d = cfg.latent_dim
    w_audio = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, cfg.audio_frames * cfg.audio_bins))
    w_visual = rng.normal(
        0.0, 1.0 / np.sqrt(d),
        size=(d, cfg.frame_height * cfg.frame_width * cfg.frame_channels))

    used_captions = set()

    def make_item(item_id, class_id):
        for _ in range(1000):
            offset = rng.normal(0.0, cfg.offset_scale, size=d)
            attr_bins = _quantize_offsets(
                offset[:cfg.attribute_tokens_per_item], cfg.offset_scale, cfg.attribute_bins)
            key = (class_id, tuple(attr_bins.tolist()))
            if key not in used_captions:
                used_captions.add(key)
                break
        else:
            raise RuntimeError(
                "generate_corpus: could not draw a unique caption; "
                "increase attribute_bins or attribute_tokens_per_item")
        latent = centroids[class_id] + offset
        spec = (latent @ w_audio).reshape(cfg.audio_frames, cfg.audio_bins)
        if cfg.noise_sigma_audio > 0:
            spec = spec + rng.normal(0.0, cfg.noise_sigma_audio, size=spec.shape)
        frames = []
        for _ in range(cfg.n_video_frames):
            img = (latent @ w_visual).reshape(
                cfg.frame_height, cfg.frame_width, cfg.frame_channels)
            if cfg.noise_sigma_visual > 0:
                img = img + rng.normal(0.0, cfg.noise_sigma_visual, size=img.shape)
            frames.append(Frame(values=img))
        labels = [cfg.class_token(class_id)] + [
            cfg.attribute_token(i, b) for i, b in enumerate(attr_bins)]
        return TripletExample(
            item_id=item_id,
            class_id=class_id,
            audio=Spectrogram(values=spec),
            video_frames=frames,
            caption=caption_from_labels(labels),
        )

    train = [make_item(i, i % cfg.n_classes) for i in range(cfg.n_train)]
    test = [make_item(cfg.n_train + i, i % cfg.n_classes) for i in range(cfg.n_test)]
    return train, test


def nearest_centroid_accuracy(train, test):
    """Sanity oracle: classify test items by nearest class-mean raw spectrogram."""
    classes = sorted({it.class_id for it in train})
    means = {}
    for c in classes:
        stack = np.stack([it.audio.values for it in train if it.class_id == c])
        means[c] = stack.mean(axis=0)
    hits = 0
    for it in test:
        dists = {c: float(((it.audio.values - m) ** 2).sum()) for c, m in means.items()}
        if min(dists, key=dists.get) == it.class_id:
            hits += 1
    return hits / len(test)


# ---------------------------------------------------------------------------
# corpus file format (COAVT-CORPUS v1)
# ---------------------------------------------------------------------------

def _pack_item(it):
    buf = bytearray()
    buf += struct.pack("<IH", it.item_id, it.class_id)
    spec = it.audio.values
    buf += struct.pack("<II", spec.shape[0], spec.shape[1])
    buf += np.ascontiguousarray(spec, dtype="<f8").tobytes()
    buf += struct.pack("<H", len(it.video_frames))
    for fr in it.video_frames:
        h, w, ch = fr.values.shape
        buf += struct.pack("<III", h, w, ch)
        buf += np.ascontiguousarray(fr.values, dtype="<f8").tobytes()
    buf += struct.pack("<H", len(it.caption))
    buf += np.ascontiguousarray(it.caption, dtype="<u2").tobytes()
    return bytes(buf)


def save_corpus(items, path):
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        for it in items:
            payload = _pack_item(it)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)


def load_corpus(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CORPUS_MAGIC))
        if magic != CORPUS_MAGIC:
            raise CorpusFormatError(f"{path}: bad or missing corpus header {magic!r}")
        items = []
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) < 4:
                raise CorpusFormatError(f"{path}: truncated record length")
            (rec_len,) = struct.unpack("<I", head)
            payload = fh.read(rec_len)
            if len(payload) < rec_len:
                raise CorpusFormatError(f"{path}: truncated record body")
            items.append(_unpack_item(payload, path))
    return items


def _unpack_item(payload, path):
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, payload, off)
        off += size
        return vals

    def take_floats(count):
        nonlocal off
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).copy()
        off += count * 8
        return arr

    try:
        item_id, class_id = take("<IH")
        fr_n, bins = take("<II")
        spec = take_floats(fr_n * bins).reshape(fr_n, bins)
        (n_frames,) = take("<H")
        frames = []
        for _ in range(n_frames):
            h, w, ch = take("<III")
            frames.append(Frame(values=take_floats(h * w * ch).reshape(h, w, ch)))
        (n_tok,) = take("<H")
        caption = np.frombuffer(payload, dtype="<u2", count=n_tok, offset=off)
        off += n_tok * 2
    except (struct.error, ValueError) as e:
        raise CorpusFormatError(f"{path}: malformed record ({e})") from e
    if off != len(payload):
        raise CorpusFormatError(f"{path}: record has {len(payload) - off} trailing bytes")
    return TripletExample(
        item_id=item_id,
        class_id=class_id,
        audio=Spectrogram(values=spec),
        video_frames=frames,
        caption=caption.astype(np.int64),
    )
