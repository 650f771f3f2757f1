"""Trained similarity backends: a dual image/text encoder, an
augmentation-contrastive image encoder, and a multi-label attribute
classifier whose pooled features feed the Frechet distance.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..rngs import torch_stream
from ..shapeworld.grammar import extract_tuples
from ..shapeworld.scenes import COLORS, SHAPES, SIZES
from ..tokenizers import PAD, WordTokenizer
from ..models.layers import EncoderBlock
from ..models.naming import GroupedModel

EMBED_DIM = 64
N_ATTRIBUTES = len(SHAPES) + len(COLORS) + len(SIZES)


class EncoderTrainingError(Exception):
    pass


class ConvTrunk(nn.Module):
    """32px image -> flat feature vector.

    The first convolution keeps full resolution so that shape boundaries
    survive into the strided stages.
    """

    def __init__(self, out_dim=EMBED_DIM):
        super().__init__()
        self.conv0 = nn.Conv2d(3, 32, 3, stride=1, padding=1)
        self.norm0 = nn.GroupNorm(8, 32)
        self.conv1 = nn.Conv2d(32, 32, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(8, 32)
        self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.norm2 = nn.GroupNorm(8, 64)
        self.conv3 = nn.Conv2d(64, 64, 3, stride=1, padding=1)
        self.norm3 = nn.GroupNorm(8, 64)
        # flatten at 8x8 so object positions stay separable in the head
        self.fc = nn.Linear(64 * 8 * 8, out_dim)

    def forward(self, images):
        x = images.permute(0, 3, 1, 2)
        x = F.gelu(self.norm0(self.conv0(x)))
        x = F.gelu(self.norm1(self.conv1(x)))
        x = F.gelu(self.norm2(self.conv2(x)))
        x = F.gelu(self.norm3(self.conv3(x)))
        return self.fc(x.flatten(1))


class DualEncoder(GroupedModel):
    """Contrastive image/text dual encoder with unit-norm embeddings."""

    group_prefix = "clip"

    def __init__(self, vocab_size: int, max_len: int = 16):
        super().__init__()
        self.image_tower = ConvTrunk()
        self.txt_emb = nn.Embedding(vocab_size, EMBED_DIM)
        self.txt_pos = nn.Parameter(torch.zeros(max_len, EMBED_DIM))
        self.txt_block = EncoderBlock(EMBED_DIM, 4, 2 * EMBED_DIM)
        self.txt_norm = nn.LayerNorm(EMBED_DIM)
        self.txt_proj = nn.Linear(EMBED_DIM, EMBED_DIM)
        self.log_temperature = nn.Parameter(torch.tensor(np.log(1 / 0.07), dtype=torch.float32))

    def embed_images(self, images):
        return F.normalize(self.image_tower(images), dim=-1)

    def embed_texts(self, ids):
        mask = ids != PAD
        x = self.txt_emb(ids) + self.txt_pos[: ids.shape[1]]
        x = self.txt_block(x, pad_mask=mask)
        m = mask.float().unsqueeze(-1)
        pooled = (self.txt_norm(x) * m).sum(1) / m.sum(1).clamp_min(1.0)
        return F.normalize(self.txt_proj(pooled), dim=-1)

    def contrastive_loss(self, images, ids, content=None):
        """Symmetric InfoNCE. In-batch captions describing the same scene
        content are excluded as negatives of each other (they would be false
        negatives); ``content`` optionally carries per-sample content-group
        labels, otherwise identical token sequences are treated as equal."""
        zi = self.embed_images(images)
        zt = self.embed_texts(ids)
        logits = zi @ zt.T * self.log_temperature.exp()
        if content is not None:
            dup = content.unsqueeze(0) == content.unsqueeze(1)
        else:
            dup = (ids.unsqueeze(0) == ids.unsqueeze(1)).all(-1)
        dup = dup & ~torch.eye(len(ids), dtype=torch.bool)
        logits = logits.masked_fill(dup, float("-inf"))
        labels = torch.arange(len(zi))
        return (
            F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels)
        ) / 2.0


class AugContrastiveEncoder(GroupedModel):
    """Image encoder trained only on augmentation pairs (no text signal)."""

    group_prefix = "aug"

    def __init__(self):
        super().__init__()
        self.trunk = ConvTrunk()

    def embed_images(self, images):
        return F.normalize(self.trunk(images), dim=-1)

    def contrastive_loss(self, view_a, view_b, temperature=0.1):
        za = self.embed_images(view_a)
        zb = self.embed_images(view_b)
        logits = za @ zb.T / temperature
        labels = torch.arange(len(za))
        return (
            F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels)
        ) / 2.0


class AttrClassifier(GroupedModel):
    """Multi-label presence heads over (shape, color, size).

    Fully convolutional: per-location attribute logits are max-pooled over
    space, which matches "attribute present anywhere in the scene".
    """

    group_prefix = "clf"

    def __init__(self):
        super().__init__()
        self.conv0 = nn.Conv2d(3, 32, 3, stride=1, padding=1)
        self.norm0 = nn.GroupNorm(8, 32)
        self.conv1 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(8, 64)
        self.conv2 = nn.Conv2d(64, 64, 3, stride=1, padding=1)
        self.norm2 = nn.GroupNorm(8, 64)
        self.conv3 = nn.Conv2d(64, 64, 3, stride=1, padding=1)
        self.norm3 = nn.GroupNorm(8, 64)
        self.conv4 = nn.Conv2d(64, EMBED_DIM, 3, stride=1, padding=1)
        self.norm4 = nn.GroupNorm(8, EMBED_DIM)
        self.head = nn.Conv2d(EMBED_DIM, N_ATTRIBUTES, 1)

    def _feature_map(self, images):
        x = images.permute(0, 3, 1, 2)
        x = F.gelu(self.norm0(self.conv0(x)))
        x = F.gelu(self.norm1(self.conv1(x)))
        x = F.gelu(self.norm2(self.conv2(x)))
        x = F.gelu(self.norm3(self.conv3(x)))
        return F.gelu(self.norm4(self.conv4(x)))

    def features(self, images):
        """Spatially pooled penultimate features, (B, EMBED_DIM)."""
        return self._feature_map(images).mean(dim=(2, 3))

    def embed_images(self, images):
        return F.normalize(self.features(images), dim=-1)

    def presence_logits(self, images):
        return self.head(self._feature_map(images)).amax(dim=(2, 3))

    def presence_probs(self, images):
        logits = torch.sigmoid(self.presence_logits(images))
        n_s, n_c = len(SHAPES), len(COLORS)
        return logits[:, :n_s], logits[:, n_s : n_s + n_c], logits[:, n_s + n_c :]

    def shape_class_probs(self, images):
        """Softmax over the shape slice, used by the inception-style score."""
        return F.softmax(self.presence_logits(images)[:, : len(SHAPES)], dim=-1)

    def bce_loss(self, images, labels):
        return F.binary_cross_entropy_with_logits(self.presence_logits(images), labels)


def attribute_labels(scene) -> np.ndarray:
    lab = np.zeros(N_ATTRIBUTES, dtype=np.float32)
    colors = list(COLORS)
    sizes = sorted(SIZES)
    for o in scene.objects:
        lab[SHAPES.index(o.shape)] = 1.0
        lab[len(SHAPES) + colors.index(o.color)] = 1.0
        lab[len(SHAPES) + len(COLORS) + sizes.index(o.size)] = 1.0
    return lab


def augment(images: torch.Tensor, rng: torch.Generator) -> torch.Tensor:
    """Random shift, flips, and mild channel jitter."""
    b, h, w, _ = images.shape
    out = images.clone()
    shifts = torch.randint(-3, 4, (b, 2), generator=rng)
    flips = torch.randint(0, 2, (b, 2), generator=rng)
    gains = 1.0 + 0.1 * (torch.rand(b, 1, 1, 3, generator=rng) - 0.5)
    for i in range(b):
        img = out[i]
        img = torch.roll(img, shifts=(int(shifts[i, 0]), int(shifts[i, 1])), dims=(0, 1))
        if flips[i, 0]:
            img = img.flip(0)
        if flips[i, 1]:
            img = img.flip(1)
        out[i] = img
    return (out * gains).clamp(0.0, 1.0)


@dataclass
class SimilarityBackends:
    dual: DualEncoder
    aug: AugContrastiveEncoder
    clf: AttrClassifier
    tokenizer: WordTokenizer

    def image_encoder(self, name: str):
        encoders = {"clip": self.dual, "aug": self.aug, "clf": self.clf}
        if name not in encoders:
            raise KeyError(f"unknown similarity backend {name!r}; use {list(encoders)}")
        return encoders[name]


def image_similarity(encoder, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of image embeddings; inputs (B, H, W, 3)."""
    with torch.no_grad():
        za = encoder.embed_images(x)
        zb = encoder.embed_images(x_hat)
    return (za * zb).sum(-1)


def text_similarity(dual: DualEncoder, tokenizer: WordTokenizer, a, b) -> torch.Tensor:
    """Cosine similarity of text-tower embeddings of two caption batches."""
    if isinstance(a, str):
        a, b = [a], [b]
    ids_a = torch.tensor([tokenizer.encode(t) for t in a], dtype=torch.long)
    ids_b = torch.tensor([tokenizer.encode(t) for t in b], dtype=torch.long)
    with torch.no_grad():
        za = dual.embed_texts(ids_a)
        zb = dual.embed_texts(ids_b)
    return (za * zb).sum(-1)


def _as_image_batch(dataset, records) -> torch.Tensor:
    return torch.from_numpy(np.stack([dataset.image(r.id) for r in records]))


def _retrieval_top1(dual, tokenizer, dataset, records, rng, group=64) -> float:
    """Image-to-caption retrieval accuracy in pools of ``group``.

    A retrieval counts as correct when the retrieved caption describes the
    same scene content as the gold caption (identical extracted tuple sets);
    distinct scenes can share content, so index equality would be too strict.
    """
    caps = [r.captions[0] for r in records]
    ids = torch.tensor([tokenizer.encode(c) for c in caps], dtype=torch.long)
    tuples = [frozenset(extract_tuples(c)) for c in caps]
    hits = total = 0
    idx = torch.randperm(len(records), generator=rng).tolist()
    for start in range(0, len(idx) - group + 1, group):
        chunk = idx[start : start + group]
        images = _as_image_batch(dataset, [records[i] for i in chunk])
        with torch.no_grad():
            zi = dual.embed_images(images)
            zt = dual.embed_texts(ids[chunk])
        picked = torch.argmax(zi @ zt.T, dim=1).tolist()
        hits += sum(tuples[chunk[k]] == tuples[chunk[a]] for k, a in enumerate(picked))
        total += len(chunk)
    return hits / max(total, 1)


def _classifier_f1(clf, dataset, records) -> float:
    images = _as_image_batch(dataset, records)
    labels = np.stack([attribute_labels(r.scene) for r in records])
    with torch.no_grad():
        probs = torch.cat(clf.presence_probs(images), dim=1).numpy()
    pred = probs > 0.5
    gold = labels > 0.5
    f1s = []
    for j in range(gold.shape[1]):
        tp = (pred[:, j] & gold[:, j]).sum()
        if gold[:, j].sum() == 0 and pred[:, j].sum() == 0:
            continue
        denom = pred[:, j].sum() + gold[:, j].sum()
        f1s.append(2.0 * tp / denom if denom else 1.0)
    return float(min(f1s)) if f1s else 1.0


def train_similarity_encoders(
    dataset,
    tokenizer: WordTokenizer,
    seed: int = 0,
    epochs: int = 30,
    batch_size: int = 64,
    lr: float = 1e-3,
    retrieval_target: float = 0.95,
    f1_target: float = 0.98,
) -> SimilarityBackends:
    """Train all three encoders on the in-domain train split.

    The dual encoder and the classifier are validated after every epoch and
    the best-scoring states are kept (plain model selection on the val
    split). Raises EncoderTrainingError with the best metrics if the
    convergence targets are missed.
    """
    torch.manual_seed(seed)
    dual = DualEncoder(len(tokenizer.vocab))
    aug_enc = AugContrastiveEncoder()
    clf = AttrClassifier()

    train = dataset.split("train")
    val = dataset.split("val")
    rng = torch_stream(seed, "encoders")

    images_all = _as_image_batch(dataset, train)
    labels_all = torch.from_numpy(np.stack([attribute_labels(r.scene) for r in train]))
    # content-group labels: all references of a record share one tuple set,
    # and distinct records can share content too
    content_key = {}
    content_all = torch.tensor([
        content_key.setdefault(frozenset(extract_tuples(r.captions[0])),
                               len(content_key))
        for r in train
    ], dtype=torch.long)

    opt_dual = torch.optim.Adam(dual.parameters(), lr=lr)
    opt_aug = torch.optim.Adam(aug_enc.parameters(), lr=lr)
    opt_clf = torch.optim.Adam(clf.parameters(), lr=lr)
    schedules = [
        torch.optim.lr_scheduler.StepLR(opt, step_size=12, gamma=0.3)
        for opt in (opt_dual, opt_aug, opt_clf)
    ]
    n_refs = len(train[0].captions) if train else 1
    best_top1, best_f1 = -1.0, -1.0
    best_dual, best_clf = None, None
    for _ in range(epochs):
        order = torch.randperm(len(train), generator=rng)
        for start in range(0, len(train) - batch_size + 1, batch_size):
            sel = order[start : start + batch_size]
            images = images_all[sel]
            cap_pick = torch.randint(0, n_refs, (len(sel),), generator=rng)
            caps = [train[i].captions[j] for i, j in zip(sel.tolist(), cap_pick.tolist())]
            ids = torch.tensor([tokenizer.encode(c) for c in caps], dtype=torch.long)

            opt_dual.zero_grad()
            dual.contrastive_loss(images, ids, content=content_all[sel]).backward()
            opt_dual.step()

            opt_aug.zero_grad()
            aug_enc.contrastive_loss(augment(images, rng), augment(images, rng)).backward()
            opt_aug.step()

            opt_clf.zero_grad()
            clf.bce_loss(images, labels_all[sel]).backward()
            opt_clf.step()
        for sched in schedules:
            sched.step()
        top1 = _retrieval_top1(dual, tokenizer, dataset, val, torch_stream(seed, "retrieval"))
        f1 = _classifier_f1(clf, dataset, val)
        if top1 > best_top1:
            best_top1 = top1
            best_dual = {k: v.detach().clone() for k, v in dual.state_dict().items()}
        if f1 > best_f1:
            best_f1 = f1
            best_clf = {k: v.detach().clone() for k, v in clf.state_dict().items()}

    if best_dual is not None:
        dual.load_state_dict(best_dual)
    if best_clf is not None:
        clf.load_state_dict(best_clf)
    if best_top1 < retrieval_target or best_f1 < f1_target:
        raise EncoderTrainingError(
            f"encoder training missed targets: retrieval top-1 {best_top1:.3f} "
            f"(target {retrieval_target}), classifier min F1 {best_f1:.3f} "
            f"(target {f1_target})"
        )
    dual.eval(), aug_enc.eval(), clf.eval()
    return SimilarityBackends(dual, aug_enc, clf, tokenizer)
