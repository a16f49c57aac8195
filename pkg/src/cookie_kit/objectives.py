"""Contrastive and triplet objectives.

All similarities are cosine: embeddings are L2-normalized before dot
products, so the temperature-scaled logits of the InfoNCE terms and the
margins of the triplet loss live on the same [-1, 1] scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import augment as A
from . import encoders as E
from . import tensor as T
from .errors import ContractError

DEFAULT_TAU = 0.07

# instrumentation: how many augmentation passes the losses have triggered
aug_counts = {"visual": 0, "textual": 0}


def reset_aug_counts():
    aug_counts["visual"] = 0
    aug_counts["textual"] = 0


@dataclass
class ContrastiveBatch:
    """Aligned query/key embeddings: row i of queries matches row i of keys."""

    queries: T.Tensor
    keys: T.Tensor
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        n, nk = self.queries.shape[0], self.keys.shape[0]
        if n != nk:
            raise ContractError(f"query/key row counts differ: {n} vs {nk}")
        if n < 2:
            raise ContractError(f"contrastive batch needs N >= 2, got {n}")
        if self.tau <= 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")


@dataclass
class TripletConfig:
    alpha: float = 0.2

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError(f"margin must be >= 0, got {self.alpha}")


def info_nce(batch: ContrastiveBatch) -> T.Tensor:
    """-1/N sum_i log( exp(q_i.k_i / tau) / sum_j exp(q_i.k_j / tau) ),
    the positive plus the N-1 in-batch negatives in the denominator."""
    q = T.l2_normalize(batch.queries)
    k = T.l2_normalize(batch.keys)
    logits = T.matmul(q, T.transpose(k, (1, 0))) * (1.0 / batch.tau)
    n = logits.shape[0]
    eye = np.eye(n, dtype=logits.dtype)
    positive = T.tsum(logits * T.Tensor(eye), axis=1)
    return T.mean(T.logsumexp(logits, axis=1) - positive)


def cross_modal_loss(image_emb, text_emb, tau=DEFAULT_TAU):
    """Both InfoNCE directions over one aligned batch; returns
    (image-to-text, text-to-image, sum)."""
    l_i2t = info_nce(ContrastiveBatch(image_emb, text_emb, tau))
    l_t2i = info_nce(ContrastiveBatch(text_emb, image_emb, tau))
    return l_i2t, l_t2i, l_i2t + l_t2i


def _pad_token_views(views, max_words, pad_id=0):
    ids = np.full((len(views), max_words), pad_id, dtype=np.int64)
    mask = np.zeros((len(views), max_words), dtype=np.float64)
    for i, toks in enumerate(views):
        toks = toks[:max_words]
        ids[i, :len(toks)] = toks
        mask[i, :len(toks)] = 1.0
    return ids, mask


def visual_contrastive_loss(images, params: E.EncoderParams, aug_config, seed,
                            tau=DEFAULT_TAU, strategy="max"):
    """InfoNCE between two independently augmented views of each image."""
    images = np.asarray(images)
    if images.shape[0] < 2:
        raise ContractError("visual contrastive loss needs a batch of >= 2 images")
    aug_counts["visual"] += 1
    v1, v2 = A.augment_batch_views(images, aug_config, seed)
    e1 = E.encode_images(v1, params, strategy)
    e2 = E.encode_images(v2, params, strategy)
    return info_nce(ContrastiveBatch(e1, e2, tau))


def textual_contrastive_loss(token_lists, params: E.EncoderParams, aug_config, seed,
                             tau=DEFAULT_TAU, strategy="max"):
    """InfoNCE between two independently augmented views of each caption."""
    if len(token_lists) < 2:
        raise ContractError("textual contrastive loss needs a batch of >= 2 captions")
    aug_counts["textual"] += 1
    v1, v2 = A.augment_text_batch_views(token_lists, aug_config, seed)
    m = params.config.max_words
    ids1, mask1 = _pad_token_views(v1, m)
    ids2, mask2 = _pad_token_views(v2, m)
    e1 = E.encode_texts(ids1, mask1, params, strategy)
    e2 = E.encode_texts(ids2, mask2, params, strategy)
    return info_nce(ContrastiveBatch(e1, e2, tau))


def pretrain_loss(images, token_ids, pad_mask, token_lists, params, stage,
                  tau=DEFAULT_TAU, visual_aug=None, text_aug=None, seed=0,
                  strategy="max"):
    """Stage 1: both cross-modal terms. Stage 2: adds the two single-modal
    terms with unit weights. Returns (total, components dict)."""
    if stage not in (1, 2):
        raise ContractError(f"stage must be 1 or 2, got {stage}")
    image_emb = E.encode_images(images, params, strategy)
    text_emb = E.encode_texts(token_ids, pad_mask, params, strategy)
    l_i2t, l_t2i, total = cross_modal_loss(image_emb, text_emb, tau)
    components = {"i2t": float(l_i2t.data), "t2i": float(l_t2i.data)}
    if stage == 2:
        l_i = visual_contrastive_loss(images, params, visual_aug or A.VisualAugConfig(),
                                      seed, tau, strategy)
        l_t = textual_contrastive_loss(token_lists, params, text_aug or A.TextAugConfig(),
                                       seed, tau, strategy)
        total = total + l_i + l_t
        components["visual"] = float(l_i.data)
        components["textual"] = float(l_t.data)
    return total, components


def hard_triplet_loss(image_emb, text_emb, alpha=0.2):
    """Hinged loss against the hardest in-batch negatives, mean over pairs.

    For each aligned pair, the hardest negative text for the image and the
    hardest negative image for the text both compete against the positive
    cosine similarity with margin ``alpha``."""
    n = image_emb.shape[0]
    if n < 2:
        raise ContractError(f"triplet loss needs N >= 2, got {n}")
    if text_emb.shape[0] != n:
        raise ContractError(f"row counts differ: {n} vs {text_emb.shape[0]}")
    i_n = T.l2_normalize(image_emb)
    t_n = T.l2_normalize(text_emb)
    sims = T.matmul(i_n, T.transpose(t_n, (1, 0)))
    return hard_triplet_from_similarities(sims, alpha)


def hard_triplet_from_similarities(sims, alpha=0.2):
    """Triplet loss on a precomputed [N, N] similarity matrix whose
    diagonal holds the positives. Hardest-negative ties resolve to the
    lowest index (argmax first occurrence)."""
    n = sims.shape[0]
    if n < 2 or sims.shape[1] != n:
        raise ContractError(f"similarity matrix must be square with N >= 2, got {sims.shape}")
    eye = np.eye(n, dtype=sims.dtype)
    positive = T.tsum(sims * T.Tensor(eye), axis=1)
    # push the diagonal below every off-diagonal entry before taking the max
    penalty = float(sims.data.max() - sims.data.min()) + 1.0
    off = sims + T.Tensor(-penalty * eye)
    hardest_text = T.amax(off, axis=1)   # for image anchor i: worst other text
    hardest_image = T.amax(off, axis=0)  # for text anchor i: worst other image
    hinge_t = T.relu(hardest_text + (alpha - positive))
    hinge_i = T.relu(hardest_image + (alpha - positive))
    return T.mean(hinge_i + hinge_t)
