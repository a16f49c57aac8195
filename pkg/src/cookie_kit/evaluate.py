"""Retrieval and matching evaluation.

All metrics operate on a plain [Q, G] cosine similarity matrix plus a
per-query set of relevant gallery indices. Ranking ties are broken by the
lower gallery index everywhere (stable descending sort) so results are
deterministic across platforms.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import data as D
from . import encoders as E
from .errors import ContractError

REPORT_FIELDS = ("r1_i2t", "r5_i2t", "r10_i2t", "r1_t2i", "r5_t2i", "r10_t2i",
                 "rsum", "map_at_k", "sts_pearson", "sts_spearman", "sts_mean")


def similarity_matrix(queries, gallery):
    """Cosine similarities, scores[i][j] = cos(q_i, g_j)."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ContractError(f"incompatible embedding shapes {q.shape} and {g.shape}")
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if np.any(qn == 0) or np.any(gn == 0):
        raise ContractError("zero-norm embedding in similarity_matrix")
    return (q / qn[:, None]) @ (g / gn[:, None]).T


def ranking(scores):
    """Gallery indices per query, best first; ties go to the lower index."""
    return np.argsort(-np.asarray(scores), axis=1, kind="stable")


def _check_topk(scores, relevant, k):
    scores = np.asarray(scores)
    q, g = scores.shape
    if len(relevant) != q:
        raise ContractError(f"{q} queries but {len(relevant)} relevance sets")
    if not all(relevant):
        raise ContractError("every query needs at least one relevant item")
    if k < 1 or k > g:
        raise ContractError(f"K={k} outside [1, {g}]")
    return scores


def recall_at_k(scores, relevant, k):
    """Percentage of queries with a relevant item in the top K."""
    scores = _check_topk(scores, relevant, k)
    order = ranking(scores)
    hits = sum(1 for i, rel in enumerate(relevant)
               if set(order[i, :k]) & set(rel))
    return 100.0 * hits / len(relevant)


def rsum(recalls):
    """Sum of the six retrieval recalls (R@1/5/10 in both directions)."""
    recalls = list(recalls)
    if len(recalls) != 6:
        raise ContractError(f"rsum expects 6 recalls, got {len(recalls)}")
    for r in recalls:
        if not 0.0 <= r <= 100.0:
            raise ContractError(f"recall {r} outside [0, 100]")
    return float(sum(recalls))


def map_at_k(scores, relevant, k):
    """Mean truncated average precision, normalized by min(R, K)."""
    scores = _check_topk(scores, relevant, k)
    order = ranking(scores)
    aps = []
    for i, rel in enumerate(relevant):
        rel = set(rel)
        hits, precisions = 0, 0.0
        for rank, j in enumerate(order[i, :k], start=1):
            if j in rel:
                hits += 1
                precisions += hits / rank
        aps.append(precisions / min(len(rel), k))
    return float(np.mean(aps))


def _average_ranks(values):
    """1-based ranks with ties assigned the average of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        raise ContractError("correlation undefined for constant input")
    return float((xc * yc).sum() / denom)


def sts_scores(pred, labels):
    """(Pearson, Spearman, mean). Spearman is Pearson on average ranks."""
    pred, labels = list(pred), list(labels)
    if len(pred) != len(labels):
        raise ContractError(f"length mismatch: {len(pred)} vs {len(labels)}")
    if len(pred) < 3:
        raise ContractError(f"need >= 3 pairs, got {len(pred)}")
    p = pearson(pred, labels)
    s = pearson(_average_ranks(pred), _average_ranks(labels))
    return p, s, (p + s) / 2


def attention_rank(token_out, pooled, labels, top_k=5):
    """Rank tokens by cosine similarity to the pooled representation.

    Returns (token_index, label, score, rank, is_top_k) tuples, best first.
    Zero-norm tokens are excluded with a warning.
    """
    token_out = np.asarray(token_out, dtype=np.float64)
    pooled = np.asarray(pooled, dtype=np.float64).reshape(-1)
    if token_out.ndim != 2 or token_out.shape[1] != pooled.shape[0]:
        raise ContractError(f"token/pooled shape mismatch: {token_out.shape} vs {pooled.shape}")
    pn = np.linalg.norm(pooled)
    if pn == 0:
        raise ContractError("pooled representation has zero norm")
    if len(labels) != token_out.shape[0]:
        raise ContractError(f"{token_out.shape[0]} tokens but {len(labels)} labels")
    entries = []
    for i, row in enumerate(token_out):
        norm = np.linalg.norm(row)
        if norm == 0:
            warnings.warn(f"token {i} ({labels[i]}) has zero norm; excluded from ranking")
            continue
        entries.append((i, labels[i], float(row @ pooled / (norm * pn))))
    if not entries:
        raise ContractError("no nonzero tokens to rank")
    entries.sort(key=lambda e: (-e[2], e[0]))
    return [(idx, label, score, rank, rank <= top_k)
            for rank, (idx, label, score) in enumerate(entries, start=1)]


def encode_corpus(params, manifest, split, strategy="max", chunk=64):
    """Embed every image and every caption of a split exactly once.

    Returns (image_emb [n, D], caption_emb [5n, D], ids); caption row
    5*i + c holds caption c of image i.
    """
    ids = D.split_ids(manifest, split)
    if not ids:
        raise ContractError(f"split {split!r} is empty")
    m = params.config.max_words
    image_rows, caption_rows = [], []
    for start in range(0, len(ids), chunk):
        part = ids[start:start + chunk]
        images = np.stack([manifest.load_image(i) for i in part])
        image_rows.append(E.encode_images(images, params, strategy).data)
        caps = [c for i in part for c in manifest.records[i]["captions"]]
        tok_ids, mask = D.pad_tokens(caps, m)
        caption_rows.append(E.encode_texts(tok_ids, mask, params, strategy).data)
    return np.concatenate(image_rows), np.concatenate(caption_rows), ids


def retrieval_report(image_emb, caption_emb, captions_per_image=5, map_k=10):
    """Six recalls, Rsum and image-to-text MAP from embedding matrices."""
    n = len(image_emb)
    if len(caption_emb) != n * captions_per_image:
        raise ContractError(
            f"{len(caption_emb)} captions do not match {n} images x {captions_per_image}")
    sims = similarity_matrix(image_emb, caption_emb)
    rel_i2t = [set(range(i * captions_per_image, (i + 1) * captions_per_image))
               for i in range(n)]
    rel_t2i = [{q // captions_per_image} for q in range(n * captions_per_image)]
    g_t, g_i = sims.shape[1], n
    report = {
        "r1_i2t": recall_at_k(sims, rel_i2t, min(1, g_t)),
        "r5_i2t": recall_at_k(sims, rel_i2t, min(5, g_t)),
        "r10_i2t": recall_at_k(sims, rel_i2t, min(10, g_t)),
        "r1_t2i": recall_at_k(sims.T, rel_t2i, min(1, g_i)),
        "r5_t2i": recall_at_k(sims.T, rel_t2i, min(5, g_i)),
        "r10_t2i": recall_at_k(sims.T, rel_t2i, min(10, g_i)),
        "map_at_k": map_at_k(sims, rel_i2t, min(map_k, g_t)),
    }
    report["rsum"] = rsum([report[f] for f in
                           ("r1_i2t", "r5_i2t", "r10_i2t", "r1_t2i", "r5_t2i", "r10_t2i")])
    return report, sims


def caption_matching_scores(params, manifest, n_pairs, seed, strategy="max"):
    """Cosine predictions vs graded labels on paraphrase caption pairs."""
    pairs = D.paraphrase_pairs(manifest, n_pairs, seed)
    m = params.config.max_words
    ids_a, mask_a = D.pad_tokens([a for a, _, _ in pairs], m)
    ids_b, mask_b = D.pad_tokens([b for _, b, _ in pairs], m)
    ea = E.encode_texts(ids_a, mask_a, params, strategy).data
    eb = E.encode_texts(ids_b, mask_b, params, strategy).data
    ea = ea / np.linalg.norm(ea, axis=1, keepdims=True)
    eb = eb / np.linalg.norm(eb, axis=1, keepdims=True)
    preds = np.sum(ea * eb, axis=1)
    labels = [s for _, _, s in pairs]
    return list(preds), labels


def eval_retrieval(params, manifest, split="test", strategy="max",
                   sts_pairs=200, sts_seed=0):
    """Full double-stream evaluation of one split.

    Returns (report, extras): the report carries exactly the documented
    metric fields; extras holds embeddings and per-query ranks so the
    report can be recomputed without re-encoding.
    """
    image_emb, caption_emb, ids = encode_corpus(params, manifest, split, strategy)
    report, sims = retrieval_report(image_emb, caption_emb)
    preds, labels = caption_matching_scores(params, manifest, sts_pairs, sts_seed, strategy)
    p, s, mean = sts_scores(preds, labels)
    report.update({"sts_pearson": p, "sts_spearman": s, "sts_mean": mean})
    order_i2t = ranking(sims)
    order_t2i = ranking(sims.T)
    ranks_i2t = [int(np.min(np.where(np.isin(order_i2t[i], range(i * 5, i * 5 + 5)))[0])) + 1
                 for i in range(len(ids))]
    ranks_t2i = [int(np.where(order_t2i[q] == q // 5)[0][0]) + 1
                 for q in range(5 * len(ids))]
    extras = {"ids": ids, "image_emb": image_emb, "caption_emb": caption_emb,
              "ranks_i2t": ranks_i2t, "ranks_t2i": ranks_t2i, "sims": sims}
    return report, extras


def random_baseline_r1(gallery_size):
    """Expected R@1 (percent) of uniformly random ranking with one relevant
    item."""
    return 100.0 / gallery_size
