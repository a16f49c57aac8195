"""Procedural paired image-caption corpus.

Scenes place 1-3 colored shapes on a 4x4 grid over a colored background
and render to a 32x32 float image. Each scene carries 5 distinct templated
captions mentioning only attributes actually present, mirroring the 1:5
image-caption ratio of the usual retrieval benchmarks. The same scene
rendered with a different render seed differs in pixels (jittered offsets,
background shade) but keeps its captions.

On disk: a JSON-lines manifest (header line with version + vocabulary,
then one record per sample) next to an ``images/`` directory of raw
little-endian float32 files with a 3-u32 (H, W, C) shape header.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

MANIFEST_VERSION = "1"
MANIFEST_NAME = "manifest.jsonl"

PAD_ID, MASK_ID = 0, 1

SHAPES = ("circle", "square", "triangle", "bar")
SIZES = ("small", "large")
PALETTE = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "yellow": (0.92, 0.88, 0.15),
    "purple": (0.60, 0.20, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.50, 0.50, 0.50),
}
COLORS = tuple(PALETTE)
ROW_WORDS = ("top", "top", "bottom", "bottom")
COL_WORDS = ("left", "left", "right", "right")
COUNT_WORDS = {1: "one", 2: "two", 3: "three"}

_WORDS = (
    ["[pad]", "[mask]"]
    + "a the is there are picture shows image contains scene with and in on at of".split()
    + list(SIZES) + list(COLORS) + list(SHAPES)
    + "circles squares triangles bars".split()
    + "top bottom left right corner background object objects".split()
    + "one two three beside".split()
)
VOCAB = {w: i for i, w in enumerate(_WORDS)}
VOCAB_WORDS = list(_WORDS)
assert len(VOCAB) <= 128

_PLURAL = {"circle": "circles", "square": "squares", "triangle": "triangles", "bar": "bars"}


def tokenize(words):
    try:
        return [VOCAB[w] for w in words]
    except KeyError as exc:
        raise DataError(f"word not in vocabulary: {exc}") from exc


def detokenize(ids):
    return [VOCAB_WORDS[i] for i in ids]


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: int       # 0..15 on the 4x4 grid
    size: str

    def quadrant_words(self):
        row, col = divmod(self.cell, 4)
        return ROW_WORDS[row], COL_WORDS[col]


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    background: str

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise ContractError(f"scene needs 1-3 objects, got {len(self.objects)}")
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ContractError("two objects share a grid cell")

    def signature(self):
        return (self.background,) + tuple(
            (o.shape, o.color, o.cell, o.size) for o in self.objects)

    def attribute_set(self):
        attrs = {f"bg:{self.background}"}
        for o in self.objects:
            r, c = o.quadrant_words()
            attrs |= {f"shape:{o.shape}", f"color:{o.color}", f"size:{o.size}",
                      f"pos:{r}-{c}"}
        return attrs

    def to_json(self):
        return {"background": self.background,
                "objects": [[o.shape, o.color, o.cell, o.size] for o in self.objects]}

    @classmethod
    def from_json(cls, d):
        return cls(tuple(SceneObject(*o) for o in d["objects"]), d["background"])


@dataclass
class GeneratorConfig:
    image_size: int = 32
    max_objects: int = 3


def sample_spec(rng, config: GeneratorConfig) -> SceneSpec:
    n = int(rng.integers(1, config.max_objects + 1))
    cells = rng.choice(16, size=n, replace=False)
    background = COLORS[rng.integers(0, len(COLORS))]
    objects = []
    for cell in cells:
        color = background
        while color == background:
            color = COLORS[rng.integers(0, len(COLORS))]
        objects.append(SceneObject(
            shape=SHAPES[rng.integers(0, len(SHAPES))],
            color=color,
            cell=int(cell),
            size=SIZES[rng.integers(0, len(SIZES))]))
    return SceneSpec(tuple(objects), background)


def render_scene(spec: SceneSpec, render_seed, config=None) -> np.ndarray:
    """Deterministic 32x32x3 rendering with seeded nuisance variation."""
    config = config or GeneratorConfig()
    rng = np.random.default_rng(render_seed)
    size = config.image_size
    cell = size // 4
    shade = rng.uniform(0.85, 1.0)
    img = np.ones((size, size, 3)) * np.array(PALETTE[spec.background]) * shade
    yy, xx = np.mgrid[0:size, 0:size]
    for obj in spec.objects:
        row, col = divmod(obj.cell, 4)
        jitter = rng.integers(-1, 2, size=2)
        cy = row * cell + cell // 2 + int(jitter[0])
        cx = col * cell + cell // 2 + int(jitter[1])
        r = 2 if obj.size == "small" else 3
        if obj.shape == "circle":
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
        elif obj.shape == "square":
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        elif obj.shape == "triangle":
            mask = (yy >= cy - r) & (yy <= cy + r) & \
                (np.abs(xx - cx) <= (yy - (cy - r)) / 2)
        else:  # bar
            mask = (np.abs(yy - cy) <= 1) & (np.abs(xx - cx) <= r + 1)
        img[mask] = PALETTE[obj.color]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_captions(spec: SceneSpec):
    """Five distinct token sequences, each restricted to attributes of the
    scene."""
    o = spec.objects[0]
    vr, vc = o.quadrant_words()
    caps = [
        f"a {o.size} {o.color} {o.shape} in the {vr} {vc}",
        f"there is a {o.color} {o.shape} on a {spec.background} background",
        f"the scene contains {COUNT_WORDS[len(spec.objects)]} "
        + ("object" if len(spec.objects) == 1 else "objects"),
    ]
    if len(spec.objects) >= 2:
        p = spec.objects[1]
        caps.append(f"the picture shows a {o.color} {o.shape} and a {p.color} {p.shape}")
        caps.append(f"the {o.shape} is beside the {p.shape}")
    else:
        caps.append(f"the picture shows a {o.color} {o.shape}")
        caps.append(f"the image is of a {o.size} {o.shape} at the {vr} {vc}")
    return [tokenize(c.split()) for c in caps]


def generate_scene(seed, config=None):
    """Seeded (spec, image, captions) triple; the render seed is derived
    from the sample seed so pixels vary independently of semantics."""
    config = config or GeneratorConfig()
    rng = np.random.default_rng(seed)
    spec = sample_spec(rng, config)
    render_seed = int(rng.integers(0, 2 ** 31))
    image = render_scene(spec, render_seed, config)
    return spec, image, make_captions(spec), render_seed


@dataclass
class CorpusManifest:
    version: str
    vocab: list
    records: list
    root: Path = None

    def __len__(self):
        return len(self.records)

    def load_image(self, sample_id):
        return read_image_file(Path(self.root) / "images" / f"{sample_id}.bin")


def write_image_file(path, image):
    image = np.asarray(image, dtype="<f4")
    h, w, c = image.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<III", h, w, c))
        f.write(image.tobytes())


def read_image_file(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise DataError(f"image file too short: {path}")
    h, w, c = struct.unpack("<III", raw[:12])
    if (len(raw) - 12) % 4 != 0:
        raise DataError(f"image payload not float32-aligned in {path}")
    data = np.frombuffer(raw[12:], dtype="<f4")
    if data.size != h * w * c:
        raise DataError(f"image payload size mismatch in {path}")
    return data.reshape(h, w, c).copy()


def build_corpus(n_samples, seed, path, config=None) -> CorpusManifest:
    """Generate and persist a corpus; fully determined by (n, seed, config)."""
    if n_samples < 1:
        raise ContractError(f"corpus needs n >= 1, got {n_samples}")
    config = config or GeneratorConfig()
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as f:
        header = {"version": MANIFEST_VERSION, "vocab": VOCAB_WORDS}
        f.write(json.dumps(header) + "\n")
        for i in range(n_samples):
            spec, image, captions, render_seed = generate_scene(
                derive_sample_seed(seed, i), config)
            record = {"version": MANIFEST_VERSION, "id": i, "spec": spec.to_json(),
                      "captions": captions, "render_seed": render_seed}
            f.write(json.dumps(record) + "\n")
            write_image_file(root / "images" / f"{i}.bin", image)
            records.append(record)
    return CorpusManifest(MANIFEST_VERSION, VOCAB_WORDS, records, root)


def derive_sample_seed(corpus_seed, sample_id):
    return int(np.random.SeedSequence([int(corpus_seed), int(sample_id)]).generate_state(1)[0])


def load_corpus(path) -> CorpusManifest:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"no manifest at {manifest_path}")
    with open(manifest_path, encoding="utf-8") as f:
        try:
            header = json.loads(f.readline())
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt manifest header: {exc}") from exc
        if header.get("version") != MANIFEST_VERSION:
            raise DataError(f"manifest version {header.get('version')!r} unsupported")
        records = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"corrupt manifest line {lineno}: {exc}") from exc
            records.append(rec)
    ids = [r["id"] for r in records]
    if ids != list(range(len(records))):
        raise DataError("manifest sample ids not dense from 0")
    return CorpusManifest(header["version"], header["vocab"], records, root)


def split_of(sample_id):
    """80/10/10 split by stable hash of the sample id."""
    digest = hashlib.sha256(str(sample_id).encode()).digest()
    bucket = digest[0] % 10
    if bucket < 8:
        return "train"
    return "val" if bucket == 8 else "test"


def split_ids(manifest, split):
    if split == "all":
        return [r["id"] for r in manifest.records]
    if split not in ("train", "val", "test"):
        raise ContractError(f"unknown split {split!r}")
    return [r["id"] for r in manifest.records if split_of(r["id"]) == split]


def pad_tokens(captions, max_words, pad_id=PAD_ID):
    """Pad/truncate variable-length token lists to [N, m] ids plus a 0/1 mask."""
    ids = np.full((len(captions), max_words), pad_id, dtype=np.int64)
    mask = np.zeros((len(captions), max_words), dtype=np.float64)
    for i, toks in enumerate(captions):
        toks = toks[:max_words]
        ids[i, :len(toks)] = toks
        mask[i, :len(toks)] = 1.0
    return ids, mask


def batch_iter(manifest, batch_size, epoch_seed, split="train", max_words=12):
    """Seeded epoch of aligned (images, token_ids, pad_mask, raw_captions,
    sample_ids) batches.

    Each image is paired with one of its five captions (chosen per epoch),
    and no two samples in a batch share a scene spec, so in-batch negatives
    are true negatives. Caption choice also avoids repeating an identical
    token sequence within a batch when any of a sample's five captions is
    still unused, since duplicate caption strings would be false negatives
    for each other's images. Trailing samples that cannot fill a batch are
    dropped.
    """
    if batch_size < 2:
        raise ContractError(f"batch size must be >= 2, got {batch_size}")
    ids = split_ids(manifest, split)
    if batch_size > len(ids):
        raise DataError(f"batch size {batch_size} exceeds split size {len(ids)}")
    rng = np.random.default_rng(epoch_seed)
    order = list(rng.permutation(ids))
    sig = {r["id"]: tuple(map(tuple, [[r["spec"]["background"]]] + r["spec"]["objects"]))
           for r in manifest.records}

    pending = order
    while len(pending) >= batch_size:
        batch, used_sigs, leftover = [], set(), []
        for sid in pending:
            if len(batch) < batch_size and sig[sid] not in used_sigs:
                batch.append(sid)
                used_sigs.add(sig[sid])
            else:
                leftover.append(sid)
        if len(batch) < batch_size:
            raise DataError("corpus too small to build a batch of distinct scene specs")
        pending = leftover
        images = np.stack([manifest.load_image(sid) for sid in batch])
        caps, used = [], set()
        for sid in batch:
            options = manifest.records[sid]["captions"]
            order = rng.permutation(5)
            chosen = options[int(order[0])]
            for c in order:
                if tuple(options[int(c)]) not in used:
                    chosen = options[int(c)]
                    break
            used.add(tuple(chosen))
            caps.append(chosen)
        tok_ids, mask = pad_tokens(caps, max_words)
        yield images, tok_ids, mask, caps, batch


def caption_attributes(tokens):
    """Attribute words mentioned by a caption, for consistency checking."""
    words = set(detokenize(tokens))
    return {
        "shapes": {s for s in SHAPES if s in words or _PLURAL[s] in words},
        "colors": {c for c in COLORS if c in words},
        "sizes": {s for s in SIZES if s in words},
    }


def paraphrase_pairs(manifest, n_pairs, seed):
    """Graded caption pairs for the text-matching evaluation.

    Two captions of the same scene score 5; otherwise the score is the
    attribute Jaccard similarity of the two scenes scaled to 0-5.
    """
    rng = np.random.default_rng(seed)
    records = manifest.records
    if len(records) < 2:
        raise DataError("need at least 2 samples for paraphrase pairs")
    pairs = []
    for _ in range(n_pairs):
        if rng.uniform() < 0.4:
            rec = records[rng.integers(0, len(records))]
            c1, c2 = rng.choice(5, size=2, replace=False)
            pairs.append((rec["captions"][int(c1)], rec["captions"][int(c2)], 5.0))
        else:
            i, j = rng.choice(len(records), size=2, replace=False)
            a = SceneSpec.from_json(records[int(i)]["spec"]).attribute_set()
            b = SceneSpec.from_json(records[int(j)]["spec"]).attribute_set()
            jac = len(a & b) / len(a | b)
            pairs.append((records[int(i)]["captions"][int(rng.integers(0, 5))],
                          records[int(j)]["captions"][int(rng.integers(0, 5))],
                          5.0 * jac))
    return pairs
