"""Zero-shot evaluation over a frozen checkpoint.

Retrieval ranks by cosine similarity with deterministic lowest-index tie
breaking; classification averages four prompt templates per class and takes
the argmax; attention export writes the thresholded grouping weights as
JSON-Lines grids for external plotting.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .captions import load_dataset
from .encoders import DualEncoder, Tokenizer, load_image_tensor
from .errors import DataError, EmptyGallery, NoClasses
from .losses import attention_grouping
from .trainer import load_split

RECALL_KS = (1, 5, 10)

PROMPT_TEMPLATES = (
    "a photo of a {}",
    "an image of a {}",
    "a picture of a {}",
    "{}",
)


@dataclass
class RetrievalResult:
    """R@K per direction; keys of each map are 1, 5, 10."""

    text_to_image: Dict[int, float]
    image_to_text: Dict[int, float]


def _best_rank(sim: np.ndarray, gt_cols: Dict[int, List[int]]) -> np.ndarray:
    """For each query row, the rank (0-based) of its best ground-truth item
    when columns are sorted by similarity descending, ties by lower index."""
    # stable argsort on -sim keeps the lower original index first among ties
    order = np.argsort(-sim, axis=1, kind="stable")
    ranks = np.empty_like(order)
    cols = np.arange(sim.shape[1])
    for q in range(sim.shape[0]):
        ranks[q, order[q]] = cols
    best = np.empty(sim.shape[0], dtype=np.int64)
    for q in range(sim.shape[0]):
        matches = gt_cols.get(q)
        if not matches:
            raise ValueError(f"query {q} has no ground-truth match")
        best[q] = min(ranks[q, c] for c in matches)
    return best


def retrieval(
    image_globals: np.ndarray,
    text_vectors: np.ndarray,
    pairs: Sequence[Tuple[int, int]],
) -> RetrievalResult:
    """R@{1,5,10} both ways. pairs lists (image_index, text_index) matches;
    every image and every text must appear in at least one pair."""
    if image_globals.ndim != 2 or text_vectors.ndim != 2:
        raise ValueError("embeddings must be 2-D")
    if image_globals.shape[0] == 0 or text_vectors.shape[0] == 0:
        raise EmptyGallery("both galleries need at least one item")

    img_matches: Dict[int, List[int]] = {}
    txt_matches: Dict[int, List[int]] = {}
    for img, txt in pairs:
        img_matches.setdefault(int(img), []).append(int(txt))
        txt_matches.setdefault(int(txt), []).append(int(img))

    sim = text_vectors @ image_globals.T  # (Nt, Ni)
    t2i_best = _best_rank(sim, txt_matches)
    i2t_best = _best_rank(sim.T, img_matches)
    return RetrievalResult(
        text_to_image={k: float(np.mean(t2i_best < k)) for k in RECALL_KS},
        image_to_text={k: float(np.mean(i2t_best < k)) for k in RECALL_KS},
    )


def retrieval_oracle(
    image_globals: np.ndarray,
    text_vectors: np.ndarray,
    pairs: Sequence[Tuple[int, int]],
) -> RetrievalResult:
    """Naive full-sort reference: Python sort per query with (-sim, index)."""
    txt_matches: Dict[int, List[int]] = {}
    img_matches: Dict[int, List[int]] = {}
    for img, txt in pairs:
        img_matches.setdefault(int(img), []).append(int(txt))
        txt_matches.setdefault(int(txt), []).append(int(img))

    def recalls(queries, gallery, matches):
        out = {k: 0 for k in RECALL_KS}
        nq = len(queries)
        for q in range(nq):
            sims = [
                (-float(np.dot(queries[q], gallery[g])), g) for g in range(len(gallery))
            ]
            sims.sort()
            order = [g for _, g in sims]
            best = min(order.index(m) for m in matches[q])
            for k in RECALL_KS:
                if best < k:
                    out[k] += 1
        return {k: out[k] / nq for k in RECALL_KS}

    return RetrievalResult(
        text_to_image=recalls(text_vectors, image_globals, txt_matches),
        image_to_text=recalls(image_globals, text_vectors, img_matches),
    )


def zeroshot_classify(
    image_globals: np.ndarray, class_embeddings: np.ndarray, labels: Sequence[int]
) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if class_embeddings.ndim != 2 or class_embeddings.shape[0] == 0:
        raise NoClasses("need at least one class embedding")
    sims = image_globals @ class_embeddings.T  # (N, C)
    pred = np.argmax(sims, axis=1)  # first occurrence wins ties
    labels = np.asarray(labels)
    return float(np.mean(pred == labels))


def build_class_embeddings(
    model: DualEncoder,
    tokenizer: Tokenizer,
    class_names: Sequence[str],
    templates: Sequence[str] = PROMPT_TEMPLATES,
) -> np.ndarray:
    """Mean of the prompt-template embeddings per class, renormalized."""
    if not class_names:
        raise NoClasses("need at least one class name")
    prompts = [tpl.format(name) for name in class_names for tpl in templates]
    tokens = tokenizer.encode_batch(prompts)
    vecs, _ = model.encode_text(tokens)
    per_class = vecs.reshape(len(class_names), len(templates), -1).mean(axis=1)
    norms = np.sqrt(np.sum(per_class * per_class, axis=1, keepdims=True))
    return per_class / norms


# ---- attention export ----

def export_attention(
    model: DualEncoder,
    tokenizer: Tokenizer,
    image: np.ndarray,
    subcaptions: Sequence[str],
    sigma: float,
    path,
    image_id: str = "",
) -> List[dict]:
    """Write one JSONL record per sub-caption with its normalized sparse
    grid over patches. The grid sums to 1 whenever any weight survives the
    threshold; an all-zero row exports the one-hot fallback grid."""
    tokens = tokenizer.encode_batch(list(subcaptions))
    text_vectors, _ = model.encode_text(tokens)
    _, patches, _ = model.encode_image(image[None])
    grouping = attention_grouping(text_vectors, patches[0], sigma)
    gh, gw = model.config.patch_grid
    records = []
    for j, text in enumerate(subcaptions):
        records.append(
            {
                "image_id": image_id,
                "subcaption": text,
                "sigma": float(sigma),
                "grid": [float(x) for x in grouping.coefficients[j]],
                "grid_h": gh,
                "grid_w": gw,
            }
        )
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for rec in records:
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return records


# ---- report file ----

def write_eval_report(path, metrics: Dict[str, float]) -> None:
    """CSV with one `metric,value` row per entry, insertion-ordered."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("metric,value\n")
        for name, value in metrics.items():
            f.write(f"{name},{repr(float(value))}\n")


# ---- corpus evaluation protocol ----

def encode_texts(model: DualEncoder, tokenizer: Tokenizer, texts: Sequence[str],
                 batch: int = 256) -> np.ndarray:
    outs = []
    for start in range(0, len(texts), batch):
        tokens = tokenizer.encode_batch(list(texts[start : start + batch]))
        longest = int(np.max(np.sum(tokens != Tokenizer.PAD_ID, axis=1)))
        vecs, _ = model.encode_text(tokens[:, : max(1, longest)])
        outs.append(vecs)
    return np.concatenate(outs) if outs else np.zeros((0, model.config.embed_dim))


def encode_images(model: DualEncoder, images: Sequence[np.ndarray], batch: int = 256):
    globals_out, patches_out = [], []
    for start in range(0, len(images), batch):
        chunk = np.stack(images[start : start + batch])
        g, p, _ = model.encode_image(chunk)
        globals_out.append(g)
        patches_out.append(p)
    return np.concatenate(globals_out), np.concatenate(patches_out)


def load_groundtruth(data_dir) -> Dict[str, dict]:
    path = Path(data_dir) / "groundtruth.jsonl"
    if not path.exists():
        return {}
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["image_id"]] = rec
    return out


def evaluate_corpus(
    model: DualEncoder,
    tokenizer: Tokenizer,
    data_dir,
    split: str = "test",
    queries: str = "short",
) -> Dict[str, float]:
    """Retrieval (queries against the split's images) plus, when the corpus
    carries class ground truth, zero-shot accuracy on single-object images.

    queries: 'short' uses the first short caption, 'raw' the raw caption,
    'long' the long caption sentences (several queries may map to one image).
    """
    data_dir = Path(data_dir)
    records = load_dataset(data_dir / "captions.jsonl")
    split_map = load_split(data_dir)
    if split_map is not None and split in split_map:
        wanted = set(split_map[split])
        records = [r for r in records if r.image_id in wanted]
    if not records:
        raise DataError(f"no records in split {split!r}")

    texts: List[str] = []
    pairs: List[Tuple[int, int]] = []
    for i, rec in enumerate(records):
        if queries == "short":
            if not rec.short_captions:
                raise DataError(f"record {rec.image_id} has no short caption")
            candidates = [rec.short_captions[0]]
        elif queries == "raw":
            candidates = [rec.raw_caption]
        elif queries == "long":
            candidates = [s for sentences in rec.long_captions for s in sentences]
            if not candidates:
                candidates = [rec.raw_caption]
        else:
            raise ValueError(f"unknown queries mode {queries!r}")
        for text in candidates:
            pairs.append((i, len(texts)))
            texts.append(text)

    images = [
        load_image_tensor(data_dir / "images" / f"{rec.image_id}.dlt") for rec in records
    ]
    image_globals, _ = encode_images(model, images)
    text_vectors = encode_texts(model, tokenizer, texts)
    res = retrieval(image_globals, text_vectors, pairs)

    metrics: Dict[str, float] = {}
    for k in RECALL_KS:
        metrics[f"t2i_r{k}"] = res.text_to_image[k]
    for k in RECALL_KS:
        metrics[f"i2t_r{k}"] = res.image_to_text[k]

    gt = load_groundtruth(data_dir)
    meta_path = data_dir / "meta.json"
    if gt and meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        class_names = meta.get("class_names", [])
        singles = [
            (i, gt[rec.image_id]["class_label"])
            for i, rec in enumerate(records)
            if rec.image_id in gt and gt[rec.image_id]["n_blobs"] == 1
        ]
        if class_names and singles:
            idx = [i for i, _ in singles]
            labels = [c for _, c in singles]
            class_emb = build_class_embeddings(model, tokenizer, class_names)
            metrics["zeroshot_acc"] = zeroshot_classify(
                image_globals[idx], class_emb, labels
            )
            metrics["zeroshot_chance"] = 1.0 / len(class_names)
    return metrics
