"""Multi-patch inference, FITB / compatibility-AUC protocols and embedding export."""
from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from ._rng import lane_rng
from .netcore import ModelState, embed_patches, forward_generator
from .patching import R_RANGE, item_patch_tensor

DEFAULT_N_PATCHES = 20
EXACT_AUC_LIMIT = 10_000


@dataclass(frozen=True)
class Outfit:
    items: tuple
    label: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        if len(self.items) < 2:
            raise ValueError(f"an outfit needs at least 2 items, got {len(self.items)}")


@dataclass(frozen=True)
class FITBQuestion:
    query_items: tuple
    candidates: tuple
    answer_index: int

    def __post_init__(self):
        object.__setattr__(self, "query_items", tuple(self.query_items))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.query_items:
            raise ValueError("FITB query needs at least one item")
        if len(self.candidates) != 4:
            raise ValueError(f"FITB needs exactly 4 candidates, got {len(self.candidates)}")
        if not 0 <= self.answer_index < 4:
            raise ValueError(f"answer_index {self.answer_index} outside [0, 4)")


@dataclass(frozen=True, eq=False)
class ItemEmbedding:
    item_ref: str
    per_patch: np.ndarray  # (n_patches, embed_dim)

    @property
    def mean(self) -> np.ndarray:
        return self.per_patch.mean(axis=0)


# ----------------------------------------------------------------------------
# evaluation files

def load_outfits(path) -> list:
    doc = json.loads(Path(path).read_text())
    out = []
    for i, o in enumerate(doc["outfits"]):
        label = o.get("label")
        if label is not None and not isinstance(label, bool):
            raise ValueError(f"outfit {i}: label must be a boolean")
        out.append(Outfit(tuple(o["items"]), label))
    return out


def save_outfits(outfits: Sequence[Outfit], path) -> None:
    doc = {"outfits": [{"items": list(o.items), "label": o.label} for o in outfits]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_fitb(path) -> list:
    doc = json.loads(Path(path).read_text())
    return [FITBQuestion(tuple(q["query_items"]), tuple(q["candidates"]), int(q["answer_index"]))
            for q in doc["questions"]]


def save_fitb(questions: Sequence[FITBQuestion], path) -> None:
    doc = {"questions": [{"query_items": list(q.query_items), "candidates": list(q.candidates),
                          "answer_index": q.answer_index} for q in questions]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


# ----------------------------------------------------------------------------
# inference

@torch.no_grad()
def _run(state: ModelState, x: torch.Tensor, fn, chunk: int = 1024) -> np.ndarray:
    state.eval()
    parts = [fn(state, x[i:i + chunk]) for i in range(0, x.shape[0], chunk)]
    return torch.cat(parts).double().numpy()


def embed_item(state: ModelState, image, region, n_patches: int, rng: np.random.Generator,
               item_ref: Optional[str] = None, r_range=R_RANGE) -> ItemEmbedding:
    x = item_patch_tensor(image, region, n_patches, rng, state.config.input_resolution, r_range)
    return ItemEmbedding(item_ref or image.image_id, _run(state, x, embed_patches))


def embed_refs(state: ModelState, items: Mapping[str, tuple], refs: Sequence[str],
               n_patches: int, seed: int, r_range=R_RANGE) -> Dict[str, ItemEmbedding]:
    """Embed each distinct ref once; the patch stream for a ref depends only on (seed, ref)."""
    unique = list(dict.fromkeys(refs))
    if not unique:
        return {}
    tensors = []
    for ref in unique:
        if ref not in items:
            raise KeyError(f"unknown item reference {ref!r}")
        image, region = items[ref]
        tensors.append(item_patch_tensor(image, region, n_patches, lane_rng(seed, ref),
                                         state.config.input_resolution, r_range))
    emb = _run(state, torch.cat(tensors), embed_patches)
    return {ref: ItemEmbedding(ref, emb[k * n_patches:(k + 1) * n_patches])
            for k, ref in enumerate(unique)}


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def fitb_scores(query: Sequence[ItemEmbedding], candidates: Sequence[ItemEmbedding]):
    """Pick the candidate whose patches are, on average, most cosine-similar to the outfit mean.

    The outfit mean is the mean of the query items' mean-patch embeddings.
    Ties go to the lowest index.
    """
    outfit = _unit(np.mean([q.mean for q in query], axis=0))
    scores = np.array([float((_unit(c.per_patch) @ outfit).mean()) for c in candidates])
    return int(np.argmax(scores)), scores


def pair_distance(a: ItemEmbedding, b: ItemEmbedding) -> float:
    """1 - mean cosine similarity over all patch pairs."""
    return 1.0 - float((_unit(a.per_patch) @ _unit(b.per_patch).T).mean())


def compatibility_from_embeddings(items: Sequence[ItemEmbedding]) -> float:
    """Negated mean pairwise distance; higher means more compatible."""
    if len(items) < 2:
        raise ValueError("an outfit needs at least 2 items")
    return -float(np.mean([pair_distance(a, b) for a, b in combinations(items, 2)]))


def fitb_answer(state: ModelState, question: FITBQuestion, n_patches: int,
                rng: np.random.Generator, items: Mapping[str, tuple]):
    def emb(ref):
        image, region = items[ref]
        return embed_item(state, image, region, n_patches, rng, item_ref=ref)

    query = [emb(r) for r in question.query_items]
    return fitb_scores(query, [emb(r) for r in question.candidates])


def outfit_compatibility_score(state: ModelState, outfit: Outfit, n_patches: int,
                               rng: np.random.Generator, items: Mapping[str, tuple]) -> float:
    embs = []
    for ref in outfit.items:
        image, region = items[ref]
        embs.append(embed_item(state, image, region, n_patches, rng, item_ref=ref))
    return compatibility_from_embeddings(embs)


def _check_labels(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        raise ValueError("AUC needs at least one positive and one negative label")
    return y


def auc_pair_count(scores, labels) -> float:
    """Mann-Whitney statistic by explicit comparison of every positive/negative pair."""
    s = np.asarray(scores, dtype=np.float64)
    y = _check_labels(labels)
    pos, neg = s[y], s[~y]
    wins = 0.0
    for p in pos:
        wins += float(np.count_nonzero(p > neg)) + 0.5 * float(np.count_nonzero(p == neg))
    return wins / (len(pos) * len(neg))


def auc_rank(scores, labels) -> float:
    """Mann-Whitney statistic from average ranks."""
    s = np.asarray(scores, dtype=np.float64)
    y = _check_labels(labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores, labels) -> float:
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    if len(scores) <= EXACT_AUC_LIMIT:
        return auc_pair_count(scores, labels)
    return auc_rank(scores, labels)


def evaluate(state: ModelState, comp_outfits: Sequence[Outfit], fitb_questions: Sequence[FITBQuestion],
             n_patches: int, seed: int, items: Mapping[str, tuple]) -> dict:
    refs = [r for o in comp_outfits for r in o.items]
    refs += [r for q in fitb_questions for r in q.query_items + q.candidates]
    emb = embed_refs(state, items, refs, n_patches, seed)

    result = {"comp_auc": float("nan"), "fitb_acc": float("nan")}
    if comp_outfits:
        scores = [compatibility_from_embeddings([emb[r] for r in o.items]) for o in comp_outfits]
        result["comp_auc"] = auc(scores, [bool(o.label) for o in comp_outfits])
    if fitb_questions:
        hits = 0
        for q in fitb_questions:
            chosen, _ = fitb_scores([emb[r] for r in q.query_items], [emb[r] for r in q.candidates])
            hits += chosen == q.answer_index
        result["fitb_acc"] = hits / len(fitb_questions)
    return result


# ----------------------------------------------------------------------------
# export and domain probing

def pca_2d(x: np.ndarray) -> np.ndarray:
    """Top-2 principal component coordinates, signs fixed so the largest loading is positive."""
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    flip = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * flip[:, None]
    proj = xc @ comps.T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def export_embeddings(state: ModelState, items: Mapping[str, tuple], refs: Sequence[str],
                      n_patches: int, out_path, seed: int = 0,
                      labels: Optional[Mapping[str, object]] = None,
                      metadata: Optional[Mapping[str, dict]] = None,
                      plot_path=None) -> Path:
    """Write one JSON line per item and a PCA scatter plot next to it.

    The plot's PNG text header records the projection method.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    emb = embed_refs(state, items, refs, n_patches, seed)
    refs = list(dict.fromkeys(refs))
    means = np.stack([emb[r].mean for r in refs])
    proj = pca_2d(means)
    with out_path.open("w") as fh:
        for k, ref in enumerate(refs):
            meta = dict((metadata or {}).get(ref, {}))
            if labels is not None and ref in labels:
                meta.setdefault("label", labels[ref])
            rec = {"item_ref": ref, "mean_embedding": [round(float(v), 8) for v in means[k]],
                   "projection": {"method": "pca", "xy": [round(float(v), 8) for v in proj[k]]},
                   "n_patches": n_patches, "metadata": meta}
            fh.write(json.dumps(rec) + "\n")

    plot_path = Path(plot_path) if plot_path else out_path.with_suffix(".png")
    fig, ax = plt.subplots(figsize=(5, 5))
    groups = [str(labels.get(r, "?")) if labels else "items" for r in refs]
    for g in sorted(set(groups)):
        sel = [k for k, name in enumerate(groups) if name == g]
        ax.scatter(proj[sel, 0], proj[sel, 1], s=8, label=g)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    if labels:
        ax.legend(fontsize=7, markerscale=2)
    fig.tight_layout()
    fig.savefig(plot_path, format="png", dpi=100,
                metadata={"Description": "projection=pca; components=2", "Software": None})
    plt.close(fig)
    return out_path


def domain_probe_accuracy(state: ModelState, source_items: Mapping[str, tuple],
                          target_items: Mapping[str, tuple], n_patches: int = 4,
                          seed: int = 0, max_items: int = 400, standardize: bool = True) -> float:
    """Held-out accuracy of a fresh logistic-regression probe separating source from
    target generator features. 0.5 means the features carry no domain signal.

    Both domains contribute the same number of items; the split is by item, so no
    item has patches on both sides of it.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    rng = lane_rng(seed, "probe")
    n_items = min(max_items, len(source_items), len(target_items))
    if n_items < 2:
        raise ValueError("domain probe needs at least 2 items per domain")
    train_x, train_y, test_x, test_y = [], [], [], []
    for y, pool in ((0, source_items), (1, target_items)):
        refs = sorted(pool)
        refs = [refs[i] for i in rng.choice(len(refs), n_items, replace=False)]
        x = torch.cat([item_patch_tensor(*pool[r], n_patches, lane_rng(seed, "probe", r),
                                         state.config.input_resolution) for r in refs])
        f = _run(state, x, forward_generator)
        cut = (n_items // 2) * n_patches
        train_x.append(f[:cut])
        test_x.append(f[cut:])
        train_y.append(np.full(cut, y))
        test_y.append(np.full(len(f) - cut, y))
    clf = LogisticRegression(max_iter=3000)
    probe = make_pipeline(StandardScaler(), clf) if standardize else clf
    probe.fit(np.concatenate(train_x), np.concatenate(train_y))
    return float(probe.score(np.concatenate(test_x), np.concatenate(test_y)))
