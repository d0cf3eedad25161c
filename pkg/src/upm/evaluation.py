"""Evaluation protocols: viewpoint grounding, scene retrieval, scene
classification (zero-shot and linear probe), and report emission.

All rankings use cosine similarity between unit-normalized embeddings;
ties break toward the lower index.  Embedding extraction runs outside
the autodiff graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import engine as E
from .data import Scene
from .encoder import EncoderConfig, EncoderParams, encode_texts, encode_views
from .errors import ContractError, DegenerateInputError
from .geometry import DEFAULT_MIN_POINTS, max_coverage_sample, visible_area
from .probe import ProbeConfig, ProbeOutcome, linear_probe

logger = logging.getLogger(__name__)

DEFAULT_RECALL_NS = (1, 5, 10)
DEFAULT_PROMPT = "This room is a {}."
EXTRA_PROMPTS = (
    "The room type is {}.",
    "The scene is a {}.",
    "This indoor scene is a {}.",
)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between rows of a and rows of b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = a / np.linalg.norm(a, axis=-1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return an @ bn.T


def rank_descending(scores: np.ndarray) -> list[int]:
    """Indices sorted by descending score, ties toward the lower index."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


# ---------------------------------------------------------------------------
# embedding extraction


def embed_scene_views(
    scene: Scene, params: EncoderParams, config: EncoderConfig, modality: str = "both"
) -> np.ndarray:
    """All view embeddings of a scene as a (V, d) array, without gradients."""
    pairs = [(v.image, v.pointmap()) for v in scene.views]
    with E.no_grad():
        rows = encode_views(pairs, params, config, modality=modality)
    return np.concatenate([r.array for r in rows], axis=0)


def scene_embedding_from_views(view_embeddings: np.ndarray) -> np.ndarray:
    mean = view_embeddings.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-12:
        raise DegenerateInputError("scene embedding degenerates to zero")
    return mean / norm


def embed_texts(texts: Sequence[str], params: EncoderParams, config: EncoderConfig) -> np.ndarray:
    with E.no_grad():
        return encode_texts(texts, params, config).array


# ---------------------------------------------------------------------------
# viewpoint grounding


@dataclass(frozen=True)
class GroundingInstance:
    scene_id: str
    referring_text: str
    target_object_id: int
    gt_view: int
    visible_set: frozenset[int]


@dataclass
class RetrievalResult:
    recall_at: dict[int, float]
    visible_set_accuracy: float | None
    count: int


def build_grounding_instances(
    scenes: Sequence[Scene], min_points: int = DEFAULT_MIN_POINTS
) -> list[GroundingInstance]:
    """One instance per annotated object with a nonempty visible set.

    The ground-truth view maximizes visible area (ties to the lower view
    index); the visible set collects all views at or above min_points.
    """
    instances = []
    for scene in scenes:
        pointmaps = scene.pointmaps()
        for obj in scene.objects:
            areas = np.array([visible_area(pm, obj) for pm in pointmaps])
            visible = frozenset(int(v) for v in np.nonzero(areas >= min_points)[0])
            if not visible:
                logger.warning(
                    "object %d in scene %s observed nowhere, skipping",
                    obj.object_id, scene.scene_id,
                )
                continue
            instances.append(
                GroundingInstance(
                    scene_id=scene.scene_id,
                    referring_text=obj.referring_text,
                    target_object_id=obj.object_id,
                    gt_view=int(np.argmax(areas)),
                    visible_set=visible,
                )
            )
    return instances


def grounding_metrics(
    similarities: Sequence[np.ndarray],
    gt_views: Sequence[int],
    visible_sets: Sequence[frozenset[int]],
    recall_ns: Sequence[int] = DEFAULT_RECALL_NS,
) -> RetrievalResult:
    """Recall@N and visible-set accuracy from per-instance view scores."""
    if len(similarities) == 0:
        return RetrievalResult(recall_at={n: 0.0 for n in recall_ns}, visible_set_accuracy=0.0, count=0)
    hits = {n: 0 for n in recall_ns}
    visible_hits = 0
    for scores, gt, visible in zip(similarities, gt_views, visible_sets):
        order = rank_descending(np.asarray(scores))
        position = order.index(gt)
        for n in recall_ns:
            if position < n:
                hits[n] += 1
        if order[0] in visible:
            visible_hits += 1
    count = len(similarities)
    return RetrievalResult(
        recall_at={n: hits[n] / count for n in recall_ns},
        visible_set_accuracy=visible_hits / count,
        count=count,
    )


def viewpoint_grounding(
    params: EncoderParams,
    config: EncoderConfig,
    scenes: Sequence[Scene],
    instances: Sequence[GroundingInstance],
    recall_ns: Sequence[int] = DEFAULT_RECALL_NS,
    modality: str = "both",
) -> RetrievalResult:
    """Rank each scene's views against the referring text embedding."""
    by_id = {scene.scene_id: scene for scene in scenes}
    view_cache: dict[str, np.ndarray] = {}
    sims, gts, visibles = [], [], []
    for inst in instances:
        scene = by_id.get(inst.scene_id)
        if scene is None:
            raise ContractError(f"instance references unknown scene {inst.scene_id}")
        if inst.scene_id not in view_cache:
            view_cache[inst.scene_id] = embed_scene_views(scene, params, config, modality)
        text = embed_texts([inst.referring_text], params, config)
        sims.append(cosine_similarity(view_cache[inst.scene_id], text)[:, 0])
        gts.append(inst.gt_view)
        visibles.append(inst.visible_set)
    return grounding_metrics(sims, gts, visibles, recall_ns)


def filter_unique(instances: Sequence[GroundingInstance]) -> list[GroundingInstance]:
    """Instances whose target is observed by exactly one view."""
    return [inst for inst in instances if len(inst.visible_set) == 1]


# ---------------------------------------------------------------------------
# scene retrieval


def build_scene_captions(scene: Scene, n_utterances: int) -> list[str]:
    """Join consecutive groups of n referring texts into retrieval captions."""
    if n_utterances < 1:
        raise ContractError("captions need at least one utterance")
    texts = [obj.referring_text for obj in scene.objects]
    if not texts:
        return []
    if len(texts) < n_utterances:
        logger.info(
            "scene %s has %d referring texts, using one shorter caption",
            scene.scene_id, len(texts),
        )
    chunks = [texts[i : i + n_utterances] for i in range(0, len(texts), n_utterances)]
    return [". ".join(chunk) for chunk in chunks]


def scene_retrieval(
    params: EncoderParams,
    config: EncoderConfig,
    scenes: Sequence[Scene],
    n_utterances: int,
    recall_ns: Sequence[int] = (1, 5),
    view_budget: int | None = None,
    voxel_size: float = 0.25,
) -> RetrievalResult:
    """Rank scenes against captions built from their referring texts."""
    scene_rows = []
    for scene in scenes:
        views = embed_scene_views(scene, params, config)
        if view_budget is not None and view_budget < len(scene.views):
            chosen = max_coverage_sample(scene.pointmaps(), view_budget, voxel_size)
            views = views[chosen]
        scene_rows.append(scene_embedding_from_views(views))
    scene_matrix = np.stack(scene_rows)

    captions, gt_scene = [], []
    for i, scene in enumerate(scenes):
        for caption in build_scene_captions(scene, n_utterances):
            captions.append(caption)
            gt_scene.append(i)
    if not captions:
        return RetrievalResult(recall_at={n: 0.0 for n in recall_ns}, visible_set_accuracy=None, count=0)

    caption_matrix = embed_texts(captions, params, config)
    sims = cosine_similarity(caption_matrix, scene_matrix)
    hits = {n: 0 for n in recall_ns}
    for row, gt in zip(sims, gt_scene):
        order = rank_descending(row)
        position = order.index(gt)
        for n in recall_ns:
            if position < n:
                hits[n] += 1
    return RetrievalResult(
        recall_at={n: hits[n] / len(captions) for n in recall_ns},
        visible_set_accuracy=None,
        count=len(captions),
    )


def retrieval_views_curve(
    params: EncoderParams,
    config: EncoderConfig,
    scenes: Sequence[Scene],
    n_utterances: int,
    budgets: Sequence[int],
    voxel_size: float = 0.25,
) -> list[tuple[int, float]]:
    """R@1 of scene retrieval as the per-scene view budget varies."""
    curve = []
    for budget in budgets:
        result = scene_retrieval(
            params, config, scenes, n_utterances,
            recall_ns=(1,), view_budget=budget, voxel_size=voxel_size,
        )
        curve.append((budget, result.recall_at[1]))
    return curve


# ---------------------------------------------------------------------------
# scene type classification


def classify_from_similarities(similarities: np.ndarray, labels: np.ndarray) -> float:
    predictions = similarities.argmax(axis=1)
    return float(np.mean(predictions == np.asarray(labels)))


def zero_shot_classify(
    params: EncoderParams,
    config: EncoderConfig,
    scenes: Sequence[Scene],
    class_names: Sequence[str],
    template: str | Sequence[str] = DEFAULT_PROMPT,
) -> float:
    """Accuracy of matching scene embeddings to prompted class texts.

    With several templates the class text embeddings are averaged and
    re-normalized before matching.
    """
    if len(class_names) < 2:
        raise ContractError("zero-shot classification needs at least two classes")
    templates = [template] if isinstance(template, str) else list(template)
    class_rows = []
    for name in class_names:
        prompts = [t.format(name) for t in templates]
        rows = embed_texts(prompts, params, config)
        mean = rows.mean(axis=0)
        class_rows.append(mean / np.linalg.norm(mean))
    class_matrix = np.stack(class_rows)

    scene_matrix = np.stack(
        [scene_embedding_from_views(embed_scene_views(s, params, config)) for s in scenes]
    )
    labels = np.array([class_names.index(s.scene_type) for s in scenes])
    return classify_from_similarities(cosine_similarity(scene_matrix, class_matrix), labels)


def probe_features(
    params: EncoderParams,
    config: EncoderConfig,
    scenes: Sequence[Scene],
    class_names: Sequence[str],
) -> tuple[np.ndarray, np.ndarray]:
    """Scene embeddings and integer labels for linear probing."""
    features = np.stack(
        [scene_embedding_from_views(embed_scene_views(s, params, config)) for s in scenes]
    )
    labels = np.array([class_names.index(s.scene_type) for s in scenes])
    return features, labels


def few_shot_probe(
    params: EncoderParams,
    config: EncoderConfig,
    train_scenes: Sequence[Scene],
    test_scenes: Sequence[Scene],
    class_names: Sequence[str],
    cfg: ProbeConfig,
) -> ProbeOutcome:
    """Sample `shots` scenes per class, probe, and score the test scenes."""
    features, labels = probe_features(params, config, train_scenes, class_names)
    rng = np.random.default_rng(cfg.seed)
    chosen: list[int] = []
    for cls in range(len(class_names)):
        members = np.nonzero(labels == cls)[0]
        if len(members) < cfg.shots:
            raise ContractError(
                f"class {class_names[cls]!r} has {len(members)} scenes, need {cfg.shots}"
            )
        chosen.extend(rng.choice(members, size=cfg.shots, replace=False).tolist())
    chosen = sorted(chosen)
    test_features, test_labels = probe_features(params, config, test_scenes, class_names)
    return linear_probe(features[chosen], labels[chosen], test_features, test_labels, cfg)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    grounding: RetrievalResult | None = None
    grounding_unique: RetrievalResult | None = None
    retrieval: dict[int, RetrievalResult] = field(default_factory=dict)
    zero_shot_accuracy: float | None = None
    probe_outcomes: dict[int, ProbeOutcome] = field(default_factory=dict)
    views_curve: list[tuple[int, float]] = field(default_factory=list)
    data_scale_curve: list[tuple[int, float]] = field(default_factory=list)


def _fmt(value) -> str:
    """Numbers via repr of the builtin type, so parsing is bit-exact."""
    if value is None:
        return "None"
    if isinstance(value, (int, np.integer)):
        return repr(int(value))
    return repr(float(value))


def emit_report(report: EvalReport, out_dir) -> dict[str, Path]:
    """Write the per-task TSV tables, plot series, and key=value summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    summary: list[tuple[str, object]] = []

    grounding_path = out_dir / "grounding.tsv"
    lines = ["protocol\tcount\tr_at_1\tr_at_5\tr_at_10\tvisible_set_accuracy"]
    for name, result in (("standard", report.grounding), ("unique", report.grounding_unique)):
        if result is None:
            continue
        lines.append(
            f"{name}\t{result.count}"
            f"\t{_fmt(result.recall_at.get(1, 0.0))}\t{_fmt(result.recall_at.get(5, 0.0))}"
            f"\t{_fmt(result.recall_at.get(10, 0.0))}\t{_fmt(result.visible_set_accuracy)}"
        )
        summary.append((f"grounding.{name}.count", result.count))
        for n, value in sorted(result.recall_at.items()):
            summary.append((f"grounding.{name}.r_at_{n}", value))
        summary.append((f"grounding.{name}.visible_set_accuracy", result.visible_set_accuracy))
    grounding_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written["grounding"] = grounding_path

    retrieval_path = out_dir / "retrieval.tsv"
    lines = ["n_utterances\tcount\tr_at_1\tr_at_5"]
    for n, result in sorted(report.retrieval.items()):
        lines.append(
            f"{n}\t{result.count}\t{_fmt(result.recall_at.get(1, 0.0))}"
            f"\t{_fmt(result.recall_at.get(5, 0.0))}"
        )
        summary.append((f"retrieval.n{n}.r_at_1", result.recall_at.get(1, 0.0)))
        summary.append((f"retrieval.n{n}.r_at_5", result.recall_at.get(5, 0.0)))
    retrieval_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written["retrieval"] = retrieval_path

    classify_path = out_dir / "classification.tsv"
    lines = ["protocol\taccuracy\tchosen_reg"]
    if report.zero_shot_accuracy is not None:
        lines.append(f"zero_shot\t{_fmt(report.zero_shot_accuracy)}\t-")
        summary.append(("classification.zero_shot", report.zero_shot_accuracy))
    for shots, outcome in sorted(report.probe_outcomes.items()):
        lines.append(f"probe_{shots}shot\t{_fmt(outcome.test_accuracy)}\t{_fmt(outcome.chosen_reg)}")
        summary.append((f"classification.probe_{shots}shot", outcome.test_accuracy))
    classify_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written["classification"] = classify_path

    for name, series in (
        ("plot_views_vs_r1", report.views_curve),
        ("plot_data_scale", report.data_scale_curve),
    ):
        path = out_dir / f"{name}.tsv"
        lines = ["x\ty"] + [f"{x}\t{_fmt(y)}" for x, y in series]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written[name] = path

    summary_path = out_dir / "summary.txt"
    summary_path.write_text(
        "".join(f"{key}={_fmt(value)}\n" for key, value in summary), encoding="utf-8"
    )
    written["summary"] = summary_path
    return written


def parse_summary(path) -> dict[str, float]:
    """Read back a key=value summary with exact float round-trip."""
    values: dict[str, float] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        values[key] = float(raw) if raw != "None" else None
    return values
