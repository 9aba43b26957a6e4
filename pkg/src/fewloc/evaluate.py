"""Detection and recognition metrics (tIoU, per-class AP with all-point
interpolation, mAP grids, top-k accuracy) and the episodic few-shot testing
protocol runner.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import locclass
from .dataio import DatasetManifest, FeatureStore, PredictionRow
from .episodes import EpisodeConfig, sample_test_episode
from .model import FewShotModel, run_episode
from .numkit import RngStream

#: Reported mAP table columns (Table-style grid).
TIOU_TABLE_GRID = tuple(round(0.1 * i, 2) for i in range(1, 10))
#: Grid averaged into the single "average mAP" number.
TIOU_AVERAGE_GRID = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


class ProtocolError(ValueError):
    pass


def tiou(a, b) -> float:
    """Temporal intersection-over-union of two (start, end) intervals; 0 for
    disjoint or degenerate intervals."""
    (a0, a1), (b0, b1) = a, b
    if a1 <= a0 or b1 <= b0:
        return 0.0
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0.0:
        return 0.0
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union


def average_precision(predictions, ground_truths, tiou_threshold: float):
    """All-point interpolated AP for one class.

    predictions: (unit_id, start, end, score) tuples; ground_truths:
    (unit_id, start, end). Greedy matching in descending score order; each
    prediction claims its best-tIoU still-unmatched ground truth in the
    same unit, and counts as a true positive when that tIoU meets the
    threshold. Returns (ap, no_ground_truth_flag).
    """
    n_pos = len(ground_truths)
    if n_pos == 0:
        return 0.0, True
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i][3])
    gt_by_unit = {}
    for gi, (unit, s, e) in enumerate(ground_truths):
        gt_by_unit.setdefault(unit, []).append((gi, (s, e)))
    matched = set()
    tp = np.zeros(len(order))
    for rank, pi in enumerate(order):
        unit, s, e, _ = predictions[pi]
        best_iou, best_gi = 0.0, None
        for gi, seg in gt_by_unit.get(unit, ()):  # best unmatched ground truth
            if gi in matched:
                continue
            value = tiou((s, e), seg)
            if value > best_iou:
                best_iou, best_gi = value, gi
        if best_gi is not None and best_iou >= tiou_threshold:
            matched.add(best_gi)
            tp[rank] = 1.0
    if len(order) == 0 or tp.sum() == 0:
        return 0.0, False
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(order) + 1)
    recall = cum_tp / n_pos
    # monotone precision envelope, integrated over recall increments
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0] + 1
    ap = float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))
    return ap, False


def topk_accuracy(score_rows, k: int) -> float:
    """Fraction of queries whose top-k scored classes hit any true label.
    Ties rank the lower class index first."""
    if not score_rows:
        raise ProtocolError("topk_accuracy needs at least one query")
    hits = 0
    for scores, labels in score_rows:
        scores = np.asarray(scores, dtype=np.float64)
        if k > scores.size:
            raise ProtocolError(f"k={k} exceeds {scores.size} classes")
        ranked = sorted(range(scores.size), key=lambda c: (-scores[c], c))
        if any(labels[c] > 0 for c in ranked[:k]):
            hits += 1
    return hits / len(score_rows)


# ---------------------------------------------------------------------------
# Protocol runner
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolConfig:
    ways: int = 5
    shots: int = 1
    queries_per_class: int = 1
    episodes: int = 50
    repetitions: int = 3
    seed: int = 0
    threshold: locclass.ThresholdPolicy = locclass.ThresholdPolicy("midrange")
    aggregation: str = "pooled"  # or "per_episode"
    multiply_class_score: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.episodes < 1:
            raise ProtocolError("protocol needs at least one episode")
        if self.repetitions < 1:
            raise ProtocolError("protocol needs at least one repetition")
        if self.aggregation not in ("pooled", "per_episode"):
            raise ProtocolError(f"unknown aggregation {self.aggregation!r}")
        if self.workers < 1:
            raise ProtocolError("workers must be >= 1")


@dataclass
class MetricsReport:
    map_table: dict          # tIoU -> median mAP over repetitions (0.1 .. 0.9 grid)
    map_average_grid: dict   # tIoU -> median mAP on the 0.50 .. 0.95 grid
    average_map: float       # median over reps of mean mAP on the 0.5:0.05:0.95 grid
    top1: float
    top3: float
    per_class_ap: dict       # global class id -> median AP at tIoU 0.5
    metadata: dict
    warnings: tuple = ()

    def to_csv_text(self) -> str:
        lines = ["metric,key,value"]
        for t in TIOU_TABLE_GRID:
            lines.append(f"map,{t:.2f},{self.map_table[t]:.6f}")
        for t in TIOU_AVERAGE_GRID:
            lines.append(f"map_avg_grid,{t:.2f},{self.map_average_grid[t]:.6f}")
        lines.append(f"average_map,,{self.average_map:.6f}")
        lines.append(f"top1,,{self.top1:.6f}")
        lines.append(f"top3,,{self.top3:.6f}")
        for cid in sorted(self.per_class_ap):
            lines.append(f"class_ap@0.50,{cid},{self.per_class_ap[cid]:.6f}")
        for key in sorted(self.metadata):
            lines.append(f"meta,{key},{self.metadata[key]}")
        return "\n".join(lines) + "\n"

    def summary_text(self) -> str:
        header = ["tIoU"] + [f"{t:.1f}" for t in TIOU_TABLE_GRID] + ["avg", "Top-1", "Top-3"]
        values = (
            ["mAP"]
            + [f"{100 * self.map_table[t]:.2f}" for t in TIOU_TABLE_GRID]
            + [f"{100 * self.average_map:.2f}", f"{100 * self.top1:.2f}", f"{100 * self.top3:.2f}"]
        )
        w = max(len(x) for x in header + values) + 1
        return (
            "".join(x.rjust(w) for x in header) + "\n" + "".join(x.rjust(w) for x in values) + "\n"
        )


def _reference_length(run, c):
    return float(np.mean(run.ref_snippet_counts[c]))


def collect_detections(run, manifest: DatasetManifest, policy, unit_prefix: str,
                       multiply_class_score: bool = False):
    """Turn one episode run into pooled detections/ground truths per global
    class id. Units are (unit_prefix, video_id) so repeated pairings of the
    same video stay distinct evaluation items."""
    detections = {}
    truths = {}
    fallbacks = 0
    class_ids = run.episode.class_ids
    for qi, q in enumerate(run.queries):
        unit = f"{unit_prefix}/q{qi}/{q.video_id}"
        record = manifest.video(q.video_id)
        gt = record.gt_in_snippets()
        for c, cid in enumerate(class_ids):
            for g_cid, g_s, g_e in gt:
                if g_cid == cid:
                    truths.setdefault(cid, []).append((unit, g_s, g_e))
            attn = q.raw_attn[:, c]
            ref_len = _reference_length(run, c) if policy.kind == "length_matched" else None
            delta, fell_back = locclass.resolve_threshold(attn, policy, ref_len)
            fallbacks += int(fell_back)
            for pred in locclass.localize(attn, delta, c):
                score = pred.score
                if multiply_class_score:
                    score *= float(q.scores[c])
                detections.setdefault(cid, []).append(
                    (unit, float(pred.start), float(pred.end + 1), score, q.video_id, pred)
                )
    return detections, truths, fallbacks


def run_protocol(manifest: DatasetManifest, store: FeatureStore, model: FewShotModel,
                 cfg: ProtocolConfig):
    """The few-shot testing protocol: per repetition, sample episodes, pool
    detections per class, compute the mAP grids and top-k accuracy; report
    the median across repetitions per metric. Returns (MetricsReport,
    first-repetition PredictionRow list).
    """
    rng = RngStream(cfg.seed, "protocol")
    ecfg = EpisodeConfig(ways=cfg.ways, shots=cfg.shots, queries_per_class=cfg.queries_per_class)
    thresholds = sorted(set(TIOU_TABLE_GRID) | set(TIOU_AVERAGE_GRID))

    rep_map = {t: [] for t in thresholds}
    rep_avg, rep_top1, rep_top3 = [], [], []
    rep_class_ap = {}
    warnings = []
    first_rows = []

    for rep in range(cfg.repetitions):
        rep_rng = rng.substream(f"rep/{rep}")
        score_rows = []
        pooled_det = {}
        pooled_gt = {}
        episode_maps = {t: [] for t in thresholds}

        def one_episode(ei):
            episode = sample_test_episode(manifest, ecfg, rep_rng.substream(f"episode/{ei}"))
            return run_episode(model, episode, store.load, training=False)

        if cfg.workers > 1:
            # read-only model snapshot; results folded in episode order
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                runs = list(pool.map(one_episode, range(cfg.episodes)))
        else:
            runs = [one_episode(ei) for ei in range(cfg.episodes)]

        for ei, run in enumerate(runs):
            for q in run.queries:
                score_rows.append((q.scores, q.labels))
            det, gt, fallbacks = collect_detections(
                run, manifest, cfg.threshold, f"r{rep}/e{ei}", cfg.multiply_class_score
            )
            if fallbacks:
                warnings.append(f"rep {rep} episode {ei}: {fallbacks} threshold fallback(s)")
            for cid, items in det.items():
                pooled_det.setdefault(cid, []).extend(items)
            for cid, items in gt.items():
                pooled_gt.setdefault(cid, []).extend(items)
            if cfg.aggregation == "per_episode":
                for t in thresholds:
                    aps = [
                        average_precision(
                            [d[:4] for d in det.get(cid, [])], gt[cid], t
                        )[0]
                        for cid in sorted(gt)
                    ]
                    episode_maps[t].append(float(np.mean(aps)) if aps else 0.0)
        if rep == 0:
            for cid in sorted(pooled_det):
                for unit, s, e, score, video_id, pred in pooled_det[cid]:
                    first_rows.append(
                        PredictionRow(video_id, cid, pred.start, pred.end, score)
                    )
        class_list = sorted(pooled_gt)
        if not class_list:
            raise ProtocolError("no ground-truth segments in the sampled episodes")
        map_at = {}
        ap_at_half = {}
        for t in thresholds:
            aps = []
            for cid in class_list:
                ap, _ = average_precision(
                    [d[:4] for d in pooled_det.get(cid, [])], pooled_gt[cid], t
                )
                aps.append(ap)
                if t == 0.5:
                    ap_at_half[cid] = ap
            map_at[t] = float(np.mean(aps))
        if cfg.aggregation == "per_episode":
            map_at = {t: float(np.mean(episode_maps[t])) for t in thresholds}
        for t in thresholds:
            rep_map[t].append(map_at[t])
        rep_avg.append(float(np.mean([map_at[t] for t in TIOU_AVERAGE_GRID])))
        rep_top1.append(topk_accuracy(score_rows, 1))
        rep_top3.append(topk_accuracy(score_rows, min(3, cfg.ways)))
        for cid, ap in ap_at_half.items():
            rep_class_ap.setdefault(cid, []).append(ap)

    report = MetricsReport(
        map_table={t: float(np.median(rep_map[t])) for t in TIOU_TABLE_GRID},
        map_average_grid={t: float(np.median(rep_map[t])) for t in TIOU_AVERAGE_GRID},
        average_map=float(np.median(rep_avg)),
        top1=float(np.median(rep_top1)),
        top3=float(np.median(rep_top3)),
        per_class_ap={cid: float(np.median(v)) for cid, v in rep_class_ap.items()},
        metadata={
            "ways": cfg.ways,
            "shots": cfg.shots,
            "queries_per_class": cfg.queries_per_class,
            "episodes": cfg.episodes,
            "repetitions": cfg.repetitions,
            "seed": cfg.seed,
            "threshold": cfg.threshold.kind,
            "aggregation": cfg.aggregation,
        },
        warnings=tuple(warnings),
    )
    return report, first_rows
