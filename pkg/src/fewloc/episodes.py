"""Episode construction: C-way K-shot tasks drawn from a manifest, with
trimmed sample sets and untrimmed multi-label query sets. Sampling never
touches feature payloads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import DatasetManifest
from .numkit import RngStream


class EpisodeError(ValueError):
    """The manifest cannot support the requested episode shape."""


@dataclass(frozen=True)
class EpisodeConfig:
    ways: int = 5
    shots: int = 1
    queries_per_class: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.ways < 1 or self.shots < 1 or self.queries_per_class < 1:
            raise ValueError(f"episode counts must be >= 1: {self}")


@dataclass(frozen=True)
class QueryItem:
    video_id: str
    labels: np.ndarray  # multi-hot over the episode's local class indexes


@dataclass(frozen=True)
class Episode:
    class_ids: tuple   # local index c -> global class id
    sample_sets: tuple # per local class: tuple of K trimmed video ids
    queries: tuple     # QueryItem, deduplicated, in draw order
    split: str

    @property
    def ways(self) -> int:
        return len(self.class_ids)

    @property
    def shots(self) -> int:
        return len(self.sample_sets[0])


def _sample_episode(manifest: DatasetManifest, cfg: EpisodeConfig, rng: RngStream, split: str) -> Episode:
    classes = manifest.split_classes(split)
    if len(classes) < cfg.ways:
        raise EpisodeError(
            f"{split} split has {len(classes)} classes, episode needs {cfg.ways}"
        )
    chosen = [int(c) for c in rng.choice(list(classes), size=cfg.ways, replace=False)]

    sample_sets = []
    for cid in chosen:
        trimmed = [v.video_id for v in manifest.videos_with_class(cid, trimmed=True)]
        if len(trimmed) < cfg.shots:
            raise EpisodeError(
                f"class {cid} has {len(trimmed)} trimmed videos, episode needs {cfg.shots}"
            )
        picks = rng.choice(trimmed, size=cfg.shots, replace=False)
        sample_sets.append(tuple(str(v) for v in picks))

    chosen_set = set(chosen)
    queries = []
    seen = set()
    for cid in chosen:
        candidates = [v.video_id for v in manifest.videos_with_class(cid, trimmed=False)]
        if not candidates:
            raise EpisodeError(f"class {cid} has no untrimmed query videos")
        take = min(cfg.queries_per_class, len(candidates))
        picks = rng.choice(candidates, size=take, replace=False)
        for vid in (str(v) for v in picks):
            if vid in seen:
                continue
            seen.add(vid)
            labels = np.zeros(cfg.ways)
            video = manifest.video(vid)
            for j, ec in enumerate(chosen):
                if ec in video.labels:
                    labels[j] = 1.0
            queries.append(QueryItem(video_id=vid, labels=labels))
    # an episode class could lose all its positives only if dedup dropped
    # them, which cannot happen (dedup keeps the first occurrence)
    return Episode(
        class_ids=tuple(chosen),
        sample_sets=tuple(sample_sets),
        queries=tuple(queries),
        split=split,
    )


def sample_train_episode(manifest: DatasetManifest, cfg: EpisodeConfig, rng: RngStream) -> Episode:
    return _sample_episode(manifest, cfg, rng, "train")


def sample_test_episode(manifest: DatasetManifest, cfg: EpisodeConfig, rng: RngStream) -> Episode:
    """Same mechanics over the test split; ground truth stays in the manifest
    for the evaluator and is never handed to the model path."""
    return _sample_episode(manifest, cfg, rng, "test")
