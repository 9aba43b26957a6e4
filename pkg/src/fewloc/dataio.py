"""File formats and dataset plumbing: the `.fsl` binary snippet-feature
format, the JSON dataset manifest, prediction CSVs, a named-tensor container
for checkpoints, and a seeded synthetic dataset generator that makes the
whole pipeline verifiable without real video features.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import RngStream

FEATURE_DIM = 1024
SNIPPET_FRAMES = 16

FEATURE_MAGIC = b"FSL1"
TENSOR_MAGIC = b"FSLP"
FORMAT_VERSION = 1


class FeatureFormatError(ValueError):
    """A feature or tensor file violates the binary format."""


class ManifestError(ValueError):
    """A dataset manifest violates its invariants."""


class SyntheticSpecError(ValueError):
    """A synthetic dataset spec cannot be realized."""


class StreamKind(enum.Enum):
    RGB = 0
    FLOW = 1


STREAMS = (StreamKind.RGB, StreamKind.FLOW)


# ---------------------------------------------------------------------------
# Domain records
# ---------------------------------------------------------------------------


@dataclass
class SnippetFeatureSet:
    """Per-video snippet features, one (N, 1024) float64 matrix per stream."""

    video_id: str
    rgb: np.ndarray
    flow: np.ndarray

    def __post_init__(self):
        self.rgb = np.ascontiguousarray(self.rgb, dtype=np.float64)
        self.flow = np.ascontiguousarray(self.flow, dtype=np.float64)
        for name, m in (("rgb", self.rgb), ("flow", self.flow)):
            if m.ndim != 2 or m.shape[1] != FEATURE_DIM:
                raise FeatureFormatError(
                    f"{self.video_id}/{name}: expected (N, {FEATURE_DIM}), got {m.shape}"
                )
        if self.rgb.shape[0] != self.flow.shape[0]:
            raise FeatureFormatError(
                f"{self.video_id}: stream snippet counts differ: "
                f"rgb={self.rgb.shape[0]} flow={self.flow.shape[0]}"
            )
        if self.rgb.shape[0] < 1:
            raise FeatureFormatError(f"{self.video_id}: empty feature set")
        if not (np.isfinite(self.rgb).all() and np.isfinite(self.flow).all()):
            raise FeatureFormatError(f"{self.video_id}: non-finite feature payload")

    @property
    def num_snippets(self) -> int:
        return self.rgb.shape[0]

    def stream(self, kind: StreamKind) -> np.ndarray:
        return self.rgb if kind is StreamKind.RGB else self.flow


@dataclass(frozen=True)
class GtSegment:
    class_id: int
    start: float  # seconds
    end: float


@dataclass
class VideoRecord:
    video_id: str
    trimmed: bool
    labels: tuple
    fps: float | None = None
    gt_segments: tuple = ()

    def gt_in_snippets(self) -> list:
        """Ground truth as (class_id, start, end) in snippet units; needs fps."""
        if self.fps is None:
            raise ManifestError(f"{self.video_id}: fps required for snippet conversion")
        scale = self.fps / SNIPPET_FRAMES
        return [(g.class_id, g.start * scale, g.end * scale) for g in self.gt_segments]


@dataclass
class DatasetManifest:
    classes: dict          # class id -> name
    train_classes: tuple
    test_classes: tuple
    videos: list

    def __post_init__(self):
        self._by_id = {v.video_id: v for v in self.videos}

    def video(self, video_id: str) -> VideoRecord:
        return self._by_id[video_id]

    def split_classes(self, split: str) -> tuple:
        if split == "train":
            return self.train_classes
        if split == "test":
            return self.test_classes
        raise ValueError(f"unknown split {split!r}")

    def videos_with_class(self, class_id: int, trimmed: bool | None = None) -> list:
        out = []
        for v in self.videos:
            if class_id in v.labels and (trimmed is None or v.trimmed == trimmed):
                out.append(v)
        return out

    def validate(self) -> None:
        if not self.videos:
            raise ManifestError("no videos in manifest")
        overlap = set(self.train_classes) & set(self.test_classes)
        if overlap:
            raise ManifestError(f"train/test class overlap: {sorted(overlap)}")
        known = set(self.classes)
        for cid in list(self.train_classes) + list(self.test_classes):
            if cid not in known:
                raise ManifestError(f"split references unknown class id {cid}")
        seen = set()
        for v in self.videos:
            if v.video_id in seen:
                raise ManifestError(f"duplicate video id {v.video_id!r}")
            seen.add(v.video_id)
            if not v.labels:
                raise ManifestError(f"video {v.video_id!r}: empty label set")
            if v.trimmed and len(v.labels) != 1:
                raise ManifestError(f"video {v.video_id!r}: trimmed videos carry exactly one label")
            for cid in v.labels:
                if cid not in known:
                    raise ManifestError(f"video {v.video_id!r}: unknown class id {cid}")
            for g in v.gt_segments:
                if g.class_id not in known:
                    raise ManifestError(f"video {v.video_id!r}: gt references unknown class id {g.class_id}")
                if not g.start < g.end:
                    raise ManifestError(
                        f"video {v.video_id!r}: degenerate gt segment [{g.start}, {g.end}]"
                    )


# ---------------------------------------------------------------------------
# Manifest JSON
# ---------------------------------------------------------------------------


def manifest_to_json(manifest: DatasetManifest) -> dict:
    return {
        "classes": [{"id": cid, "name": name} for cid, name in sorted(manifest.classes.items())],
        "split": {"train": list(manifest.train_classes), "test": list(manifest.test_classes)},
        "videos": [
            {
                "video_id": v.video_id,
                "trimmed": v.trimmed,
                "labels": list(v.labels),
                "fps": v.fps,
                "gt_segments": [
                    {"class_id": g.class_id, "start": g.start, "end": g.end}
                    for g in v.gt_segments
                ],
            }
            for v in manifest.videos
        ],
    }


def save_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest_to_json(manifest), indent=1) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Load and fully validate a manifest; raises ManifestError on violations."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: not valid JSON: {e}") from e
    try:
        classes = {int(c["id"]): str(c["name"]) for c in raw["classes"]}
        split = raw["split"]
        videos = []
        for v in raw["videos"]:
            videos.append(
                VideoRecord(
                    video_id=str(v["video_id"]),
                    trimmed=bool(v["trimmed"]),
                    labels=tuple(sorted(int(c) for c in v["labels"])),
                    fps=None if v.get("fps") is None else float(v["fps"]),
                    gt_segments=tuple(
                        GtSegment(int(g["class_id"]), float(g["start"]), float(g["end"]))
                        for g in v.get("gt_segments", [])
                    ),
                )
            )
        manifest = DatasetManifest(
            classes=classes,
            train_classes=tuple(int(c) for c in split["train"]),
            test_classes=tuple(int(c) for c in split["test"]),
            videos=videos,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"{path}: malformed manifest: {e}") from e
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# .fsl feature files
# ---------------------------------------------------------------------------


def write_features(path, features: SnippetFeatureSet) -> None:
    """Write both streams as little-endian float32, bit-exact round trip."""
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, 2))
        for kind in STREAMS:
            m = features.stream(kind).astype(np.float32)
            f.write(struct.pack("<BII", kind.value, m.shape[0], m.shape[1]))
            f.write(m.tobytes(order="C"))


def load_features(path, video_id: str) -> SnippetFeatureSet:
    """Read a `.fsl` file, widening the payload to float64."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FeatureFormatError(
                f"{path}: truncated while reading {what}: "
                f"expected {pos + n} bytes, file has {len(data)}"
            )
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic (not an .fsl feature file)")
    version, stream_count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported format version {version}")
    if stream_count != 2:
        raise FeatureFormatError(f"{path}: expected 2 streams, header says {stream_count}")
    streams = {}
    for _ in range(stream_count):
        tag, n, dim = struct.unpack("<BII", take(9, "stream header"))
        if tag not in (StreamKind.RGB.value, StreamKind.FLOW.value):
            raise FeatureFormatError(f"{path}: unknown stream tag {tag}")
        if dim != FEATURE_DIM:
            raise FeatureFormatError(f"{path}: stream dim {dim} != {FEATURE_DIM}")
        payload = take(4 * n * dim, f"stream {tag} payload")
        m = np.frombuffer(payload, dtype="<f4").reshape(n, dim)
        if np.isnan(m).any():
            raise FeatureFormatError(f"{path}: NaN in stream {tag} payload")
        streams[tag] = m.astype(np.float64)
    for kind in STREAMS:
        if kind.value not in streams:
            raise FeatureFormatError(f"{path}: stream {kind.name} missing")
    return SnippetFeatureSet(
        video_id=video_id, rgb=streams[StreamKind.RGB.value], flow=streams[StreamKind.FLOW.value]
    )


class FeatureStore:
    """Directory of one `<video_id>.fsl` file per video."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, video_id: str) -> Path:
        return self.root / f"{video_id}.fsl"

    def load(self, video_id: str) -> SnippetFeatureSet:
        p = self.path(video_id)
        if not p.exists():
            raise FileNotFoundError(f"no feature file for video {video_id!r}: {p}")
        return load_features(p, video_id)

    def save(self, features: SnippetFeatureSet) -> Path:
        p = self.path(features.video_id)
        write_features(p, features)
        return p


# ---------------------------------------------------------------------------
# Named-tensor container (checkpoints)
# ---------------------------------------------------------------------------


def write_tensor_container(path, tensors: dict) -> None:
    """Write named float64 tensors; order and bytes are deterministic."""
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def read_tensor_container(path) -> dict:
    data = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FeatureFormatError(
                f"{path}: truncated while reading {what}: "
                f"expected {pos + n} bytes, file has {len(data)}"
            )
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != TENSOR_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic (not a tensor container)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported container version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "tensor rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "tensor shape"))
        size = int(np.prod(shape)) if shape else 1
        payload = take(8 * size, f"tensor {name!r} payload")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return out


# ---------------------------------------------------------------------------
# Prediction CSV
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PredictionRow:
    """One detection: inclusive snippet range [start, end] plus score."""

    video_id: str
    class_id: int
    start: int
    end: int
    score: float


def snippet_span_to_seconds(start: int, end: int, fps: float) -> tuple:
    """Inclusive snippet range -> half-open seconds interval."""
    scale = SNIPPET_FRAMES / fps
    return start * scale, (end + 1) * scale


def write_predictions(path, rows, class_ids, fps_by_video=None) -> None:
    """Write detections sorted by (video, class, descending score, start).

    With fps for every video the file reports seconds, otherwise snippet
    indices. Ties in all sort keys keep the input order (stable sort).
    """
    rows = list(rows)
    for r in rows:
        if r.class_id not in class_ids:
            raise ManifestError(f"prediction references unknown class id {r.class_id}")
        if not (0 <= r.start <= r.end):
            raise ValueError(f"invalid snippet range [{r.start}, {r.end}]")
        if not math.isfinite(r.score):
            raise ValueError(f"non-finite prediction score {r.score}")
    seconds = fps_by_video is not None and all(
        fps_by_video.get(r.video_id) is not None for r in rows
    )
    rows.sort(key=lambda r: (r.video_id, r.class_id, -r.score, r.start))
    lines = []
    if seconds:
        lines.append("video_id,class_id,start_seconds,end_seconds,score")
        for r in rows:
            s, e = snippet_span_to_seconds(r.start, r.end, fps_by_video[r.video_id])
            lines.append(f"{r.video_id},{r.class_id},{s:.6f},{e:.6f},{r.score:.6f}")
    else:
        lines.append("video_id,class_id,start_snippet,end_snippet,score")
        for r in rows:
            lines.append(f"{r.video_id},{r.class_id},{r.start},{r.end},{r.score:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_predictions(path, fps_by_video=None):
    """Read a prediction CSV back into PredictionRow objects."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FeatureFormatError(f"{path}: empty prediction file")
    header = lines[0].split(",")
    if header[2] == "start_snippet":
        seconds = False
    elif header[2] == "start_seconds":
        seconds = True
    else:
        raise FeatureFormatError(f"{path}: unrecognized prediction header {lines[0]!r}")
    rows = []
    for line in lines[1:]:
        vid, cid, start, end, score = line.split(",")
        if seconds:
            if fps_by_video is None or fps_by_video.get(vid) is None:
                raise ManifestError(f"{path}: fps required to read seconds-based predictions")
            scale = fps_by_video[vid] / SNIPPET_FRAMES
            s = int(round(float(start) * scale))
            e = int(round(float(end) * scale)) - 1
        else:
            s, e = int(start), int(end)
        rows.append(PredictionRow(vid, int(cid), s, e, float(score)))
    return rows


# ---------------------------------------------------------------------------
# Synthetic dataset generation
# ---------------------------------------------------------------------------

SYNTHETIC_FPS = 16.0  # one snippet == one second; keeps unit conversions exact

# Structure of the synthetic feature space. All class prototypes and the
# background direction live in a shared low-dim semantic subspace (so what
# an encoder learns about separating semantics from noise transfers to
# unseen classes); a shared low-rank nuisance subspace (scaled by
# separation*noise) makes raw-feature similarities noisy, which is what a
# trained encoder learns to suppress. Background snippets blend the
# background direction with two fixed same-split distractor classes per
# video, so video-mean pooling is class-ambiguous and only well-oriented
# attention masks separate classes. The flow stream carries a weaker signal
# and a heavier nuisance so that channel weighting is worth learning.
SEMANTIC_RANK = 64
NUISANCE_RANK = 24
NUISANCE_GAIN = {StreamKind.RGB: 1.0, StreamKind.FLOW: 2.0}
SIGNAL_GAIN = {StreamKind.RGB: 1.0, StreamKind.FLOW: 0.8}
BACKGROUND_MAG_RANGE = (0.8, 1.2)
BACKGROUND_BASE_WEIGHT = (0.5, 0.9)
BACKGROUND_BLEND_WEIGHT = (0.25, 0.55)
BACKGROUND_BLEND_CLASSES = 2
EXTRA_CLASS_PROB = 0.25


@dataclass
class SyntheticSpec:
    class_count: int = 15
    videos_per_class: int = 8
    snippets_min: int = 10
    snippets_max: int = 16
    instances_min: int = 1
    instances_max: int = 2
    action_len_min: int = 2
    action_len_max: int = 5
    separation: float = 4.0
    noise: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        counts = (
            self.class_count,
            self.videos_per_class,
            self.snippets_min,
            self.snippets_max,
            self.instances_min,
            self.instances_max,
            self.action_len_min,
            self.action_len_max,
        )
        if any(c < 1 for c in counts):
            raise SyntheticSpecError(f"all counts must be >= 1: {self}")
        if self.snippets_min > self.snippets_max:
            raise SyntheticSpecError("snippet range is inverted")
        if self.instances_min > self.instances_max:
            raise SyntheticSpecError("instance range is inverted")
        if self.action_len_min > self.action_len_max:
            raise SyntheticSpecError("action length range is inverted")
        if self.separation <= 0.0:
            raise SyntheticSpecError("separation must be positive")
        if self.noise < 0.0:
            raise SyntheticSpecError("noise must be non-negative")
        if self.action_len_min > self.snippets_max:
            raise SyntheticSpecError(
                f"impossible packing: minimum action length {self.action_len_min} "
                f"exceeds maximum video length {self.snippets_max}"
            )

    def to_json(self) -> dict:
        return {
            "class_count": self.class_count,
            "videos_per_class": self.videos_per_class,
            "snippets_min": self.snippets_min,
            "snippets_max": self.snippets_max,
            "instances_min": self.instances_min,
            "instances_max": self.instances_max,
            "action_len_min": self.action_len_min,
            "action_len_max": self.action_len_max,
            "separation": self.separation,
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise SyntheticSpecError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    out_dir: Path
    prototypes: dict  # StreamKind -> (class_count, FEATURE_DIM) unit rows
    feature_paths: list


def _unit_rows(rng: RngStream, n: int, dim: int) -> np.ndarray:
    m = rng.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _orthonormal_basis(rng: RngStream, dim: int, rank: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((dim, rank)))
    return q


def _place_instances(n_snippets: int, lengths: list, rng: RngStream) -> list:
    """Place len(lengths) segments with at least one background gap between
    consecutive instances. Returns [(start, end_exclusive), ...]."""
    k = len(lengths)
    free = n_snippets - sum(lengths) - (k - 1)
    cuts = np.sort(rng.integers(0, free + 1, size=k)) if k else np.array([], dtype=int)
    spans = []
    pos = 0
    prev_cut = 0
    for i, length in enumerate(lengths):
        gap = int(cuts[i] - prev_cut) + (1 if i > 0 else 0)
        prev_cut = int(cuts[i])
        pos += gap
        spans.append((pos, pos + length))
        pos += length
    return spans


class _FeatureFactory:
    """Draws synthetic snippet features for one dataset."""

    def __init__(self, spec: SyntheticSpec, rng: RngStream):
        self.spec = spec
        struct_rng = rng.substream("structure")
        self.prototypes = {}
        self.background = {}
        self.nuisance = {}
        for kind in STREAMS:
            srng = struct_rng.substream(kind.name.lower())
            semantic = _orthonormal_basis(srng.substream("semantic"), FEATURE_DIM, SEMANTIC_RANK)
            self.prototypes[kind] = (
                _unit_rows(srng.substream("classes"), spec.class_count, SEMANTIC_RANK) @ semantic.T
            )
            self.background[kind] = (
                _unit_rows(srng.substream("background"), 1, SEMANTIC_RANK) @ semantic.T
            )[0]
            self.nuisance[kind] = _orthonormal_basis(srng.substream("nuisance"), FEATURE_DIM, NUISANCE_RANK)

    def _common_terms(self, kind: StreamKind, n: int, rng: RngStream) -> np.ndarray:
        sep, noise = self.spec.separation, self.spec.noise
        coeff = rng.normal(0.0, 1.0 / math.sqrt(NUISANCE_RANK), size=(n, NUISANCE_RANK))
        nuis = sep * noise * NUISANCE_GAIN[kind] * (coeff @ self.nuisance[kind].T)
        white = noise * rng.standard_normal((n, FEATURE_DIM)) / math.sqrt(FEATURE_DIM)
        return nuis + white

    def action_snippets(self, kind: StreamKind, class_id: int, n: int, rng: RngStream) -> np.ndarray:
        sep = self.spec.separation
        signal = sep * SIGNAL_GAIN[kind] * self.prototypes[kind][class_id]
        return signal + self._common_terms(kind, n, rng)

    def background_snippets(self, kind: StreamKind, n: int, rng: RngStream, distractors) -> np.ndarray:
        sep = self.spec.separation
        mag = rng.uniform(*BACKGROUND_MAG_RANGE, size=(n, 1))
        w_base = rng.uniform(*BACKGROUND_BASE_WEIGHT, size=(n, 1))
        direction = w_base * self.background[kind]
        for cid in distractors:
            w = rng.uniform(*BACKGROUND_BLEND_WEIGHT, size=(n, 1))
            direction = direction + w * self.prototypes[kind][cid]
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        return sep * mag * direction + self._common_terms(kind, n, rng)


def gen_synthetic(spec: SyntheticSpec, out_dir) -> SyntheticDataset:
    """Generate manifest + feature files; a pure function of the spec."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = RngStream(spec.seed, "synthetic")
    factory = _FeatureFactory(spec, rng)

    n_train = int(round(spec.class_count * 2 / 3))
    train_classes = tuple(range(n_train))
    test_classes = tuple(range(n_train, spec.class_count))
    classes = {c: f"class_{c:02d}" for c in range(spec.class_count)}
    split_of = {c: ("train" if c < n_train else "test") for c in range(spec.class_count)}
    split_members = {
        "train": list(train_classes),
        "test": list(test_classes),
    }

    videos = []
    feature_paths = []
    store = FeatureStore(out_dir)

    def emit(video_id, trimmed, segments, n_snippets, peer_pool):
        # segments: [(class_id, start, end_exclusive)] in snippet units;
        # background blends two fixed distractor classes (same split, not
        # labels of this video)
        vrng = rng.substream(f"video/{video_id}")
        labels_here = {cid for cid, _, _ in segments}
        candidates = [x for x in peer_pool if x not in labels_here]
        take = min(BACKGROUND_BLEND_CLASSES, len(candidates))
        distractors = sorted(
            int(x) for x in vrng.substream("distract").choice(candidates, size=take, replace=False)
        ) if take else []
        streams = {}
        for kind in STREAMS:
            srng = vrng.substream(kind.name.lower())
            rows = factory.background_snippets(kind, n_snippets, srng.substream("bg"), distractors)
            for i, (cid, s, e) in enumerate(segments):
                rows[s:e] = factory.action_snippets(kind, cid, e - s, srng.substream(f"act{i}"))
            streams[kind] = rows
        labels = tuple(sorted({cid for cid, _, _ in segments}))
        gts = tuple(GtSegment(cid, float(s), float(e)) for cid, s, e in segments)
        videos.append(
            VideoRecord(video_id=video_id, trimmed=trimmed, labels=labels,
                        fps=SYNTHETIC_FPS, gt_segments=gts)
        )
        feature_paths.append(
            store.save(SnippetFeatureSet(video_id, streams[StreamKind.RGB], streams[StreamKind.FLOW]))
        )

    for c in range(spec.class_count):
        crng = rng.substream(f"layout/{c}")
        blend_pool = list(split_members[split_of[c]])
        for i in range(spec.videos_per_class):
            length = int(crng.integers(spec.action_len_min, spec.action_len_max + 1))
            emit(f"c{c:02d}_t{i:02d}", True, [(c, 0, length)], length, blend_pool)
        for i in range(spec.videos_per_class):
            vrng = crng.substream(f"untrimmed/{i}")
            n = int(vrng.integers(spec.snippets_min, spec.snippets_max + 1))
            k = int(vrng.integers(spec.instances_min, spec.instances_max + 1))
            lengths = [
                int(vrng.integers(spec.action_len_min, spec.action_len_max + 1))
                for _ in range(k)
            ]
            while lengths and sum(lengths) + (len(lengths) - 1) > n:
                if len(lengths) > 1:
                    lengths.pop()
                else:
                    lengths[0] = n  # single instance filling the whole video
            spans = _place_instances(n, lengths, vrng.substream("place"))
            segs = []
            peers = [x for x in split_members[split_of[c]] if x != c]
            for j, (s, e) in enumerate(spans):
                cid = c
                if j > 0 and peers and vrng.random() < EXTRA_CLASS_PROB:
                    cid = int(vrng.choice(peers))
                segs.append((cid, s, e))
            emit(f"c{c:02d}_u{i:02d}", False, segs, n, blend_pool)

    manifest = DatasetManifest(
        classes=classes,
        train_classes=train_classes,
        test_classes=test_classes,
        videos=videos,
    )
    manifest.validate()
    save_manifest(out_dir / "manifest.json", manifest)
    return SyntheticDataset(
        manifest=manifest,
        out_dir=out_dir,
        prototypes=dict(factory.prototypes),
        feature_paths=feature_paths,
    )
