"""The assembled few-shot localization network: snippet encoders feed
similarity matrices, whose row-max vectors feed the attention generator;
attention masks drive both localization and attention-weighted
classification. One forward (and hand-written backward) implementation
serves training, evaluation and the no-learn ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dataio, encoder as enc, locclass, tcam, tsm as tsmod
from .dataio import STREAMS, StreamKind
from .episodes import Episode
from .numkit import RngStream, ShapeError, softmax_columns, softmax_vjp
from .tsm import CANONICAL_COMBOS, SimilarityMetric

POOLING_MODES = ("weighted", "average")
_METRIC_ORDER = (SimilarityMetric.COSINE, SimilarityMetric.DOT, SimilarityMetric.EUCLIDEAN)


@dataclass(frozen=True)
class ModelConfig:
    use_encoder: bool = True
    use_generator: bool = True
    metrics: tuple = (SimilarityMetric.COSINE, SimilarityMetric.DOT)
    pooling: str = "weighted"
    dropout_rate: float = 0.5

    def __post_init__(self):
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if not self.metrics:
            raise ValueError("at least one similarity metric must be enabled")
        for m in self.metrics:
            if not isinstance(m, SimilarityMetric):
                raise ValueError(f"not a similarity metric: {m!r}")


class FewShotModel:
    """Parameters plus the mode switches (learned vs bypassed modules)."""

    def __init__(self, config: ModelConfig, encoder_params=None, generator_params=None):
        self.config = config
        self.encoder = encoder_params
        self.generator = generator_params
        if config.use_encoder and encoder_params is None:
            raise ValueError("use_encoder set but no encoder parameters supplied")
        if config.use_generator and generator_params is None:
            raise ValueError("use_generator set but no generator parameters supplied")

    @classmethod
    def create(cls, config: ModelConfig, rng: RngStream) -> "FewShotModel":
        encoder_params = enc.init_encoder(rng.substream("encoder")) if config.use_encoder else None
        generator_params = tcam.init_generator(rng.substream("generator")) if config.use_generator else None
        return cls(config, encoder_params, generator_params)

    def tensors(self):
        out = []
        if self.encoder is not None:
            out.extend(self.encoder.tensors())
        if self.generator is not None:
            out.extend(self.generator.tensors())
        return out

    def channels(self):
        """(metric, stream) pairs feeding the attention stage, in order."""
        if self.config.use_generator:
            return CANONICAL_COMBOS
        return tuple(
            (metric, stream)
            for metric in _METRIC_ORDER
            if metric in self.config.metrics
            for stream in STREAMS
        )

    # -- checkpointing ------------------------------------------------------

    def save(self, path) -> None:
        flags = np.array(
            [
                float(self.config.use_encoder),
                float(self.config.use_generator),
                float(POOLING_MODES.index(self.config.pooling)),
                self.config.dropout_rate,
                float(SimilarityMetric.COSINE in self.config.metrics),
                float(SimilarityMetric.DOT in self.config.metrics),
                float(SimilarityMetric.EUCLIDEAN in self.config.metrics),
            ]
        )
        tensors = {"meta/flags": flags}
        for p in self.tensors():
            tensors[p.name] = p.value
        if self.generator is not None:
            tensors["generator/running_mean"] = self.generator.running_mean
            tensors["generator/running_var"] = self.generator.running_var
        dataio.write_tensor_container(path, tensors)

    @classmethod
    def load(cls, path) -> "FewShotModel":
        tensors = dataio.read_tensor_container(path)
        if "meta/flags" not in tensors:
            raise dataio.FeatureFormatError(f"{path}: not a model checkpoint (meta/flags missing)")
        flags = tensors["meta/flags"]
        metrics = tuple(
            m
            for m, on in zip(_METRIC_ORDER, flags[4:7])
            if on > 0.5
        )
        config = ModelConfig(
            use_encoder=flags[0] > 0.5,
            use_generator=flags[1] > 0.5,
            metrics=metrics,
            pooling=POOLING_MODES[int(flags[2])],
            dropout_rate=float(flags[3]),
        )
        encoder_params = None
        generator_params = None
        if config.use_encoder:
            encoder_params = enc.init_encoder(RngStream(0, "load-placeholder"))
            for p in encoder_params.tensors():
                p.value[...] = tensors[p.name]
        if config.use_generator:
            generator_params = tcam.init_generator(RngStream(0, "load-placeholder"))
            for p in generator_params.tensors():
                p.value[...] = tensors[p.name]
            generator_params.running_mean[...] = tensors["generator/running_mean"]
            generator_params.running_var[...] = tensors["generator/running_var"]
        return cls(config, encoder_params, generator_params)


# ---------------------------------------------------------------------------
# Episode forward / backward
# ---------------------------------------------------------------------------


@dataclass
class QueryResult:
    video_id: str
    raw_attn: np.ndarray   # (N_q, C), K-shot averaged
    norm_attn: np.ndarray  # (N_q, C), temporal softmax per class column
    scores: np.ndarray     # (C,)
    labels: np.ndarray     # (C,) multi-hot
    loss: float


@dataclass
class EpisodeRun:
    episode: Episode
    loss: float
    queries: list
    ref_snippet_counts: list  # per class: list of reference lengths (snippets)


@dataclass
class _PairRecord:
    query_index: int
    class_index: int
    shot_index: int
    tsms: list
    vectors: list
    attn: np.ndarray = None
    rows: slice = None
    d_attn: np.ndarray = None


def run_episode(
    model: FewShotModel,
    episode: Episode,
    feature_lookup,
    training: bool,
    rng: RngStream | None = None,
    update_bn: bool = False,
    backprop: bool = False,
) -> EpisodeRun:
    """Full episode pass. `feature_lookup(video_id)` yields SnippetFeatureSets.

    With `backprop` the exact gradients of the mean query loss are
    accumulated into every parameter tensor the model configuration enables.
    Training mode draws dropout masks from `rng` and, when `update_bn` is
    set, folds the episode's batch statistics into the generator's running
    stats.
    """
    cfg = model.config
    if backprop and not training:
        raise ValueError("backprop requires training mode")
    ways = episode.ways
    shots = episode.shots
    n_queries = len(episode.queries)
    if n_queries == 0:
        raise ShapeError("episode has no queries")

    ref_ids = [vid for sample_set in episode.sample_sets for vid in sample_set]
    query_ids = [q.video_id for q in episode.queries]
    order = ref_ids + query_ids
    featsets = {vid: feature_lookup(vid) for vid in order}

    # one stacked encoder pass per stream
    slices = {}
    pos = 0
    for vid in order:
        n = featsets[vid].num_snippets
        slices[vid] = slice(pos, pos + n)
        pos += n
    embeds = {}
    enc_caches = {}
    for s in STREAMS:
        x = np.vstack([featsets[vid].stream(s) for vid in order])
        if cfg.use_encoder:
            drop_rng = rng.substream(f"dropout/{s.name.lower()}") if training else None
            embeds[s], enc_caches[s] = enc.encode_forward(
                model.encoder, x, s, training, drop_rng, cfg.dropout_rate
            )
        else:
            embeds[s] = x

    def video_embeds(vid):
        return {s: embeds[s][slices[vid]] for s in STREAMS}

    prototypes = [
        [locclass.sample_repr(video_embeds(vid)) for vid in episode.sample_sets[c]]
        for c in range(ways)
    ]
    ref_counts = [
        [featsets[vid].num_snippets for vid in episode.sample_sets[c]]
        for c in range(ways)
    ]

    channels = model.channels()
    records = _pair_records(model, episode, embeds, slices, channels)

    if cfg.use_generator:
        stacked = np.vstack(
            [np.stack([v.values for v in r.vectors], axis=1) for r in records]
        )
        attn_all, gen_cache = tcam.attention_forward(
            stacked, model.generator, training=training, update_running=update_bn
        )
        pos = 0
        for r in records:
            n = len(r.vectors[0].values)
            r.rows = slice(pos, pos + n)
            r.attn = attn_all[r.rows]
            pos += n
    else:
        for r in records:
            r.attn = np.mean([v.values for v in r.vectors], axis=0)

    by_pair = {}
    for r in records:
        by_pair.setdefault((r.query_index, r.class_index), []).append(r)

    query_results = []
    d_embeds = {s: np.zeros_like(embeds[s]) for s in STREAMS} if backprop else None
    total_loss = 0.0
    for qi, q in enumerate(episode.queries):
        q_emb = video_embeds(q.video_id)
        raw = np.stack(
            [tcam.kshot_average([r.attn for r in by_pair[(qi, c)]]) for c in range(ways)],
            axis=1,
        )
        norm = softmax_columns(raw)
        concat = np.hstack([q_emb[s] for s in STREAMS])
        n_q = concat.shape[0]
        if cfg.pooling == "weighted":
            x_q = norm.T @ concat
        else:
            x_q = np.tile(concat.mean(axis=0), (ways, 1))
        scores = locclass.classify(x_q, prototypes)
        loss, d_logits = locclass.class_loss(scores, q.labels)
        total_loss += loss
        query_results.append(
            QueryResult(q.video_id, raw, norm, scores, q.labels.copy(), loss)
        )

        if not backprop:
            continue
        d_dist = -d_logits / n_queries
        d_x_q = np.zeros_like(x_q)
        for c in range(ways):
            shots_arr = np.asarray(prototypes[c])
            d_x_q[c] = 2.0 * d_dist[c] * (x_q[c] - shots_arr.mean(axis=0))
            d_shot = (2.0 * d_dist[c] / shots) * (shots_arr - x_q[c])
            for k, ref_vid in enumerate(episode.sample_sets[c]):
                per_row = d_shot[k] / featsets[ref_vid].num_snippets
                half = enc.EMBED_DIM if cfg.use_encoder else dataio.FEATURE_DIM
                d_embeds[StreamKind.RGB][slices[ref_vid]] += per_row[:half]
                d_embeds[StreamKind.FLOW][slices[ref_vid]] += per_row[half:]
        if cfg.pooling == "weighted":
            d_norm = concat @ d_x_q.T
            d_concat = norm @ d_x_q
            d_raw = softmax_vjp(norm, d_norm)
        else:
            d_concat = np.tile(d_x_q.sum(axis=0) / n_q, (n_q, 1))
            d_raw = np.zeros_like(raw)
        half = concat.shape[1] // 2
        d_embeds[StreamKind.RGB][slices[q.video_id]] += d_concat[:, :half]
        d_embeds[StreamKind.FLOW][slices[q.video_id]] += d_concat[:, half:]
        for c in range(ways):
            for r in by_pair[(qi, c)]:
                r.d_attn = d_raw[:, c] / shots

    mean_loss = total_loss / n_queries

    if backprop:
        if cfg.use_generator:
            d_attn_all = np.concatenate([r.d_attn for r in records])
            d_stacked = tcam.attention_backward(model.generator, gen_cache, d_attn_all)
            for r in records:
                d_block = d_stacked[r.rows]
                _tsm_grads(r, d_block, episode, slices, d_embeds)
        else:
            n_ch = len(channels)
            for r in records:
                d_block = np.tile((r.d_attn / n_ch)[:, None], (1, n_ch))
                _tsm_grads(r, d_block, episode, slices, d_embeds)
        if cfg.use_encoder:
            for s in STREAMS:
                enc.encode_backward(
                    model.encoder, enc_caches[s], d_embeds[s], compute_input_grad=False
                )

    return EpisodeRun(
        episode=episode,
        loss=mean_loss,
        queries=query_results,
        ref_snippet_counts=ref_counts,
    )


def _pair_records(model, episode, embeds, slices, channels):
    """All (query, class, shot) similarity records of the episode.

    The queries occupy one contiguous row block per stream (they were
    stacked after the references), so each (class, shot, stream) pair needs
    a single Gram matmul against the whole query stack; per-query TSMs are
    row slices of it. Semantics are identical to tsm.pair_tsms per pair.
    """
    query_ids = [q.video_id for q in episode.queries]
    q_start = min(slices[vid].start for vid in query_ids)
    stacked = {s: embeds[s][q_start:] for s in STREAMS}
    grams = {}
    for c in range(episode.ways):
        for k, ref_vid in enumerate(episode.sample_sets[c]):
            for s in {stream for _, stream in channels}:
                grams[(c, k, s)] = stacked[s] @ embeds[s][slices[ref_vid]].T

    records = []
    for qi, q in enumerate(episode.queries):
        rows = slice(slices[q.video_id].start - q_start, slices[q.video_id].stop - q_start)
        q_emb = {s: stacked[s][rows] for s in STREAMS}
        for c in range(episode.ways):
            for k, ref_vid in enumerate(episode.sample_sets[c]):
                r_emb = {s: embeds[s][slices[ref_vid]] for s in STREAMS}
                tsms = [
                    tsmod._tsm_from_gram(grams[(c, k, stream)][rows], q_emb[stream],
                                         r_emb[stream], metric, stream, c)
                    for metric, stream in channels
                ]
                vectors = [tsmod.maxpool_rows(t) for t in tsms]
                records.append(_PairRecord(qi, c, k, tsms, vectors))
    return records


def _tsm_grads(record: _PairRecord, d_block, episode, slices, d_embeds):
    q_vid = episode.queries[record.query_index].video_id
    ref_vid = episode.sample_sets[record.class_index][record.shot_index]
    for col, (t, vec) in enumerate(zip(record.tsms, record.vectors)):
        d_matrix = tsmod.maxpool_backward(vec, t.matrix.shape, d_block[:, col])
        d_q, d_v = tsmod.tsm_backward(t, d_matrix)
        d_embeds[t.stream][slices[q_vid]] += d_q
        d_embeds[t.stream][slices[ref_vid]] += d_v
