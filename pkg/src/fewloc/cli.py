"""Command-line interface: synth, train, eval, localize, gradcheck, inspect.

Exit codes: 0 success, 1 validation/usage error, 2 runtime error.
Diagnostics go to stderr; results go to files and stdout. Every command
echoes its resolved configuration to stderr so runs are reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluate, locclass, trainer, viz
from .dataio import (
    FeatureStore,
    FeatureFormatError,
    ManifestError,
    PredictionRow,
    SyntheticSpec,
    SyntheticSpecError,
    gen_synthetic,
    load_manifest,
)
from .episodes import Episode, EpisodeError, QueryItem
from .model import FewShotModel, run_episode
from .numkit import GradCheckProtocolError, NumericsError, RngStream, grad_check
from .trainer import TrainConfig

VALIDATION_ERRORS = (
    ManifestError,
    SyntheticSpecError,
    FeatureFormatError,
    EpisodeError,
    FileNotFoundError,
    locclass.ThresholdError,
    evaluate.ProtocolError,
    ValueError,
)
RUNTIME_ERRORS = (NumericsError, GradCheckProtocolError)

GRADCHECK_TOLERANCE = 1e-4


def _default_seed() -> int:
    return int(os.environ.get("FSL_SEED", "0"))


def _echo_config(name: str, args: argparse.Namespace) -> None:
    for key in sorted(vars(args)):
        if key in ("func", "command"):
            continue
        print(f"# {name} {key}={getattr(args, key)}", file=sys.stderr)


def _load_manifest_and_store(args):
    manifest = load_manifest(args.manifest)
    features = args.features if args.features else Path(args.manifest).parent
    return manifest, FeatureStore(features)


def _threshold_policy(args) -> locclass.ThresholdPolicy:
    return locclass.ThresholdPolicy(kind=args.policy, delta=args.fixed_delta)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    raw = json.loads(Path(args.spec).read_text())
    spec = SyntheticSpec.from_json(raw)
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    ds = gen_synthetic(spec, args.out)
    print(f"wrote {len(ds.feature_paths)} feature files and manifest to {ds.out_dir}")
    print(str(ds.out_dir / "manifest.json"))
    return 0


def _train_overrides(args) -> dict:
    keys = [f.name for f in TrainConfig.__dataclass_fields__.values()]
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def cmd_train(args) -> int:
    manifest, store = _load_manifest_and_store(args)
    overrides = _train_overrides(args)
    if args.config:
        cfg = TrainConfig.from_file(args.config, overrides)
    else:
        cfg = TrainConfig.from_dict(overrides)
    out_dir = Path(args.out)

    def progress(ep, loss):
        if (ep + 1) % args.log_every == 0:
            print(f"episode {ep + 1}/{cfg.episodes} loss={loss:.6f}", file=sys.stderr)

    result = trainer.train(manifest, store, cfg, out_dir=out_dir, progress=progress)
    cfg.to_file(out_dir / "train_config.cfg")
    print(str(result.checkpoint_path))
    print(str(result.log_path))
    return 0


def _resolve_model(args, manifest) -> FewShotModel:
    if args.no_learn:
        cfg = TrainConfig(
            metrics=args.metrics if args.metrics else ("dot",),
            pooling=args.pooling if args.pooling else "weighted",
        )
        return trainer.no_learn_forward(manifest, cfg)
    if not args.checkpoint:
        raise ValueError("either --checkpoint or --no-learn is required")
    return FewShotModel.load(args.checkpoint)


def cmd_eval(args) -> int:
    manifest, store = _load_manifest_and_store(args)
    model = _resolve_model(args, manifest)
    cfg = evaluate.ProtocolConfig(
        ways=args.ways,
        shots=args.shots,
        queries_per_class=args.queries_per_class,
        episodes=args.episodes,
        repetitions=args.repetitions,
        seed=args.seed if args.seed is not None else _default_seed(),
        threshold=_threshold_policy(args),
        aggregation=args.aggregation,
        multiply_class_score=args.multiply_class_score,
        workers=args.workers,
    )
    report, rows = evaluate.run_protocol(manifest, store, model, cfg)
    for line in report.warnings:
        print(f"warning: {line}", file=sys.stderr)
    print(report.summary_text(), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.to_csv_text())
        fps = {v.video_id: v.fps for v in manifest.videos}
        dataio.write_predictions(out / "predictions.csv", rows, set(manifest.classes), fps)
        print(str(out / "metrics.csv"))
        print(str(out / "predictions.csv"))
    return 0


def _support_episode(manifest, query_id: str, support_ids: list) -> Episode:
    """One inference episode built from explicit support videos."""
    class_order = []
    shots_by_class = {}
    for vid in support_ids:
        record = manifest.video(vid)
        if not record.trimmed:
            raise ValueError(f"support video {vid!r} is not trimmed")
        cid = record.labels[0]
        if cid not in class_order:
            class_order.append(cid)
        shots_by_class.setdefault(cid, []).append(vid)
    counts = {len(v) for v in shots_by_class.values()}
    if len(counts) != 1:
        raise ValueError(f"support set is unbalanced across classes: { {c: len(v) for c, v in shots_by_class.items()} }")
    query = manifest.video(query_id)
    labels = np.array([float(c in query.labels) for c in class_order])
    if labels.sum() == 0:
        labels = np.ones(len(class_order))  # unknown query: uniform target, loss is reported only
    return Episode(
        class_ids=tuple(class_order),
        sample_sets=tuple(tuple(shots_by_class[c]) for c in class_order),
        queries=(QueryItem(video_id=query_id, labels=labels),),
        split="test",
    )


def cmd_localize(args) -> int:
    manifest, store = _load_manifest_and_store(args)
    model = _resolve_model(args, manifest)
    if args.video not in {v.video_id for v in manifest.videos}:
        raise ManifestError(f"unknown video id {args.video!r}")
    support = [s for s in args.support.split(",") if s]
    episode = _support_episode(manifest, args.video, support)
    run = run_episode(model, episode, store.load, training=False)
    q = run.queries[0]
    policy = _threshold_policy(args)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    class_names = [manifest.classes[c] for c in episode.class_ids]
    deltas = []
    segments = []
    rows = []
    for c, cid in enumerate(episode.class_ids):
        attn = q.raw_attn[:, c]
        ref_len = (
            float(np.mean(run.ref_snippet_counts[c]))
            if policy.kind == "length_matched"
            else None
        )
        delta, fell_back = locclass.resolve_threshold(attn, policy, ref_len)
        if fell_back:
            print(f"warning: class {cid} fell back to midrange threshold", file=sys.stderr)
        deltas.append(delta)
        preds = locclass.localize(attn, delta, c)
        segments.append([(p.start, p.end) for p in preds])
        for p in preds:
            score = p.score * float(q.scores[c]) if args.multiply_class_score else p.score
            rows.append(PredictionRow(args.video, cid, p.start, p.end, score))

    fps = {v.video_id: v.fps for v in manifest.videos}
    dataio.write_predictions(out / "predictions.csv", rows, set(manifest.classes), fps)
    np.savetxt(out / "attention_raw.csv", q.raw_attn, delimiter=",", fmt="%.9e",
               header=",".join(class_names), comments="")
    np.savetxt(out / "attention_norm.csv", q.norm_attn, delimiter=",", fmt="%.9e",
               header=",".join(class_names), comments="")
    gt = [
        (episode.class_ids.index(cid), s, e)
        for cid, s, e in manifest.video(args.video).gt_in_snippets()
        if cid in episode.class_ids
    ] if manifest.video(args.video).gt_segments else None
    svg = viz.render_localization_svg(args.video, class_names, q.raw_attn, deltas, segments, gt)
    (out / "attention.svg").write_text(svg)
    if args.dump_tsm:
        _dump_tsms(model, episode, store, out)
    print(str(out / "predictions.csv"))
    print(str(out / "attention.svg"))
    for c, cid in enumerate(episode.class_ids):
        print(f"class {cid} ({class_names[c]}): score={q.scores[c]:.4f} "
              f"delta={deltas[c]:.4f} segments={segments[c]}")
    return 0


def _dump_tsms(model, episode, store, out: Path) -> None:
    from .dataio import STREAMS
    from .encoder import encode_forward
    from .tsm import compute_tsm

    def embeds(video_id):
        feats = store.load(video_id)
        if not model.config.use_encoder:
            return {s: feats.stream(s) for s in STREAMS}
        return {
            s: encode_forward(model.encoder, feats.stream(s), s, training=False)[0]
            for s in STREAMS
        }

    q_emb = embeds(episode.queries[0].video_id)
    for c, cid in enumerate(episode.class_ids):
        for k, ref in enumerate(episode.sample_sets[c]):
            r_emb = embeds(ref)
            for metric, stream in model.channels():
                t = compute_tsm(q_emb[stream], r_emb[stream], metric, stream, c)
                name = f"tsm_c{cid}_k{k}_{metric.value}_{stream.name.lower()}.csv"
                np.savetxt(out / name, t.matrix, delimiter=",", fmt="%.9e")


def cmd_gradcheck(args) -> int:
    from . import encoder as enc, tcam
    from .dataio import StreamKind
    from .episodes import EpisodeConfig, sample_train_episode
    from .model import ModelConfig

    seed = args.seed if args.seed is not None else _default_seed()
    rng = RngStream(seed, "gradcheck-cli")
    coords = args.coords
    failures = []

    def report(name, err):
        status = "ok" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:24s} max_rel_err={err:.3e}  {status}")
        if err >= GRADCHECK_TOLERANCE:
            failures.append(name)

    # encoder head
    params = enc.init_encoder(rng.substream("enc"))
    x = rng.standard_normal((7, dataio.FEATURE_DIM))
    target = rng.standard_normal((7, enc.EMBED_DIM))

    def enc_loss():
        y, cache = enc.encode_forward(params, x, StreamKind.RGB, training=True,
                                      rng=RngStream(seed, "enc-mask"), dropout_rate=0.5)
        enc.encode_backward(params, cache, target)
        return float((y * target).sum())

    report("encoder", grad_check(enc_loss, params.stream(StreamKind.RGB).tensors(),
                                 coords_per_tensor=coords, rng=rng.substream("c-enc")))

    # attention generator
    gparams = tcam.init_generator(rng.substream("gen"))
    channels = rng.standard_normal((40, 4)) * 2.0 + 1.0
    upstream = rng.standard_normal(40)

    def gen_loss():
        attn, cache = tcam.attention_forward(channels, gparams, training=True)
        tcam.attention_backward(gparams, cache, upstream)
        return float((attn * upstream).sum())

    report("attention-generator", grad_check(gen_loss, gparams.tensors(),
                                             coords_per_tensor=coords, rng=rng.substream("c-gen")))

    # full model on a toy episode
    spec = SyntheticSpec(class_count=5, videos_per_class=2, snippets_min=5, snippets_max=8,
                         action_len_min=2, action_len_max=3, separation=30.0, noise=0.3,
                         seed=21)
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        ds = gen_synthetic(spec, tmp)
        store = FeatureStore(tmp)
        feats = {v.video_id: store.load(v.video_id) for v in ds.manifest.videos}
        model = FewShotModel.create(ModelConfig(), RngStream(6, "gc2"))
        episode = sample_train_episode(
            ds.manifest, EpisodeConfig(ways=3, shots=1, queries_per_class=1), RngStream(6, "ep")
        )
        first = [True]

        def full_loss():
            bp = first[0]
            first[0] = False
            return run_episode(model, episode, feats.__getitem__, training=True,
                               rng=RngStream(99, "frozen"), update_bn=False, backprop=bp).loss

        report("full-model", grad_check(full_loss, model.tensors(),
                                        coords_per_tensor=coords, rng=rng.substream("c-full")))

    if failures:
        raise NumericsError(f"gradient check failed for: {', '.join(failures)}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    head = path.read_bytes()[:4] if path.is_file() else b""
    if head == dataio.FEATURE_MAGIC:
        feats = dataio.load_features(path, path.stem)
        print(f"feature file: {path.name}")
        for kind in dataio.STREAMS:
            m = feats.stream(kind)
            print(f"  {kind.name.lower():5s} {m.shape[0]} x {m.shape[1]}  "
                  f"mean={m.mean():.4f} std={m.std():.4f}")
        return 0
    if head == dataio.TENSOR_MAGIC:
        tensors = dataio.read_tensor_container(path)
        print(f"tensor container: {path.name} ({len(tensors)} tensors)")
        for name, arr in tensors.items():
            print(f"  {name:28s} {'x'.join(map(str, arr.shape)):12s} "
                  f"|mean|={np.abs(arr).mean():.6f}")
        return 0
    if path.suffix == ".json":
        manifest = load_manifest(path)
        trimmed = sum(v.trimmed for v in manifest.videos)
        print(f"manifest: {path.name}")
        print(f"  classes: {len(manifest.classes)} "
              f"(train {len(manifest.train_classes)} / test {len(manifest.test_classes)})")
        print(f"  videos: {len(manifest.videos)} ({trimmed} trimmed, "
              f"{len(manifest.videos) - trimmed} untrimmed)")
        return 0
    if path.suffix in (".csv", ".cfg"):
        text = path.read_text().splitlines()
        print(f"text file: {path.name} ({len(text)} lines)")
        for line in text[:5]:
            print(f"  {line}")
        return 0
    raise ValueError(f"unrecognized file type: {path}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewloc",
        description="Weakly-supervised few-shot temporal action localization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON file of synthetic spec fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", default=None, help="feature dir (default: manifest dir)")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=100)
    for name, flag in (
        ("episodes", "--episodes"), ("ways", "--ways"), ("shots", "--shots"),
        ("queries_per_class", "--queries-per-class"), ("learning_rate", "--learning-rate"),
        ("lr_decay_factor", "--lr-decay-factor"), ("lr_decay_episode", "--lr-decay-episode"),
        ("weight_decay", "--weight-decay"), ("dropout", "--dropout"), ("seed", "--seed"),
        ("learn_phi", "--learn-phi"), ("learn_psi", "--learn-psi"),
        ("metrics", "--metrics"), ("pooling", "--pooling"),
        ("checkpoint_interval", "--checkpoint-interval"),
    ):
        p.add_argument(flag, dest=name, default=None)
    p.set_defaults(func=cmd_train)

    def eval_like(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--features", default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--no-learn", action="store_true",
                       help="bypass the encoder/generator (raw-feature mode)")
        p.add_argument("--metrics", type=lambda s: tuple(s.split(",")), default=None,
                       help="similarity metrics for --no-learn (e.g. dot or cosine,dot)")
        p.add_argument("--pooling", choices=("weighted", "average"), default=None)
        p.add_argument("--policy", choices=("midrange", "length_matched", "fixed"),
                       default="midrange")
        p.add_argument("--fixed-delta", type=float, default=0.0)
        p.add_argument("--multiply-class-score", action="store_true")

    p = sub.add_parser("eval", help="run the few-shot testing protocol")
    eval_like(p)
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--queries-per-class", dest="queries_per_class", type=int, default=1)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--aggregation", choices=("pooled", "per_episode"), default="pooled")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1, help="parallel episode fan-out")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("localize", help="localize one query video against a support set")
    eval_like(p)
    p.add_argument("--video", required=True)
    p.add_argument("--support", required=True, help="comma-separated trimmed video ids")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-tsm", action="store_true")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--coords", type=int, default=200, help="coordinates sampled per tensor")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="describe a feature/checkpoint/manifest file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    _echo_config(args.command, args)
    try:
        return args.func(args)
    except RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
