"""Episodic training loop: sample an episode, run the full forward/backward,
take one Adam step, following the halve-once learning-rate schedule. Also
builds the no-learn model views used by the ablation modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dataio import DatasetManifest, FeatureStore
from .episodes import EpisodeConfig, sample_train_episode
from .model import FewShotModel, ModelConfig, run_episode
from .numkit import AdamConfig, NumericsError, RngStream, adam_step
from .tsm import SimilarityMetric

_METRIC_NAMES = {m.value: m for m in SimilarityMetric}


@dataclass
class TrainConfig:
    episodes: int = 10000
    ways: int = 5
    shots: int = 1
    queries_per_class: int = 6  # desk-scale default; full-data setups use 8
    learning_rate: float = 1e-4
    lr_decay_factor: float = 2.0
    lr_decay_episode: int = 1000
    weight_decay: float = 5e-4
    dropout: float = 0.5
    seed: int = 0
    learn_phi: bool = True
    learn_psi: bool = True
    metrics: tuple = ("cosine", "dot")
    pooling: str = "weighted"
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if isinstance(self.metrics, str):
            self.metrics = tuple(m for m in self.metrics.split(",") if m)
        self.metrics = tuple(self.metrics)
        if self.episodes < 1 or self.ways < 1 or self.shots < 1 or self.queries_per_class < 1:
            raise ValueError("episode counts must be positive")
        if self.learning_rate <= 0 or self.lr_decay_factor <= 0:
            raise ValueError("learning rate and decay factor must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not self.metrics:
            raise ValueError("at least one similarity metric must be enabled")
        for m in self.metrics:
            if m not in _METRIC_NAMES:
                raise ValueError(f"unknown similarity metric {m!r}")

    def metric_enums(self):
        return tuple(_METRIC_NAMES[m] for m in self.metrics)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            use_encoder=self.learn_phi,
            use_generator=self.learn_psi,
            metrics=self.metric_enums(),
            pooling=self.pooling,
            dropout_rate=self.dropout,
        )

    # -- key=value config files ---------------------------------------------

    def to_file(self, path) -> None:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "metrics":
                value = ",".join(value)
            lines.append(f"{f.name}={value}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        raw = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
        if overrides:
            raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            value = raw[f.name]
            if isinstance(value, str):
                if f.type in ("int", int):
                    value = int(value)
                elif f.type in ("float", float):
                    value = float(value)
                elif f.type in ("bool", bool):
                    value = value.lower() in ("1", "true", "yes")
            kwargs[f.name] = value
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass
class TrainResult:
    model: FewShotModel
    checkpoint_path: Path | None
    log_path: Path | None
    losses: np.ndarray
    top1_flags: np.ndarray


def no_learn_forward(manifest: DatasetManifest, cfg: TrainConfig) -> FewShotModel:
    """Model view with the encoder bypassed (raw features feed the similarity
    matrices) and the attention generator replaced by the unweighted mean of
    the enabled similarity vectors."""
    manifest.validate()
    config = ModelConfig(
        use_encoder=False,
        use_generator=False,
        metrics=cfg.metric_enums(),
        pooling=cfg.pooling,
        dropout_rate=cfg.dropout,
    )
    return FewShotModel(config)


def train(
    manifest: DatasetManifest,
    store: FeatureStore,
    cfg: TrainConfig,
    out_dir=None,
    progress=None,
) -> TrainResult:
    """Run the episodic loop; writes checkpoints and a training-log CSV when
    out_dir is given. The learning rate halves once, at the configured
    episode boundary."""
    manifest.validate()
    rng = RngStream(cfg.seed, "train")
    model = FewShotModel.create(cfg.model_config(), rng.substream("init"))
    tensors = model.tensors()
    adam = AdamConfig(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    ecfg = EpisodeConfig(ways=cfg.ways, shots=cfg.shots, queries_per_class=cfg.queries_per_class)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    losses = np.zeros(cfg.episodes)
    top1 = np.zeros(cfg.episodes)
    decayed = cfg.learning_rate / cfg.lr_decay_factor
    for ep in range(cfg.episodes):
        adam.learning_rate = cfg.learning_rate if ep < cfg.lr_decay_episode else decayed
        ep_rng = rng.substream(f"episode/{ep}")
        episode = sample_train_episode(manifest, ecfg, ep_rng.substream("sample"))
        run = run_episode(
            model, episode, store.load,
            training=True, rng=ep_rng, update_bn=True, backprop=True,
        )
        if not np.isfinite(run.loss):
            raise NumericsError(
                f"non-finite loss at episode {ep} (seed {cfg.seed}); "
                f"rerun with RngStream({cfg.seed}, 'train').substream('episode/{ep}')"
            )
        adam_step(tensors, adam)
        losses[ep] = run.loss
        flags = [
            float(q.labels[int(np.argmax(q.scores))] > 0) for q in run.queries
        ]
        top1[ep] = float(np.mean(flags))
        if progress is not None:
            progress(ep, run.loss)
        if out_dir is not None and cfg.checkpoint_interval > 0 and (ep + 1) % cfg.checkpoint_interval == 0:
            model.save(out_dir / f"checkpoint_ep{ep + 1:06d}.fslp")

    checkpoint_path = log_path = None
    if out_dir is not None:
        checkpoint_path = out_dir / "checkpoint_final.fslp"
        model.save(checkpoint_path)
        log_path = out_dir / "training_log.csv"
        lines = ["episode,loss,top1"]
        for ep in range(cfg.episodes):
            lines.append(f"{ep},{losses[ep]:.6f},{top1[ep]:.6f}")
        log_path.write_text("\n".join(lines) + "\n")
    return TrainResult(model=model, checkpoint_path=checkpoint_path,
                       log_path=log_path, losses=losses, top1_flags=top1)
