"""Meta-training and evaluation loops, checkpointing, sweeps and ablations."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, SamplingPlan
from .core import forward_episode
from .data import (DatasetManifest, ExemplarImage, generate_glyph_dataset,
                   ingest_image_folder, load_manifest, split_classes)
from .episodes import Episode, episode_stream, to_batch
from .errors import ConfigError, DataError, NumericAbort
from .exemplars import (estimate_exemplars, penultimate_features,
                        pretrain_encoder_nonepisodic, save_exemplars,
                        select_support_exemplar)
from .metrics import EvalReport, auroc, macro_f1, openness, write_report_table
from .nets import ReFOCSNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

# one-axis variants of the full model; values are dotted config overrides
VARIANTS: dict[str, dict] = {
    "full": {},
    "ae": {"model.encoder": "ae"},
    "mean_prototype": {"method.prototype_mode": "mean"},
    "no_modulation": {"method.modulation": False},
    "protoC_nd": {"method.exemplar_mode": "none", "method.prototype_mode": "mean",
                  "method.use_recon_errors": False, "method.modulation": False},
    "no_embedding": {"method.use_embedding": False},
    "no_clf": {"method.use_clf": False},
    "self_reconstruction": {"method.exemplar_mode": "self_reconstruction"},
    "cosine": {"method.classifier_metric": "cosine"},
    "euclidean": {"method.classifier_metric": "euclidean"},
    "softmax_threshold": {"loss.lambda_bce": 0.0, "method.open_score": "softmax"},
    "exemplar_cosine": {"method.exemplar_distance": "cosine"},
    "kappa_cosine": {"method.kappa_distance": "cosine"},
    "both_cosine": {"method.exemplar_distance": "cosine", "method.kappa_distance": "cosine"},
    "two_stage": {"train.regime": "two_stage"},
}
DEFAULT_ABLATIONS = ("full", "ae", "mean_prototype", "no_modulation", "protoC_nd",
                     "no_embedding", "no_clf", "self_reconstruction")


def _derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def _dtype(config: RunConfig):
    return torch.float64 if config.train.dtype == "float64" else torch.float32


@dataclass
class TrainState:
    net: ReFOCSNet
    optimizer: torch.optim.Optimizer
    episode: int = 0
    history: list[dict] = field(default_factory=list)
    config_hash: str = ""


def init_state(config: RunConfig, pretrained_encoder=None) -> TrainState:
    with torch.random.fork_rng():
        torch.manual_seed(config.train.seed)
        net = ReFOCSNet(config.arch()).to(_dtype(config))
    if config.model.init_encoder_path:
        try:
            weights = torch.load(config.model.init_encoder_path, map_location="cpu")
        except FileNotFoundError:
            raise DataError(f"encoder weights {config.model.init_encoder_path} not found") from None
        net.encoder.load_state_dict(weights)
    if pretrained_encoder is not None and config.train.init_from_pretrained:
        net.encoder.load_state_dict(pretrained_encoder.state_dict())
    t = config.train
    opt = torch.optim.Adam(net.parameters(), lr=t.lr, betas=(t.beta1, t.beta2), eps=t.adam_eps)
    return TrainState(net, opt, config_hash=config.config_hash())


def learning_rate(config: RunConfig, episode_index: int) -> float:
    drop = config.train.lr_drop_every
    if drop <= 0:
        return config.train.lr
    return config.train.lr * 0.1 ** (episode_index // drop)


def _stage_plan(config: RunConfig, index: int):
    """Loss weights and the parameter groups left frozen for this episode."""
    l = config.loss
    if config.train.regime == "two_stage":
        if index < config.stage1_episodes:
            return (0.0, l.lambda_ce, 0.0), ("decoder", "detector")
        return (l.lambda_vae, 0.0, l.lambda_bce), ("encoder", "tau")
    return (l.lambda_vae, l.lambda_ce, l.lambda_bce), ()


def train_episode(state: TrainState, episode: Episode, config: RunConfig,
                  index: int | None = None) -> tuple[TrainState, dict]:
    """One Adam step on the aggregate loss of ``episode``."""
    idx = state.episode if index is None else index
    lr = learning_rate(config, idx)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    lambdas, frozen = _stage_plan(config, idx)
    net = state.net
    net.train()
    batch = to_batch(episode, dtype=_dtype(config))
    gen = torch.Generator().manual_seed(_derive_seed(config.train.seed, idx, 1))
    _, losses = forward_episode(net, batch, config.method, config.loss,
                                encoder_kind=config.model.encoder, generator=gen,
                                lambdas=lambdas)
    values = losses.as_floats()
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericAbort(f"non-finite loss at episode {idx}: {values}", values)
    state.optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    groups = net.parameter_groups()
    for name in frozen:
        for p in groups[name]:
            p.grad = None
    state.optimizer.step()
    state.episode = idx + 1
    record = {"episode": idx, **values, "lr": lr}
    state.history.append(record)
    return state, record


# --- checkpoints -------------------------------------------------------------

def save_train_state(path, state: TrainState, config: RunConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, state.net, {
        "optimizer": state.optimizer.state_dict(),
        "episode": state.episode,
        "history": state.history,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "rng": {"train_seed": config.train.seed},
    })
    return path


def load_train_state(path) -> tuple[TrainState, RunConfig]:
    try:
        net, payload = load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    config = RunConfig.from_dict(payload["config"])
    t = config.train
    opt = torch.optim.Adam(net.parameters(), lr=t.lr, betas=(t.beta1, t.beta2), eps=t.adam_eps)
    opt.load_state_dict(payload["optimizer"])
    state = TrainState(net, opt, payload["episode"], list(payload["history"]),
                       payload["config_hash"])
    return state, config


# --- data preparation --------------------------------------------------------

def resolve_datasets(config: RunConfig):
    """``(train, test, val)`` manifests described by ``config.data``; val may be None."""
    d = config.data
    n = config.episodes.n_way
    val = None
    if d.source == "glyph":
        full = generate_glyph_dataset(d.num_classes, d.samples_per_class, tuple(d.image_size), d.seed)
        train, test = split_classes(full, d.train_fraction, d.seed, n_way=n)
        if d.val_classes:
            keep = train.class_ids
            if len(keep) - d.val_classes < n + 1:
                raise DataError("not enough training classes left after the validation split")
            val = train.subset(keep[-d.val_classes:], name=f"{full.name}-val")
            train = train.subset(keep[:-d.val_classes], name=train.name)
        return train, test, val
    if not d.train_path:
        raise ConfigError("data.train_path is required for folder/manifest sources")
    load = ((lambda p: ingest_image_folder(p, tuple(d.image_size))) if d.source == "folder"
            else load_manifest)
    train = load(d.train_path)
    if d.test_path:
        test = load(d.test_path)
    else:
        train, test = split_classes(train, d.train_fraction, d.seed, n_way=n)
    if d.val_path:
        val = load(d.val_path)
    return train, test, val


def prepare_train_manifest(manifest: DatasetManifest, config: RunConfig, output_dir=None):
    """Attach the exemplars training needs; returns ``(manifest, pretrained_encoder)``."""
    mode = config.method.exemplar_mode
    if mode == "none":
        return manifest, None
    if mode == "canonical" and not manifest.has_exemplars():
        raise DataError(f"manifest {manifest.name} lacks canonical exemplars for some classes")
    if mode == "canonical" or (mode == "self_reconstruction" and manifest.has_exemplars()):
        return manifest, None
    if manifest.has_exemplars() and all(e.provenance == "estimated"
                                        for e in manifest.exemplars.values()):
        return manifest, None
    enc, history = pretrain_encoder_nonepisodic(
        manifest, config.train.pretrain_epochs, config.train.pretrain_lr,
        config.train.seed, arch=config.arch())
    log.info("pre-training loss history: %s", history)
    exemplars = estimate_exemplars(enc, manifest, config.method.exemplar_distance)
    if output_dir is not None:
        save_exemplars(exemplars, Path(output_dir) / "exemplars")
    return manifest.with_exemplars(exemplars), enc


# --- training loop -----------------------------------------------------------

def run_training(train_manifest: DatasetManifest, config: RunConfig, output_dir=None,
                 val_manifest: DatasetManifest | None = None, state: TrainState | None = None,
                 stop_at: int | None = None) -> TrainState:
    """Meta-train for ``episodes_train`` episodes (or until ``stop_at``).

    Passing a ``state`` loaded from a checkpoint resumes exactly: episode
    content and sampling noise depend only on the seed and episode index.
    """
    config.validate()
    out = Path(output_dir) if output_dir is not None else None
    train_manifest, pre_enc = prepare_train_manifest(train_manifest, config, out)
    if state is None:
        state = init_state(config, pre_enc)
    total = config.episodes.episodes_train
    end = total if stop_at is None else min(stop_at, total)
    stream = episode_stream(train_manifest, config.episodes, total, config.train.seed)

    metrics_fh = val_fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
        for rec in state.history:
            metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if val_manifest is not None:
            val_fh = open(out / "validation.jsonl", "a")
    try:
        for idx in range(state.episode, end):
            try:
                _, rec = train_episode(state, stream[idx], config, index=idx)
            except NumericAbort:
                if out is not None:
                    save_train_state(out / "checkpoints" / "abort.pt", state, config)
                raise
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            done = idx + 1
            if out is not None and config.train.checkpoint_every and done % config.train.checkpoint_every == 0:
                save_train_state(out / "checkpoints" / f"episode-{done:06d}.pt", state, config)
            if (val_manifest is not None and config.train.validate_every
                    and done % config.train.validate_every == 0):
                rep = evaluate(state, val_manifest, config, n_episodes=config.train.validation_episodes)
                vrec = {"episode": done, "accuracy": rep.accuracy_mean, "auroc": rep.auroc_mean}
                log.info("validation %s", vrec)
                if val_fh is not None:
                    val_fh.write(json.dumps(vrec, sort_keys=True) + "\n")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
        if val_fh is not None:
            val_fh.close()
    if out is not None:
        save_train_state(out / "checkpoints" / "last.pt", state, config)
    return state


# --- evaluation --------------------------------------------------------------

def attach_test_exemplars(net: ReFOCSNet, episode: Episode, config: RunConfig) -> Episode:
    """Exemplars for a test episode: canonical ones when the method uses them,
    otherwise the support sample nearest its class centroid in feature space."""
    mode = config.method.exemplar_mode
    n = episode.n_way
    if mode == "none":
        return episode
    if mode in ("canonical", "self_reconstruction") and len(episode.exemplars) == n:
        return episode
    if mode == "canonical":
        raise DataError("test manifest lacks canonical exemplars for a support class")
    chosen = {}
    for slot in range(n):
        imgs = episode.support[slot]
        feats = penultimate_features(net.encoder, np.stack([im.pixels for im in imgs]))
        pick = imgs[select_support_exemplar(feats, config.method.exemplar_distance)]
        chosen[slot] = ExemplarImage(pick.pixels, pick.class_id, "estimated", pick.sample_id)
    return episode.with_exemplars(chosen)


@torch.no_grad()
def predict_episode(net: ReFOCSNet, episode: Episode, config: RunConfig):
    """Deterministic forward; returns ``(class_probs, open_score)`` as numpy arrays."""
    net.eval()
    episode = attach_test_exemplars(net, episode, config)
    batch = to_batch(episode, dtype=next(net.parameters()).dtype)
    outputs, _ = forward_episode(net, batch, config.method, config.loss,
                                 encoder_kind=config.model.encoder, deterministic=True)
    probs = outputs.class_probs.double().numpy()
    if config.method.open_score == "softmax":
        score = 1.0 - probs.max(axis=1)
    else:
        score = outputs.openness_prob.double().numpy()
    return probs, score


def _net(state_or_net) -> ReFOCSNet:
    return state_or_net.net if isinstance(state_or_net, TrainState) else state_or_net


def evaluate(state, test_manifest: DatasetManifest, config: RunConfig,
             n_episodes: int | None = None, plan: SamplingPlan | None = None,
             seed: int | None = None) -> EvalReport:
    """Closed-set accuracy and open-set AUROC averaged over test episodes,
    each with equally many in- and out-of-distribution queries."""
    net = _net(state)
    plan = plan or config.episodes
    count = n_episodes or plan.episodes_test
    stream = episode_stream(test_manifest, plan, count, config.eval.seed if seed is None else seed)
    accs, aucs = [], []
    for i in range(count):
        ep = stream[i].balanced()
        probs, score = predict_episode(net, ep, config)
        n_in = len(ep.queries_in)
        truth = np.array([s for _, s in ep.queries_in])
        accs.append(float(np.mean(probs[:n_in].argmax(1) == truth)))
        aucs.append(auroc(score, ep.openness_labels))
    return EvalReport.from_episodes(accs, aucs, config.config_hash(), config.method.open_score)


def f1_openness_sweep(state, manifest: DatasetManifest, config: RunConfig,
                      n_target_values=None, n_episodes: int | None = None) -> dict[str, float]:
    """Macro-F1 over N known classes plus an "open" class at several openness levels.

    A query is called open when its detector probability is at least 0.5,
    otherwise it takes the arg-max support class.
    """
    net = _net(state)
    n = config.episodes.n_way
    targets = list(n_target_values or config.eval.n_target_values)
    if len(manifest.class_ids) < n + max(targets):
        raise DataError(
            f"openness sweep needs {n + max(targets)} classes, manifest has {len(manifest.class_ids)}")
    count = n_episodes or config.eval.sweep_episodes
    result = {}
    for nt in targets:
        plan = SamplingPlan(**{**config.to_dict()["episodes"], "n_open_classes": nt})
        stream = episode_stream(manifest, plan, count, _derive_seed(config.eval.seed, nt))
        f1s = []
        for i in range(count):
            ep = stream[i].balanced()
            probs, score = predict_episode(net, ep, config)
            pred = np.where(score >= 0.5, n, probs.argmax(1))
            truth = np.r_[[s for _, s in ep.queries_in], np.full(len(ep.queries_out), n)]
            f1s.append(macro_f1(truth, pred, labels=range(n + 1)))
        result[f"{100 * openness(n, n, nt):.1f}"] = float(np.mean(f1s))
    return result


def variant_config(base: RunConfig, name: str) -> RunConfig:
    if name not in VARIANTS:
        raise ConfigError(f"unknown ablation variant {name!r}; known: {', '.join(VARIANTS)}")
    return base.replace(**VARIANTS[name])


def run_ablation_matrix(base_config: RunConfig, variants=DEFAULT_ABLATIONS,
                        train_manifest: DatasetManifest | None = None,
                        test_manifest: DatasetManifest | None = None,
                        output_dir=None) -> list[tuple[str, EvalReport]]:
    """Train and evaluate each one-axis variant with identical seeds."""
    if train_manifest is None or test_manifest is None:
        train_manifest, test_manifest, _ = resolve_datasets(base_config)
    rows = []
    for name in variants:
        cfg = variant_config(base_config, name)
        sub = Path(output_dir) / name if output_dir is not None else None
        state = run_training(train_manifest, cfg, sub)
        report = evaluate(state, test_manifest, cfg)
        log.info("%s: %s", name, report.summary())
        if sub is not None:
            (sub / "eval-report.json").write_text(report.to_json())
        rows.append((name, report))
    if output_dir is not None:
        write_report_table(Path(output_dir) / "tables" / "ablation.csv", rows)
    return rows
