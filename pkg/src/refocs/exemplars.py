"""Exemplar estimation for classes without canonical exemplars.

The encoder is first trained as an ordinary many-way classifier on the base
set. Each class's exemplar is then the sample whose penultimate-layer feature
lies closest to the class centroid. At test time the same rule picks one of
the support samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .data import DatasetManifest, ExemplarImage
from .errors import DataError
from .nets import ArchConfig, Encoder


def _distances(features: np.ndarray, centroid: np.ndarray, distance: str) -> np.ndarray:
    if distance == "l2":
        return np.linalg.norm(features - centroid, axis=1)
    if distance == "cosine":
        fn = features / np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
        cn = centroid / max(np.linalg.norm(centroid), 1e-12)
        return 1.0 - fn @ cn
    raise ValueError(f"unknown exemplar distance {distance!r}")


def nearest_to_centroid(features, sample_ids=None, distance: str = "l2") -> int:
    """Index of the row closest to the mean row; ties go to the smallest sample id."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if len(f) == 0:
        raise DataError("cannot pick an exemplar from an empty class")
    d = _distances(f, f.mean(axis=0), distance)
    best = np.flatnonzero(d == d.min())
    if sample_ids is None or len(best) == 1:
        return int(best[0])
    return int(min(best, key=lambda i: sample_ids[i]))


def select_support_exemplar(support_features, distance: str = "l2") -> int:
    """Index of the support sample closest to the support centroid."""
    return nearest_to_centroid(support_features, distance=distance)


@dataclass
class FeatureBank:
    sample_ids: dict[int, list[str]]
    features: dict[int, np.ndarray]

    def centroid(self, class_id: int) -> np.ndarray:
        return self.features[class_id].mean(axis=0)


@torch.no_grad()
def penultimate_features(encoder: Encoder, pixels, batch_size: int = 256) -> np.ndarray:
    was_training = encoder.training
    encoder.eval()
    dtype = next(encoder.parameters()).dtype
    out = []
    for i in range(0, len(pixels), batch_size):
        x = torch.from_numpy(np.array(pixels[i:i + batch_size])).to(dtype)
        out.append(encoder.penultimate(x).double().numpy())
    encoder.train(was_training)
    return np.concatenate(out) if out else np.zeros((0, encoder.arch.feature_dim))


def build_feature_bank(encoder: Encoder, manifest: DatasetManifest) -> FeatureBank:
    feats = penultimate_features(encoder, manifest.pixels)
    ids, by_class = {}, {}
    for c, sids in manifest.samples.items():
        ids[c] = list(sids)
        by_class[c] = feats[manifest.rows(sids)]
    return FeatureBank(ids, by_class)


def estimate_exemplars(encoder: Encoder, manifest: DatasetManifest,
                       distance: str = "l2") -> dict[int, ExemplarImage]:
    bank = build_feature_bank(encoder, manifest)
    out = {}
    for c in manifest.class_ids:
        ids = bank.sample_ids[c]
        if not ids:
            raise DataError(f"class {c} has no samples")
        sid = ids[nearest_to_centroid(bank.features[c], ids, distance)]
        out[c] = ExemplarImage(manifest.pixels[manifest.row(sid)], c, "estimated", sid)
    return out


def pretrain_encoder_nonepisodic(manifest: DatasetManifest, epochs: int, lr: float, seed: int,
                                 arch: ArchConfig | None = None, encoder: Encoder | None = None,
                                 batch_size: int = 64):
    """Train the encoder as a plain classifier over every base class.

    A temporary linear head on the latent mean carries the cross-entropy and
    is thrown away afterwards. Returns ``(encoder, loss_history)`` where the
    history holds the full-pass loss before training and after each epoch.
    """
    classes = manifest.class_ids
    if len(classes) < 2:
        raise DataError("non-episodic pre-training needs at least 2 classes")
    if encoder is None and arch is None:
        raise ValueError("pass either an encoder or an architecture")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        encoder = encoder if encoder is not None else Encoder(arch)
        dtype = next(encoder.parameters()).dtype
        head = nn.Linear(encoder.arch.d_z, len(classes)).to(dtype)
    if epochs <= 0:
        return encoder, []

    index = {c: i for i, c in enumerate(classes)}
    x_all = torch.from_numpy(np.array(manifest.pixels)).to(dtype)
    y_all = torch.tensor([index[int(c)] for c in manifest.labels])
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    gen = torch.Generator().manual_seed(seed)

    def full_loss():
        with torch.no_grad():
            total = 0.0
            for i in range(0, len(x_all), 256):
                mu, _ = encoder(x_all[i:i + 256])
                total += float(F.cross_entropy(head(mu), y_all[i:i + 256], reduction="sum"))
        return total / len(x_all)

    history = [full_loss()]
    encoder.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x_all), generator=gen)
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            mu, _ = encoder(x_all[idx])
            loss = F.cross_entropy(head(mu), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        history.append(full_loss())
    return encoder, history


def save_exemplars(exemplars: dict[int, ExemplarImage], directory) -> Path:
    """Persist an ``exemplars.json`` index plus one PNG per class."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for c, ex in sorted(exemplars.items()):
        name = f"class_{c:04d}.png"
        img = (np.clip(ex.pixels.transpose(1, 2, 0), 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(img).save(directory / name)
        index[str(c)] = {"provenance": ex.provenance, "source": ex.source, "file": name}
    (directory / "exemplars.json").write_text(json.dumps(index, sort_keys=True, indent=1))
    return directory


def load_exemplars(manifest: DatasetManifest, directory) -> dict[int, ExemplarImage]:
    """Reload estimated exemplars; pixels come from the manifest's own samples."""
    index = json.loads((Path(directory) / "exemplars.json").read_text())
    out = {}
    for c, info in index.items():
        c = int(c)
        if c not in manifest.samples:
            raise DataError(f"exemplar index names unknown class {c}")
        sid = info["source"]
        out[c] = ExemplarImage(manifest.pixels[manifest.row(sid)], c, info["provenance"], sid)
    return out
