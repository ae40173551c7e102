"""Per-episode mathematics: VAE objective, exemplar-weighted prototypes,
temperature-scaled cosine classifier, embedding modulation, reconstruction
errors against support exemplars, the openness detector and the joint loss.

All functions work on torch tensors and are differentiable, so the training
loop and the finite-difference gradient checks share one code path.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossConfig, MethodConfig
from .episodes import EpisodeBatch
from .nets import ReFOCSNet, reparameterize

COS_EPS = 1e-12
MOD_EPS = 1e-6
PROB_EPS = 1e-12


def _prob_clamp(p):
    # 1 - 1e-12 rounds to 1 in float32, so widen the margin to the dtype's epsilon
    eps = max(PROB_EPS, torch.finfo(p.dtype).eps)
    return p.clamp(eps, 1 - eps)


def _binary_xent(p, t):
    """Elementwise binary cross-entropy; xlogy makes 0 * log(0) vanish."""
    p = _prob_clamp(p)
    return -(torch.xlogy(t, p) + torch.xlogy(1 - t, 1 - p))


def cosine_similarity(a, b):
    """Pairwise cosine between rows of ``a`` (..., d) and ``b`` (M, d), guarded at zero norm."""
    an = a / a.norm(dim=-1, keepdim=True).clamp_min(COS_EPS)
    bn = b / b.norm(dim=-1, keepdim=True).clamp_min(COS_EPS)
    return an @ bn.transpose(-1, -2)


def cosine_distance(a, b):
    return 1.0 - cosine_similarity(a, b)


def kl_divergence(mu, sigma):
    """KL(N(mu, sigma^2) || N(0, I)) summed over the last dimension."""
    var = sigma * sigma
    return 0.5 * (mu * mu + var - 1.0 - torch.log(var)).sum(-1)


def reconstruction_loss(t_hat, t, kind: str = "bce"):
    """Per-image reconstruction loss summed over all pixels and channels."""
    if t_hat.shape != t.shape:
        raise ValueError(f"reconstruction shape {tuple(t_hat.shape)} != target {tuple(t.shape)}")
    dims = tuple(range(-3, 0)) if t.dim() >= 3 else tuple(range(t.dim()))
    if kind == "bce":
        return _binary_xent(t_hat, t).sum(dims)
    if kind == "l2":
        return ((t_hat - t) ** 2).sum(dims)
    raise ValueError(f"unknown reconstruction kind {kind!r}")


def vae_loss(recon_terms, kl_terms, roles=None):
    """Mean of per-sample (reconstruction + KL) over support and in-queries.

    ``roles`` optionally tags each sample; an ``"out"`` sample is a contract
    violation because open-set queries have no exemplar to reconstruct.
    """
    if roles is not None and any(r == "out" for r in roles):
        raise ValueError("out-of-distribution queries must not enter the VAE loss")
    total = recon_terms if kl_terms is None else recon_terms + kl_terms
    return total.mean()


@dataclass
class Prototypes:
    omega: torch.Tensor  # (N, d)
    weights: torch.Tensor  # (N, K)
    exemplar_embeddings: torch.Tensor | None  # (N, d)


def exemplar_weights(support_z, exemplar_z):
    """Softmax over the K shots of cos(z_k, z_t) for each class."""
    cos = (F.normalize(support_z, dim=-1, eps=COS_EPS)
           * F.normalize(exemplar_z, dim=-1, eps=COS_EPS).unsqueeze(1)).sum(-1)
    return torch.softmax(cos, dim=1)


def compute_prototypes(support_z, exemplar_z=None, mode: str = "weighted") -> Prototypes:
    """``support_z`` is (N, K, d); ``exemplar_z`` (N, d) is needed for weighted mode."""
    n, k, _ = support_z.shape
    if mode == "weighted":
        if exemplar_z is None:
            raise ValueError("weighted prototypes need exemplar embeddings")
        w = exemplar_weights(support_z, exemplar_z)
    elif mode == "mean":
        w = support_z.new_full((n, k), 1.0 / k)
    else:
        raise ValueError(f"unknown prototype mode {mode!r}")
    omega = (w.unsqueeze(-1) * support_z).sum(1)
    return Prototypes(omega, w, exemplar_z)


def classifier_logits(z_q, omega, tau, metric: str = "cosine"):
    if metric == "cosine":
        return tau * cosine_similarity(z_q, omega)
    if metric == "euclidean":
        return -tau * torch.cdist(z_q, omega) ** 2
    raise ValueError(f"unknown classifier metric {metric!r}")


def classify(z_q, prototypes: Prototypes | torch.Tensor, tau, metric: str = "cosine"):
    omega = prototypes.omega if isinstance(prototypes, Prototypes) else prototypes
    return torch.softmax(classifier_logits(z_q, omega, tau, metric), dim=-1)


def cross_entropy_loss(class_probs, true_slots):
    p = class_probs.gather(-1, true_slots.unsqueeze(-1)).squeeze(-1)
    return -torch.log(p.clamp_min(PROB_EPS)).mean()


def cross_entropy_from_logits(logits, true_slots):
    return F.cross_entropy(logits, true_slots)


def modulate(z_q, prototypes: Prototypes | torch.Tensor, distance: str = "l1"):
    """Divide each query embedding by its distance to the nearest prototype."""
    omega = prototypes.omega if isinstance(prototypes, Prototypes) else prototypes
    if distance == "l1":
        dist = (z_q.unsqueeze(1) - omega.unsqueeze(0)).abs().sum(-1)
    elif distance == "cosine":
        dist = cosine_distance(z_q, omega)
    else:
        raise ValueError(f"unknown modulation distance {distance!r}")
    kappa = dist.min(dim=-1).values
    return z_q / kappa.clamp_min(MOD_EPS).unsqueeze(-1), kappa


def recon_error_vector(t_hat, support_exemplars):
    """(Q, N) squared Frobenius distances between reconstructions and exemplars."""
    if t_hat.shape[1:] != support_exemplars.shape[1:]:
        raise ValueError("reconstruction and exemplar shapes differ")
    diff = t_hat.unsqueeze(1) - support_exemplars.unsqueeze(0)
    return (diff * diff).flatten(2).sum(-1)


def assemble_detector_input(class_probs, z_hat, recon_errors, use_clf=True,
                            use_embedding=True, use_recon_errors=True):
    """Concatenate ``[p, z_hat, D]`` keeping only the enabled blocks, in that order."""
    blocks = []
    if use_clf:
        blocks.append(class_probs)
    if use_embedding:
        blocks.append(z_hat)
    if use_recon_errors:
        if recon_errors is None:
            raise ValueError("reconstruction errors requested but not computed")
        blocks.append(recon_errors)
    if not blocks:
        raise ValueError("detector input is empty")
    return torch.cat(blocks, dim=-1)


def bce_openness_loss(p_open, y_open):
    """Binary cross-entropy where ``y = 1`` marks an out-of-distribution query
    and ``p_open`` is the predicted probability of being out-of-distribution."""
    return _binary_xent(p_open, y_open).mean()


def bce_openness_from_logits(logits, y_open):
    return F.binary_cross_entropy_with_logits(logits, y_open)


def aggregate_loss(l_vae, l_ce, l_bce, lambda_vae, lambda_ce, lambda_bce):
    return lambda_vae * l_vae + lambda_ce * l_ce + lambda_bce * l_bce


# --- episode forward ---------------------------------------------------------

@dataclass
class EpisodeOutputs:
    class_probs: torch.Tensor  # (Q, N)
    class_logits: torch.Tensor
    recon_errors: torch.Tensor | None  # (Q, N)
    modulated: torch.Tensor  # (Q, d)
    kappa: torch.Tensor  # (Q,)
    openness_logits: torch.Tensor  # (Q,)
    prototypes: Prototypes
    reconstructions: torch.Tensor | None  # (Q, C, H, W)
    z_query: torch.Tensor

    @property
    def openness_prob(self):
        return torch.sigmoid(self.openness_logits)


@dataclass
class EpisodeLosses:
    vae: torch.Tensor
    ce: torch.Tensor
    bce: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"L_VAE": float(self.vae.detach()), "L_CE": float(self.ce.detach()),
                "L_BCE": float(self.bce.detach()), "L": float(self.total.detach())}


def forward_episode(net: ReFOCSNet, batch: EpisodeBatch, method: MethodConfig,
                    loss_cfg: LossConfig, encoder_kind: str = "vae",
                    deterministic: bool = False, generator: torch.Generator | None = None,
                    lambdas: tuple[float, float, float] | None = None):
    """Run one episode through the model; returns ``(EpisodeOutputs, EpisodeLosses)``.

    Sampled latents are used for support and queries in training; with
    ``deterministic`` (or an autoencoder) every latent is the posterior mean.
    Exemplar embeddings always use the mean.
    """
    n, k = batch.n_way, batch.k_shot
    use_exemplars = method.exemplar_mode != "none"
    if use_exemplars and batch.exemplar_x is None:
        raise ValueError("episode has no exemplars attached for every support slot")

    parts = [batch.support_x, batch.query_x]
    if use_exemplars:
        parts.append(batch.exemplar_x)
    mu, sigma = net.encoder(torch.cat(parts))
    ns, nq = batch.support_x.shape[0], batch.query_x.shape[0]
    sample = not deterministic and encoder_kind == "vae"
    z, _ = reparameterize(mu[:ns + nq], sigma[:ns + nq], generator, deterministic=not sample)
    z_s, z_q = z[:ns], z[ns:]
    z_t = mu[ns + nq:] if use_exemplars else None

    protos = compute_prototypes(z_s.view(n, k, -1), z_t, method.prototype_mode)
    logits = classifier_logits(z_q, protos.omega, net.tau, method.classifier_metric)
    probs = torch.softmax(logits, dim=-1)
    if method.modulation:
        z_hat, kappa = modulate(z_q, protos, method.kappa_distance)
    else:
        z_hat, kappa = z_q, torch.ones_like(z_q[:, 0])

    reconstruct = use_exemplars
    t_hat_q = D = None
    if reconstruct:
        t_hat = net.decoder(torch.cat([z_s, z_q]))
        t_hat_s, t_hat_q = t_hat[:ns], t_hat[ns:]
        D = recon_error_vector(t_hat_q, batch.exemplar_x)

    features = assemble_detector_input(probs, z_hat, D, method.use_clf, method.use_embedding,
                                       method.use_recon_errors)
    open_logits = net.detector.logits(features)

    in_mask = batch.in_mask
    # VAE term over support and in-distribution queries only
    kl = kl_divergence(mu[:ns + nq], sigma[:ns + nq]) if encoder_kind == "vae" else None
    if reconstruct:
        if method.exemplar_mode == "self_reconstruction":
            targets_s, targets_q = batch.support_x, batch.query_x[in_mask]
        else:
            targets_s = batch.exemplar_x[batch.support_slots]
            targets_q = batch.exemplar_x[batch.query_slots[in_mask]]
        rec = torch.cat([reconstruction_loss(t_hat_s, targets_s, loss_cfg.reconstruction),
                         reconstruction_loss(t_hat_q[in_mask], targets_q, loss_cfg.reconstruction)])
    else:
        rec = mu.new_zeros(ns + int(in_mask.sum()))
    kl_in = None if kl is None else torch.cat([kl[:ns], kl[ns:][in_mask]])
    l_vae = vae_loss(rec, kl_in)
    l_ce = cross_entropy_from_logits(logits[in_mask], batch.query_slots[in_mask])
    l_bce = bce_openness_from_logits(open_logits, batch.y_open)
    lam = lambdas or (loss_cfg.lambda_vae, loss_cfg.lambda_ce, loss_cfg.lambda_bce)
    total = aggregate_loss(l_vae, l_ce, l_bce, *lam)

    outputs = EpisodeOutputs(probs, logits, D, z_hat, kappa, open_logits, protos, t_hat_q, z_q)
    return outputs, EpisodeLosses(l_vae, l_ce, l_bce, total)
