"""Class-adaptive policy network and the relaxed search objective.

The network maps a (detached) feature embedding and a class label to a
per-sample policy: a probability vector over the transform set and one
magnitude per transform. During search the augmented branch is the
probability-weighted mean of the embeddings of every transformed copy; the
policy is trained with the mean of a difficulty term (on the training half)
and a similarity term (on the search half).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import Backbone, Linear, load_checkpoint, save_checkpoint
from .tensor import Tensor
from .transforms import (
    DEFAULT_SETTINGS,
    RngStream,
    TransformId,
    TransformSettings,
    apply_differentiable,
    perturb_magnitude,
)

LOSS_EPS = 1e-8


@dataclass
class SearchConfig:
    temperature: float = 3.0
    n_ops: int = 1
    delta: float = 0.3
    policy_lr: float = 1e-3
    freq_sea: int = 10
    # "soft" weights the mixed embedding by p directly; "gumbel" uses a relaxed Gumbel draw
    relaxation: str = "soft"
    mixed_prefactor: bool = True
    detach_confidence_weight: bool = True

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.n_ops not in (1, 2, 3, 4):
            raise ValueError("n_ops must be in {1, 2, 3, 4}")
        if not 0 <= self.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")
        if self.policy_lr < 0:
            raise ValueError("policy_lr must be >= 0")
        if self.freq_sea < 1:
            raise ValueError("freq_sea must be >= 1")
        if self.relaxation not in ("soft", "gumbel"):
            raise ValueError("relaxation must be 'soft' or 'gumbel'")


@dataclass
class Policy:
    """Per-sample probabilities ``p`` and magnitudes ``m``, shape (N, |TS|) or (|TS|,)."""

    p: np.ndarray
    m: np.ndarray

    def validate(self, atol: float = 1e-6) -> None:
        if np.any(self.p < 0) or not np.allclose(self.p.sum(axis=-1), 1.0, atol=atol):
            raise ValueError("policy probabilities must be >= 0 and sum to 1")
        if np.any(self.m < 0) or np.any(self.m > 1):
            raise ValueError("policy magnitudes must lie in [0, 1]")


class PolicyNetwork:
    """Label embedding + 2-layer MLP producing weight and magnitude logits."""

    def __init__(
        self,
        num_classes: int,
        feature_dim: int,
        n_transforms: int,
        label_dim: int = 16,
        hidden: int = 64,
        seed: int = 0,
    ):
        gen = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.n_transforms = n_transforms
        self.label_dim = label_dim
        self.hidden = hidden
        self.label_embed = Tensor(gen.normal(0.0, 1.0, size=(num_classes, label_dim)), requires_grad=True)
        self.fc1 = Linear(gen, feature_dim + label_dim, hidden)
        self.fc2 = Linear(gen, hidden, 2 * n_transforms)

    def named_params(self) -> list[tuple[str, Tensor]]:
        return [
            ("label_embed", self.label_embed),
            ("fc1.w", self.fc1.w),
            ("fc1.b", self.fc1.b),
            ("fc2.w", self.fc2.w),
            ("fc2.b", self.fc2.b),
        ]

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def __call__(self, f, y) -> tuple[Tensor, Tensor]:
        """Return (p, m) tensors of shape (N, |TS|)."""
        f = T.as_tensor(f)
        y = np.asarray(y, dtype=np.int64)
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise IndexError(f"label out of range [0, {self.num_classes})")
        h = T.concat([f, self.label_embed[y]], axis=1)
        out = self.fc2(self.fc1(h).relu())
        j = self.n_transforms
        return T.softmax(out[:, :j], axis=1), out[:, j:].sigmoid()

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.named_params():
            p.data = np.array(state[n], dtype=T.DTYPE)


def infer_policy(net: PolicyNetwork, f, y) -> Policy:
    with T.no_grad():
        p, m = net(f, y)
    pol = Policy(p.data, m.data)
    pol.validate()
    return pol


def save_policy_network(net: PolicyNetwork, path: str | Path) -> None:
    meta = {
        "num_classes": net.num_classes,
        "feature_dim": net.feature_dim,
        "n_transforms": net.n_transforms,
        "label_dim": net.label_dim,
        "hidden": net.hidden,
    }
    save_checkpoint(path, "policy_net", net.state().items(), meta)


def load_policy_network(path: str | Path) -> PolicyNetwork:
    arch, meta, arrays = load_checkpoint(path)
    if arch != "policy_net":
        raise ValueError(f"{path}: expected a policy_net checkpoint, found {arch!r}")
    net = PolicyNetwork(**meta)
    net.load_state(arrays)
    return net


# ---------------------------------------------------------------------------
# relaxed search branch
# ---------------------------------------------------------------------------


def gumbel_select(p: np.ndarray, temperature: float, gen: np.random.Generator, hard: bool = False):
    """Gumbel-softmax over probabilities ``p``.

    Soft mode returns softmax((log p + G) / temperature); hard mode returns the
    argmax index, which is an exact categorical draw from ``p``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.maximum(p, 1e-300))
    z = logp + gen.gumbel(size=p.shape)
    if hard:
        return int(np.argmax(z)) if z.ndim == 1 else z.argmax(axis=-1)
    z = z / temperature
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def gumbel_softmax(p: Tensor, temperature: float, gen: np.random.Generator, hard: bool = False) -> Tensor:
    """Differentiable relaxed draw; ``hard`` gives a one-hot forward with soft gradients."""
    noise = gen.gumbel(size=p.shape)
    soft = T.softmax((T.log(p.clamp_min(1e-300)) + noise) * (1.0 / temperature), axis=-1)
    if not hard:
        return soft
    onehot = np.zeros(p.shape)
    np.put_along_axis(onehot, soft.data.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return soft + Tensor(onehot - soft.data)


def mixed_embedding(
    backbone: Backbone,
    p: Tensor,
    x: np.ndarray,
    m: Tensor,
    rng: RngStream,
    transforms: Sequence[TransformId],
    sample_ids: Sequence[int] | None = None,
    keep_mask: np.ndarray | None = None,
    prefactor: bool = True,
    settings: TransformSettings = DEFAULT_SETTINGS,
) -> Tensor:
    """(1/|TS|) * sum_j p_j F(tau_j(x, m_j)) for a batch ``x`` of shape (N, C, L).

    ``keep_mask`` (N, L) marks protected time steps that are pasted back from
    the original signal after each transform.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    j_count = len(transforms)
    if p.shape != (n, j_count) or m.shape != (n, j_count):
        raise T.ShapeError(f"policy shape {p.shape}/{m.shape} != ({n}, {j_count})")
    ids = range(n) if sample_ids is None else sample_ids
    views = []
    for j, t in enumerate(transforms):
        for i, sid in enumerate(ids):
            xi = Tensor(x[i])
            aug = apply_differentiable(t, xi, m[i, j], rng.child(int(sid), j), settings)
            if keep_mask is not None:
                keep = np.broadcast_to(keep_mask[i].astype(np.float64), x[i].shape)
                aug = aug * Tensor(1.0 - keep) + Tensor(x[i] * keep)
            views.append(aug)
    feats = backbone.features(T.stack(views, axis=0))
    feats = feats.reshape(j_count, n, backbone.feature_dim)
    mixed = T.einsum("nj,jnd->nd", p, feats)
    return mixed * (1.0 / j_count) if prefactor else mixed


def confidence_weight(conf_orig: float, conf_aug: float) -> float:
    """sqrt(conf_orig * max(conf_orig - conf_aug, 0))."""
    return math.sqrt(conf_orig * max(conf_orig - conf_aug, 0.0))


def _confidence_weight_t(conf_orig: Tensor, conf_aug: Tensor) -> Tensor:
    return (conf_orig * (conf_orig - conf_aug).clamp_min(0.0)).sqrt()


def _true_class_prob(logits: Tensor, y: np.ndarray) -> Tensor:
    return T.softmax(logits, axis=1)[np.arange(len(y)), y]


def _guard(loss: Tensor) -> Tensor:
    return loss.clamp_min(LOSS_EPS)


def difficult_loss(logits_orig, logits_aug: Tensor, y, detach_weight: bool = True) -> Tensor:
    """Batch mean of w * L(x) / L(x_hat) with the per-sample confidence weight w."""
    y = np.asarray(y, dtype=np.int64)
    logits_orig = T.as_tensor(logits_orig).detach()
    l_orig = T.cross_entropy(logits_orig, y, reduction="none")
    l_aug = T.cross_entropy(logits_aug, y, reduction="none")
    conf_aug = _true_class_prob(logits_aug, y)
    if detach_weight:
        conf_aug = conf_aug.detach()
    w = _confidence_weight_t(_true_class_prob(logits_orig, y), conf_aug)
    return (w * l_orig / _guard(l_aug)).mean()


def similar_loss(logits_orig, logits_aug: Tensor, y) -> Tensor:
    """Batch mean of L(x_hat) / L(x)."""
    y = np.asarray(y, dtype=np.int64)
    l_orig = T.cross_entropy(T.as_tensor(logits_orig).detach(), y, reduction="none")
    l_aug = T.cross_entropy(logits_aug, y, reduction="none")
    return (l_aug / _guard(l_orig)).mean()


def policy_loss(diff, sim, use_diff: bool = True):
    """(difficult + similar) / 2, or the similar term alone when ``use_diff`` is off."""
    if not use_diff:
        return sim
    return (diff + sim) * 0.5


def augmented_logits(
    backbone: Backbone,
    net: PolicyNetwork,
    x: np.ndarray,
    y: np.ndarray,
    rng: RngStream,
    transforms: Sequence[TransformId],
    cfg: SearchConfig,
    sample_ids: Sequence[int] | None = None,
    keep_mask: np.ndarray | None = None,
    settings: TransformSettings = DEFAULT_SETTINGS,
) -> tuple[np.ndarray, Tensor]:
    """Original-branch logits (constant) and the policy-dependent augmented logits."""
    with T.no_grad():
        f = backbone.features(x)
        logits_orig = backbone.logits(f).data
    p, m = net(f, y)
    if cfg.relaxation == "gumbel":
        p = gumbel_softmax(p, cfg.temperature, rng.child("gumbel").generator())
    mixed = mixed_embedding(
        backbone, p, x, m, rng, transforms, sample_ids, keep_mask, cfg.mixed_prefactor, settings
    )
    return logits_orig, backbone.logits(mixed)


# ---------------------------------------------------------------------------
# train-time sampling
# ---------------------------------------------------------------------------


def sample_train_policy(
    p: np.ndarray,
    m: np.ndarray,
    cfg: SearchConfig,
    gen: np.random.Generator,
    transforms: Sequence[TransformId],
) -> list[tuple[TransformId, float]]:
    """Draw ``cfg.n_ops`` transforms i.i.d. from ``p`` with perturbed magnitudes."""
    ops = []
    for _ in range(cfg.n_ops):
        j = gumbel_select(p, cfg.temperature, gen, hard=True)
        ops.append((transforms[j], perturb_magnitude(float(m[j]), cfg.delta, gen)))
    return ops
