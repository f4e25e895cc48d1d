"""Training objectives and their gradients w.r.t. the network heads.

l_var / l_dist are the two halves of the discriminative loss, l_ce is masked
cross entropy on the semantic logits and l_regress is the squared error of
offsets against vectors pointing at the label-group centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from weakseg3d.model import Hyperparams, ModelOutput, OutputGrads
from weakseg3d.pointcloud import SENTINEL_NONE, Scene


@dataclass(frozen=True)
class InstanceGroups:
    """Disjoint point groups keyed by instance id, in increasing id order."""

    ids: tuple[int, ...]
    members: tuple[np.ndarray, ...]

    @classmethod
    def from_labels(cls, labels) -> "InstanceGroups":
        labels = np.asarray(labels)
        ids = np.unique(labels)
        ids = ids[ids != SENTINEL_NONE]
        return cls(tuple(int(i) for i in ids), tuple(np.flatnonzero(labels == i) for i in ids))

    def __len__(self):
        return len(self.ids)

    def means(self, embeddings: np.ndarray) -> np.ndarray:
        if not self.ids:
            return np.zeros((0, embeddings.shape[1]))
        return np.stack([embeddings[m].mean(axis=0) for m in self.members])

    def filtered(self, embeddings: np.ndarray, alpha: float) -> "InstanceGroups":
        """Keep points within ``alpha`` of their group mean; drop emptied groups."""
        ids, members = [], []
        for gid, m, mu in zip(self.ids, self.members, self.means(embeddings)):
            keep = m[np.linalg.norm(embeddings[m] - mu, axis=1) < alpha]
            if len(keep):
                ids.append(gid)
                members.append(keep)
        return InstanceGroups(tuple(ids), tuple(members))


def l_var(output: ModelOutput, groups: InstanceGroups, delta_v: float, mean_grad: bool = True):
    e = output.embeddings
    grad = np.zeros_like(e)
    c = len(groups)
    if c == 0:
        return 0.0, grad
    loss = 0.0
    for m in groups.members:
        if len(m) == 0:
            raise ValueError("empty instance group")
        r = e[m].mean(axis=0) - e[m]
        d = np.linalg.norm(r, axis=1)
        h = np.maximum(d - delta_v, 0.0)
        loss += np.mean(h * h) / c
        safe = np.where(d > 0, d, 1.0)
        g_r = (2.0 / (c * len(m))) * (h / safe)[:, None] * r
        g_e = -g_r
        if mean_grad:
            g_e = g_e + g_r.sum(axis=0) / len(m)
        grad[m] += g_e
    return float(loss), grad


def l_dist(output: ModelOutput, groups: InstanceGroups, delta_d: float, beta: float | None = None):
    """Hinge push between every ordered pair of distinct group means.

    With ``beta`` set only pairs whose means are farther apart than beta count.
    """
    e = output.embeddings
    grad = np.zeros_like(e)
    c = len(groups)
    if c <= 1:
        return 0.0, grad
    mu = groups.means(e)
    diff = mu[:, None, :] - mu[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    h = np.maximum(2.0 * delta_d - dist, 0.0)
    active = ~np.eye(c, dtype=bool)
    if beta is not None:
        active &= dist > beta
    h = np.where(active, h, 0.0)
    norm = c * (c - 1)
    loss = float((h * h).sum() / norm)
    safe = np.where(dist > 0, dist, 1.0)
    # both orderings of a pair contribute the same derivative
    coef = np.where(dist > 0, -4.0 * h / safe / norm, 0.0)
    g_mu = (coef[:, :, None] * diff).sum(axis=1)
    for k, m in enumerate(groups.members):
        grad[m] += g_mu[k] / len(m)
    return loss, grad


def l_ce(output: ModelOutput, labels):
    labels = np.asarray(labels)
    grad = np.zeros_like(output.logits)
    mask = labels != SENTINEL_NONE
    n = int(mask.sum())
    if n == 0:
        return 0.0, grad
    z = output.logits[mask]
    y = labels[mask]
    if y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("semantic label outside [0, K)")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -float(logp[np.arange(n), y].mean())
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    grad[mask] = g / n
    return loss, grad


def regression_targets(scene: Scene, groups: InstanceGroups) -> tuple[np.ndarray, np.ndarray]:
    """(indices, targets): for each grouped point, its group centroid minus its position."""
    idx = np.concatenate(groups.members) if len(groups) else np.zeros(0, dtype=np.int64)
    targets = np.zeros((len(idx), 3))
    k = 0
    for m in groups.members:
        p = scene.positions[m]
        targets[k:k + len(m)] = p.mean(axis=0) - p
        k += len(m)
    return idx, targets


def l_regress(output: ModelOutput, scene: Scene, groups: InstanceGroups):
    grad = np.zeros_like(output.offsets)
    idx, targets = regression_targets(scene, groups)
    if len(idx) == 0:
        return 0.0, grad
    r = output.offsets[idx] - targets
    loss = float((r * r).sum(axis=1).mean())
    grad[idx] = 2.0 * r / len(idx)
    return loss, grad


TERMS = ("weak_var", "weak_dist", "weak_ce", "pseudo_var", "pseudo_dist", "pseudo_ce", "pseudo_reg")


@dataclass
class LossBreakdown:
    terms: dict[str, float]

    @property
    def total(self) -> float:
        return float(sum(self.terms[k] for k in TERMS))

    @property
    def var(self) -> float:
        return self.terms["weak_var"] + self.terms["pseudo_var"]

    @property
    def dist(self) -> float:
        return self.terms["weak_dist"] + self.terms["pseudo_dist"]

    @property
    def ce(self) -> float:
        return self.terms["weak_ce"] + self.terms["pseudo_ce"]

    @property
    def reg(self) -> float:
        return self.terms["pseudo_reg"]


def total_loss(output: ModelOutput, scene: Scene, weak, pseudo, hp: Hyperparams, epoch: int):
    """Weak-label terms always; pseudo-label terms from epoch ``hp.pseudo_start`` on.

    ``weak`` and ``pseudo`` expose per-point ``instance`` and ``semantic``
    arrays. Pseudo labels flagged ``filtered`` (the mean-shift baseline) get
    the alpha point mask and beta pair mask and no offset regression.
    """
    n = len(output)
    grads = OutputGrads.zeros(n, output.embeddings.shape[1], output.logits.shape[1])
    terms = dict.fromkeys(TERMS, 0.0)

    wg = InstanceGroups.from_labels(weak.instance)
    terms["weak_var"], g = l_var(output, wg, hp.delta_v, hp.mean_grad)
    grads.embeddings += g
    terms["weak_dist"], g = l_dist(output, wg, hp.delta_d)
    grads.embeddings += g
    terms["weak_ce"], g = l_ce(output, weak.semantic)
    grads.logits += g

    if epoch >= hp.pseudo_start:
        if pseudo is None:
            raise ValueError(f"epoch {epoch} >= pseudo_start {hp.pseudo_start} but no pseudo labels given")
        pg = InstanceGroups.from_labels(pseudo.instance)
        filtered = getattr(pseudo, "filtered", False)
        if filtered:
            pg = pg.filtered(output.embeddings, hp.alpha)
        terms["pseudo_var"], g = l_var(output, pg, hp.delta_v, hp.mean_grad)
        grads.embeddings += g
        terms["pseudo_dist"], g = l_dist(output, pg, hp.delta_d, hp.beta if filtered else None)
        grads.embeddings += g
        terms["pseudo_ce"], g = l_ce(output, pseudo.semantic)
        grads.logits += g
        if not filtered:
            terms["pseudo_reg"], g = l_regress(output, scene, pg)
            grads.offsets += g
    return LossBreakdown(terms), grads
