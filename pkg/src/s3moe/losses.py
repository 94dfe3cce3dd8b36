"""Training objectives for the three stages.

Pretraining optimizes contrastive alignment (intra-modal views and
cross-modal pairs) plus router-balancing auxiliary losses. Router
fine-tuning switches to supervised contrastive sufficiency plus a
von Mises-Fisher compactness surrogate, with no auxiliary terms.
All contrastive losses operate on unit-norm embeddings.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .moe import LayerRouting


@dataclass(frozen=True)
class LossWeights:
    tau: float = 0.1
    lambda_rep: float = 1.0
    lambda_dsc: float = 1.0
    lambda_aux: float = 0.01
    lambda_imp: float = 1.0
    lambda_load: float = 1.0
    lambda_local: float = 0.1
    lambda_global: float = 0.1
    lambda_suff: float = 1.0
    lambda_min: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("rep", "dsc", "aux", "imp", "load", "local", "global", "suff", "min"):
            if getattr(self, f"lambda_{name}") < 0:
                raise ValueError(f"lambda_{name} must be nonnegative")


@dataclass
class EmbeddingBatch:
    """Paired unit embeddings; second views are optional stochastic passes."""

    z1: Tensor
    z2: Tensor
    labels: np.ndarray | None = None
    z1_view2: Tensor | None = None
    z2_view2: Tensor | None = None

    def __post_init__(self):
        if self.z1.shape != self.z2.shape or self.z1.ndim != 2:
            raise ValueError("z1 and z2 must be matching (B, d) batches")
        for z in (self.z1, self.z2, self.z1_view2, self.z2_view2):
            if z is not None and not np.allclose(np.linalg.norm(z.data, axis=1), 1.0, atol=1e-3):
                raise ValueError("embeddings must be unit norm")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (self.z1.shape[0],):
                raise ValueError("labels must be one id per sample")


def info_nce(src: Tensor, dst: Tensor, tau: float) -> Tensor:
    """Contrastive alignment of src row i to dst row i against all dst rows."""
    if src.shape[0] < 2:
        raise ValueError("info_nce requires batch size >= 2")
    if tau <= 0:
        raise ValueError("tau must be positive")
    b = src.shape[0]
    logits = dc.mul(dc.matmul(src, dc.transpose(dst)), 1.0 / tau)
    ls = dc.log_softmax(logits, axis=-1)
    diag = dc.gather_cols(ls, np.arange(b)[:, None])
    return dc.neg(dc.mean(diag))


def l_rep(batch: EmbeddingBatch, tau: float = 0.1) -> Tensor:
    """Intra-modal alignment of two stochastic views, averaged over modalities."""
    v1 = batch.z1_view2 if batch.z1_view2 is not None else batch.z1
    v2 = batch.z2_view2 if batch.z2_view2 is not None else batch.z2
    return dc.mul(dc.add(info_nce(batch.z1, v1, tau), info_nce(batch.z2, v2, tau)), 0.5)


def l_dsc(batch: EmbeddingBatch, tau: float = 0.1) -> Tensor:
    """Cross-modal alignment, symmetrized over both directions."""
    return dc.mul(dc.add(info_nce(batch.z1, batch.z2, tau), info_nce(batch.z2, batch.z1, tau)), 0.5)


def _positive_mask(labels: np.ndarray, include_self: bool) -> np.ndarray:
    b = len(labels)
    mask = labels[:, None] == labels[None, :]
    if not include_self:
        np.fill_diagonal(mask, False)
    return mask


def sup_con(src: Tensor, dst: Tensor, labels: np.ndarray, tau: float, include_self: bool = True) -> Tensor:
    """Label-supervised contrast of src against dst.

    Positives for sample i are the dst rows sharing its label; intra-modal
    use passes include_self=False so the trivial self pair is excluded.
    Samples whose positive set is empty are dropped with a warning.
    """
    if src.shape[0] < 2:
        raise ValueError("sup_con requires batch size >= 2")
    labels = np.asarray(labels)
    mask = _positive_mask(labels, include_self)
    counts = mask.sum(axis=1)
    kept = counts > 0
    if not kept.all():
        warnings.warn(f"sup_con: dropped {int((~kept).sum())} sample(s) with empty positive set")
    if not kept.any():
        raise ValueError("sup_con: every sample has an empty positive set")
    weights = np.zeros(mask.shape, np.float32)
    weights[kept] = mask[kept] / counts[kept, None]
    logits = dc.mul(dc.matmul(src, dc.transpose(dst)), 1.0 / tau)
    ls = dc.log_softmax(logits, axis=-1)
    total = dc.tsum(dc.mul(ls, Tensor(weights)))
    return dc.neg(dc.mul(total, 1.0 / float(kept.sum())))


def l_suff(batch: EmbeddingBatch, tau: float = 0.1) -> Tensor:
    """Mean supervised contrast over all four modality direction pairs."""
    if batch.labels is None:
        raise ValueError("l_suff requires labels")
    y = batch.labels
    terms = [
        sup_con(batch.z1, batch.z1, y, tau, include_self=False),
        sup_con(batch.z2, batch.z2, y, tau, include_self=False),
        sup_con(batch.z1, batch.z2, y, tau, include_self=True),
        sup_con(batch.z2, batch.z1, y, tau, include_self=True),
    ]
    acc = terms[0]
    for t in terms[1:]:
        acc = dc.add(acc, t)
    return dc.mul(acc, 0.25)


def compactness(src: Tensor, dst: Tensor, labels: np.ndarray) -> Tensor:
    """Negative mean inner product with the batch-local normalized class mean.

    The class mean is taken over dst-modality embeddings sharing the label,
    then l2-normalized; a class whose mean collapses to zero is rejected.
    """
    labels = np.asarray(labels)
    classes, class_idx = np.unique(labels, return_inverse=True)
    counts = np.bincount(class_idx).astype(np.float32)
    sums = dc.index_add(len(classes), class_idx, dst)
    means = dc.scale_rows(sums, Tensor(1.0 / counts))
    mu_hat = dc.l2_normalize(means, axis=-1)
    per_sample = dc.gather_rows(mu_hat, class_idx)
    return dc.neg(dc.mean(dc.tsum(dc.mul(src, per_sample), axis=1)))


def l_min(batch: EmbeddingBatch) -> Tensor:
    """Mean compactness over all four modality direction pairs."""
    if batch.labels is None:
        raise ValueError("l_min requires labels")
    y = batch.labels
    acc = compactness(batch.z1, batch.z1, y)
    for src, dst in ((batch.z1, batch.z2), (batch.z2, batch.z1), (batch.z2, batch.z2)):
        acc = dc.add(acc, compactness(src, dst, y))
    return dc.mul(acc, 0.25)


def vmf_kl(mu_x: np.ndarray, mu_y_hat: np.ndarray, kappa: float, a_d_kappa: float) -> float:
    """Closed-form KL between von Mises-Fisher distributions with shared
    concentration kappa: kappa * A_d(kappa) * (1 - <mu_x, mu_y_hat>).

    A_d(kappa) is the mean resultant length, supplied by the caller.
    """
    mu_x = np.asarray(mu_x, dtype=np.float64)
    mu_y_hat = np.asarray(mu_y_hat, dtype=np.float64)
    if not np.isclose(np.linalg.norm(mu_x), 1.0, atol=1e-5):
        raise ValueError("mu_x must be unit norm")
    if not np.isclose(np.linalg.norm(mu_y_hat), 1.0, atol=1e-5):
        raise ValueError("mu_y_hat must be unit norm")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    if not 0 <= a_d_kappa < 1:
        raise ValueError("A_d(kappa) must lie in [0, 1)")
    # dot can exceed 1 by float roundoff; the KL is nonnegative by construction
    return float(kappa * a_d_kappa * (1.0 - min(mu_x @ mu_y_hat, 1.0)))


def cv_squared(x: Tensor) -> Tensor:
    """Squared coefficient of variation with population variance."""
    m = dc.mean(x)
    var = dc.sub(dc.mean(dc.mul(x, x)), dc.mul(m, m))
    return dc.div(var, dc.mul(m, m))


def importance_loss(scores: Tensor | LayerRouting) -> Tensor:
    """CV-squared of per-expert total soft routing weight over the batch."""
    if isinstance(scores, LayerRouting):
        scores = scores.scores
    return cv_squared(dc.tsum(scores, axis=0))


def load_loss_from_logits(clean: Tensor, noisy: np.ndarray, k: int, sigma: float) -> Tensor:
    """CV-squared of expected expert loads under fresh routing noise.

    For expert i the threshold is the k-th largest noisy logit among the
    other experts, so an expert far above the field gets load probability
    near one. Differentiable through the clean logits only.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    n, e = clean.shape
    if k >= e:
        # every expert is always selected: loads are identical by construction
        return Tensor(np.float32(0.0))
    order = np.sort(noisy, axis=-1)[:, ::-1]
    kth, kth_next = order[:, k - 1 : k], order[:, k : k + 1]
    in_topk = noisy >= kth
    thr = np.where(in_topk, kth_next, kth).astype(np.float32)
    p = dc.normal_cdf(dc.mul(dc.sub(clean, Tensor(thr)), 1.0 / sigma))
    return cv_squared(dc.tsum(p, axis=0))


def load_loss(routing: LayerRouting, sigma: float | None = None) -> Tensor:
    if sigma is None:
        sigma = 1.0 / routing.n_experts
    return load_loss_from_logits(routing.logits, routing.noisy_logits.data, routing.top_k, sigma)


def local_entropy_loss(scores: Tensor | LayerRouting) -> Tensor:
    """Mean token-level routing entropy in nats."""
    if isinstance(scores, LayerRouting):
        scores = scores.scores
    return dc.mean(dc.entropy(scores, axis=-1))


def global_entropy_loss(scores: Tensor | LayerRouting) -> Tensor:
    """Negative entropy of the batch-marginal routing distribution."""
    if isinstance(scores, LayerRouting):
        scores = scores.scores
    return dc.neg(dc.entropy(dc.mean(scores, axis=0), axis=-1))


def _mean_over(records: list[LayerRouting], fn) -> Tensor:
    acc = fn(records[0])
    for r in records[1:]:
        acc = dc.add(acc, fn(r))
    return dc.mul(acc, 1.0 / len(records))


def l_aux(records: list[LayerRouting], weights: LossWeights) -> tuple[Tensor, dict]:
    """Router-balancing auxiliary total, averaged over MoE layers."""
    if not records:
        raise ValueError("l_aux requires at least one routing record")
    parts = {
        "imp": (weights.lambda_imp, _mean_over(records, importance_loss)),
        "load": (weights.lambda_load, _mean_over(records, load_loss)),
        "local": (weights.lambda_local, _mean_over(records, local_entropy_loss)),
        "global": (weights.lambda_global, _mean_over(records, global_entropy_loss)),
    }
    total = Tensor(np.float32(0.0))
    breakdown = {}
    for name, (lam, term) in parts.items():
        breakdown[name] = float(term.data)
        if lam:
            total = dc.add(total, dc.mul(term, lam))
    return total, breakdown


def l_special(batch: EmbeddingBatch, records: list[LayerRouting], weights: LossWeights) -> tuple[Tensor, dict]:
    """Pretraining objective: representation + alignment + auxiliary terms."""
    total = Tensor(np.float32(0.0))
    breakdown = {}
    for name, lam, term in (
        ("rep", weights.lambda_rep, lambda: l_rep(batch, weights.tau)),
        ("dsc", weights.lambda_dsc, lambda: l_dsc(batch, weights.tau)),
    ):
        val = term()
        breakdown[name] = float(val.data)
        if lam:
            total = dc.add(total, dc.mul(val, lam))
    if records:
        aux_total, aux_parts = l_aux(records, weights)
        breakdown["aux"] = float(aux_total.data)
        breakdown.update({f"aux_{k}": v for k, v in aux_parts.items()})
        if weights.lambda_aux:
            total = dc.add(total, dc.mul(aux_total, weights.lambda_aux))
    breakdown["total"] = float(total.data)
    return total, breakdown


def l_select(batch: EmbeddingBatch, weights: LossWeights) -> tuple[Tensor, dict]:
    """Router fine-tuning objective: sufficiency + compactness, no aux terms."""
    if batch.labels is None:
        raise ValueError("l_select requires labels")
    suff = l_suff(batch, weights.tau)
    comp = l_min(batch)
    total = Tensor(np.float32(0.0))
    if weights.lambda_suff:
        total = dc.add(total, dc.mul(suff, weights.lambda_suff))
    if weights.lambda_min:
        total = dc.add(total, dc.mul(comp, weights.lambda_min))
    return total, {"suff": float(suff.data), "min": float(comp.data), "total": float(total.data)}
