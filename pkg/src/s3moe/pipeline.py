"""Three-stage orchestration: pretraining, router fine-tuning, pruning.

Stage 1 trains both encoders end to end on the self-supervised objective
with routing noise. Stage 2 freezes everything but the routers and
fine-tunes them on labeled batches. Stage 3 never trains: routed
(token, expert-slot) pairs are sorted by score and only the top
preservation ratio p is kept at inference, with residual paths intact.
Linear probing on frozen embeddings is the evaluation protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import analysis as an
from . import diffcore as dc
from . import losses as ls
from . import moe
from .diffcore import Tensor
from .encoder import EncodedBatch, EncoderConfig, ModalityEncoder, parameter_group
from .losses import EmbeddingBatch, LossWeights
from .moe import LayerRouting


class DivergenceError(RuntimeError):
    pass


STAGES = ("specialization", "selection")
PRUNE_SCOPES = ("global", "per-encoder", "per-layer")


@dataclass(frozen=True)
class StageConfig:
    stage: str
    epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    routing_noise: float | None = None  # None: 1/n_experts during pretraining
    input_jitter: float = 0.01  # view augmentation fallback when noise is off

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 0 or self.batch_size < 2 or self.learning_rate <= 0:
            raise ValueError("invalid stage hyperparameters")


class S3Model:
    """Two modality encoders trained as one system."""

    def __init__(self, config1: EncoderConfig, config2: EncoderConfig, seed: int = 0):
        rng = dc.RngState(seed)
        self.enc1 = ModalityEncoder(config1, rng.stream(1), modality_id=1)
        self.enc2 = ModalityEncoder(config2, rng.stream(2), modality_id=2)

    @property
    def encoders(self) -> dict[int, ModalityEncoder]:
        return {1: self.enc1, 2: self.enc2}

    def named_params(self) -> dict[str, Tensor]:
        out = self.enc1.named_params("m1/")
        out.update(self.enc2.named_params("m2/"))
        return out

    def encode_pair(
        self,
        x1: np.ndarray,
        x2: np.ndarray,
        noise_sigma: float | None = None,
        rng: dc.RngState | None = None,
        masks: dict[int, dict] | None = None,
        input_jitter: float = 0.0,
    ) -> tuple[EncodedBatch, EncodedBatch]:
        masks = masks or {}
        e1 = self.enc1.encode(
            x1, train_noise_sigma=noise_sigma, rng=rng.stream(1) if rng else None,
            slot_masks=masks.get(1), input_jitter=input_jitter,
        )
        e2 = self.enc2.encode(
            x2, train_noise_sigma=noise_sigma, rng=rng.stream(2) if rng else None,
            slot_masks=masks.get(2), input_jitter=input_jitter,
        )
        return e1, e2

    def save(self, path) -> None:
        moe.save_params(self.named_params(), path)

    def load(self, path) -> None:
        loaded = moe.load_params(path)
        params = self.named_params()
        if set(loaded) != set(params):
            raise ValueError("checkpoint does not match model architecture")
        for name, arr in loaded.items():
            if params[name].shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}")
            params[name].data = arr


class MomentumSGD:
    def __init__(self, learning_rate: float, momentum: float = 0.9):
        self.lr = learning_rate
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor]) -> None:
        for name, t in params.items():
            if t.grad is None:
                continue
            v = self.velocity.get(name)
            v = t.grad if v is None else self.momentum * v + t.grad
            self.velocity[name] = v
            t.data = (t.data - self.lr * v).astype(np.float32)


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start : start + batch_size]


def _check_finite(value: float, step: int, breakdown: dict) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"loss diverged at step {step}: {breakdown}")


def train_specialization(model: S3Model, x1: np.ndarray, x2: np.ndarray, config: StageConfig) -> list[dict]:
    """Self-supervised pretraining of both encoders; returns per-step logs."""
    if config.stage != "specialization":
        raise ValueError("config stage must be specialization")
    n_experts = model.enc1.config.moe.n_experts
    sigma = config.routing_noise if config.routing_noise is not None else 1.0 / n_experts
    jitter = 0.0 if sigma else config.input_jitter
    opt = MomentumSGD(config.learning_rate, config.momentum)
    params = model.named_params()
    rng = dc.RngState(config.seed)
    log: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.stream(epoch).permutation(len(x1))
        for idx in _batches(len(x1), config.batch_size, order):
            r = rng.stream(10_000 + step)
            try:
                ea1, ea2 = model.encode_pair(
                    x1[idx], x2[idx], noise_sigma=sigma or None, rng=r.stream(0), input_jitter=jitter
                )
                eb1, eb2 = model.encode_pair(
                    x1[idx], x2[idx], noise_sigma=sigma or None, rng=r.stream(1), input_jitter=jitter
                )
                batch = EmbeddingBatch(z1=ea1.z, z2=ea2.z, z1_view2=eb1.z, z2_view2=eb2.z)
                records = ea1.records + ea2.records
                loss, breakdown = ls.l_special(batch, records, config.weights)
            except dc.NonFiniteError as e:
                raise DivergenceError(f"non-finite value at step {step}: {e}") from e
            _check_finite(breakdown["total"], step, breakdown)
            zero_grads(params)
            loss.backward()
            opt.step(params)
            log.append({"step": step, "epoch": epoch, **breakdown})
            step += 1
    return log


def stratified_order(labels: np.ndarray, rng: dc.RngState) -> np.ndarray:
    """Round-robin interleave of per-class shuffled indices."""
    labels = np.asarray(labels)
    per_class = []
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        per_class.append(members[rng.permutation(len(members))])
    longest = max(len(m) for m in per_class)
    order = []
    for i in range(longest):
        for members in per_class:
            if i < len(members):
                order.append(members[i])
    return np.array(order)


def train_selection(model: S3Model, x1: np.ndarray, x2: np.ndarray, labels: np.ndarray, config: StageConfig) -> list[dict]:
    """Router-only fine-tuning on labeled data; non-router parameters frozen."""
    if config.stage != "selection":
        raise ValueError("config stage must be selection")
    if labels is None:
        raise ValueError("selection requires labels")
    params = model.named_params()
    router_params = {n: t for n, t in params.items() if parameter_group(n) == "routers"}
    opt = MomentumSGD(config.learning_rate, config.momentum)
    rng = dc.RngState(config.seed)
    log: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        order = stratified_order(labels, rng.stream(epoch))
        for idx in _batches(len(x1), config.batch_size, order):
            # supervised contrast needs >= 2 members per present class, so
            # drop stragglers instead of aborting the run
            y = labels[idx]
            classes, inverse = np.unique(y, return_inverse=True)
            counts = np.bincount(inverse)
            idx = idx[counts[inverse] >= 2]
            y = labels[idx]
            if len(idx) < 2:
                continue
            try:
                e1, e2 = model.encode_pair(x1[idx], x2[idx])
                batch = EmbeddingBatch(z1=e1.z, z2=e2.z, labels=y)
                loss, breakdown = ls.l_select(batch, config.weights)
            except dc.NonFiniteError as e:
                raise DivergenceError(f"non-finite value at step {step}: {e}") from e
            _check_finite(breakdown["total"], step, breakdown)
            zero_grads(params)
            loss.backward()
            opt.step(router_params)
            row = {"step": step, "epoch": epoch, **breakdown}
            for m, enc_batch in ((1, e1), (2, e2)):
                mon = an.entropy_monitor(enc_batch.records)
                row[f"m{m}_local_entropy"] = mon["local_entropy"]
                row[f"m{m}_global_neg_entropy"] = mon["global_neg_entropy"]
            log.append(row)
            step += 1
    return log


@dataclass
class PruneMask:
    """Retained routed pairs at preservation ratio p.

    Pair ids are (modality, layer, token, slot); within the chosen scope
    the highest-scoring ceil(p * N) pairs are kept, ties broken by the
    pair id in lexicographic order.
    """

    p: float
    retained: set[tuple[int, int, int, int]]
    threshold: float | None
    scope: str = "global"

    def slot_masks(self, modality: int, records: list[LayerRouting]) -> dict[int, np.ndarray]:
        out = {}
        for rec in records:
            mask = np.zeros(rec.selected.shape, dtype=bool)
            for (m, layer, token, slot) in self.retained:
                if m == modality and layer == rec.layer_id:
                    mask[token, slot] = True
            out[rec.layer_id] = mask
        return out


def build_prune_mask(records_by_modality: dict[int, list[LayerRouting]], p: float, scope: str = "global") -> PruneMask:
    """Sort all routed pairs by score (descending) and keep the top ceil(p N)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"preservation ratio {p} outside [0, 1]")
    if scope not in PRUNE_SCOPES:
        raise ValueError(f"unknown prune scope {scope!r}")
    entries = []
    for m in sorted(records_by_modality):
        for rec in records_by_modality[m]:
            w = rec.weights.data
            for token in range(w.shape[0]):
                for slot in range(w.shape[1]):
                    entries.append((float(w[token, slot]), (m, rec.layer_id, token, slot)))

    def group_key(pair_id):
        if scope == "global":
            return 0
        if scope == "per-encoder":
            return pair_id[0]
        return (pair_id[0], pair_id[1])

    groups: dict = {}
    for score, pair_id in entries:
        groups.setdefault(group_key(pair_id), []).append((score, pair_id))
    retained: set = set()
    threshold = None
    for group in groups.values():
        group.sort(key=lambda e: (-e[0], e[1]))
        keep = math.ceil(p * len(group))
        for score, pair_id in group[:keep]:
            retained.add(pair_id)
            threshold = score if threshold is None else min(threshold, score)
    return PruneMask(p=p, retained=retained, threshold=threshold, scope=scope)


@dataclass
class ProbeResult:
    per_seed: list[float]
    mean: float
    std: float

    @classmethod
    def from_seeds(cls, values: list[float]) -> "ProbeResult":
        arr = np.asarray(values, dtype=np.float64)
        return cls(per_seed=[float(v) for v in arr], mean=float(arr.mean()), std=float(arr.std()))

    @property
    def accuracy(self) -> float:
        return self.mean


def _power_iteration_lmax(x: np.ndarray, iters: int = 50, seed: int = 0) -> float:
    g = np.random.default_rng(seed)
    v = g.standard_normal(x.shape[1])
    v /= np.linalg.norm(v)
    cov_mv = lambda u: x.T @ (x @ u) / len(x)
    for _ in range(iters):
        w = cov_mv(v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 1.0
        v = w / nw
    return float(v @ cov_mv(v))


def linear_probe(
    z_train: np.ndarray,
    y_train: np.ndarray,
    z_test: np.ndarray,
    y_test: np.ndarray,
    n_seeds: int = 3,
    max_iters: int = 2000,
    grad_tol: float = 1e-4,
) -> ProbeResult:
    """Multinomial logistic regression on frozen features, full-batch GD.

    The step size is set from a power-iteration estimate of the feature
    second-moment spectral norm, which upper-bounds the logistic Hessian.
    """
    classes = np.unique(y_train)
    if len(classes) < 2:
        raise ValueError("probe training split has a single class")
    remap = {c: i for i, c in enumerate(classes)}
    yt = np.array([remap[c] for c in y_train])
    ye = np.array([remap.get(c, -1) for c in y_test])
    xt = np.hstack([z_train, np.ones((len(z_train), 1))]).astype(np.float64)
    xe = np.hstack([z_test, np.ones((len(z_test), 1))]).astype(np.float64)
    onehot = np.eye(len(classes))[yt]
    lr = 2.0 / max(_power_iteration_lmax(xt), 1e-8)
    accs = []
    for seed in range(n_seeds):
        g = np.random.default_rng(seed)
        w = g.standard_normal((xt.shape[1], len(classes))) * 1e-3
        for _ in range(max_iters):
            logits = xt @ w
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            grad = xt.T @ (probs - onehot) / len(xt)
            if np.linalg.norm(grad) < grad_tol:
                break
            w -= lr * grad
        accs.append(float(np.mean((xe @ w).argmax(axis=1) == ye)))
    return ProbeResult.from_seeds(accs)


def embed_dataset(
    model: S3Model,
    x1: np.ndarray,
    x2: np.ndarray,
    batch_size: int = 128,
    p: float | None = None,
    scope: str = "global",
    fixed_mask: PruneMask | None = None,
) -> tuple[np.ndarray, float]:
    """Concatenated [z1; z2] features, optionally under a prune mask.

    With p given, the mask is rebuilt per batch from that batch's routing
    scores; with fixed_mask, the calibrated retained set is reused. Returns
    the features and the mean number of retained pairs per token.
    """
    feats = []
    retained_per_token = []
    for start in range(0, len(x1), batch_size):
        sl = slice(start, start + batch_size)
        e1, e2 = model.encode_pair(x1[sl], x2[sl])
        if p is None and fixed_mask is None:
            z = np.hstack([e1.z.data, e2.z.data])
            k = model.enc1.config.moe.top_k
            retained_per_token.append(float(len(e1.records) * k))
        else:
            mask = fixed_mask if fixed_mask is not None else build_prune_mask(
                {1: e1.records, 2: e2.records}, p, scope=scope
            )
            masks = {
                1: mask.slot_masks(1, e1.records),
                2: mask.slot_masks(2, e2.records),
            }
            m1, m2 = model.encode_pair(x1[sl], x2[sl], masks=masks)
            z = np.hstack([m1.z.data, m2.z.data])
            n_tokens = e1.records[0].n_tokens + e2.records[0].n_tokens
            retained_per_token.append(len(mask.retained) / n_tokens)
        feats.append(z)
    return np.vstack(feats), float(np.mean(retained_per_token))


def active_param_fraction(model: S3Model, retained_per_token: float) -> float:
    """Per-token active parameters relative to the unpruned forward (=1.0)."""
    cfg = model.enc1.config
    non_expert = sum(
        t.data.size for n, t in model.named_params().items() if parameter_group(n) != "experts"
    ) / 2.0
    p_exp = cfg.moe.expert_param_count
    full = non_expert + cfg.n_layers * cfg.moe.top_k * p_exp
    active = non_expert + retained_per_token * p_exp
    return active / full


def sparsify_sweep(
    model: S3Model,
    train_data: tuple[np.ndarray, np.ndarray, np.ndarray],
    test_data: tuple[np.ndarray, np.ndarray, np.ndarray],
    p_list: tuple[float, ...] = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1),
    scope: str = "global",
    batch_size: int = 128,
    n_seeds: int = 3,
) -> list[dict]:
    """Probe accuracy and active-parameter fraction across preservation ratios."""
    x1t, x2t, yt = train_data
    x1e, x2e, ye = test_data
    rows = []
    for p in p_list:
        zt, rt = embed_dataset(model, x1t, x2t, batch_size=batch_size, p=p, scope=scope)
        ze, re = embed_dataset(model, x1e, x2e, batch_size=batch_size, p=p, scope=scope)
        probe = linear_probe(zt, yt, ze, ye, n_seeds=n_seeds)
        frac = active_param_fraction(model, (rt + re) / 2.0)
        rows.append(
            {
                "p": p,
                "accuracy_mean": probe.mean,
                "accuracy_std": probe.std,
                "active_param_pct": 100.0 * frac,
            }
        )
    return rows


ABLATION_VARIANTS = {
    "none": None,
    "suff+min": {"lambda_suff": 1.0, "lambda_min": 0.1},
    "suff": {"lambda_suff": 1.0, "lambda_min": 0.0},
    "min": {"lambda_suff": 0.0, "lambda_min": 0.1},
}


def ablation_harness(
    model_factory,
    train_data: tuple[np.ndarray, np.ndarray, np.ndarray],
    test_data: tuple[np.ndarray, np.ndarray, np.ndarray],
    selection_config: StageConfig,
    n_seeds: int = 3,
) -> list[dict]:
    """Router fine-tuning loss ablation: none / suff+min / suff / min.

    `model_factory` returns a fresh model loaded with the same pretraining
    checkpoint each call, so variants do not contaminate each other.
    """
    x1t, x2t, yt = train_data
    x1e, x2e, ye = test_data
    rows = []
    for variant, overrides in ABLATION_VARIANTS.items():
        model = model_factory()
        if overrides is not None:
            cfg = replace(selection_config, weights=replace(selection_config.weights, **overrides))
            train_selection(model, x1t, x2t, yt, cfg)
        zt, _ = embed_dataset(model, x1t, x2t)
        ze, _ = embed_dataset(model, x1e, x2e)
        probe = linear_probe(zt, yt, ze, ye, n_seeds=n_seeds)
        rows.append({"variant": variant, "accuracy_mean": probe.mean, "accuracy_std": probe.std})
    return rows
