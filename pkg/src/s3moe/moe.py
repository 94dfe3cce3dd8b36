"""Experts, router and the sparse MoE layer that replaces a dense FFN.

Granularity `chi` shards the FFN hidden width into experts of width
d_expert = d_ffn / chi; expansion `rho` multiplies the expert budget so
n_experts = chi * rho. Selected top-k weights are the raw softmax entries
(no renormalization after top-k).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

ACTIVATIONS = {"gelu": dc.gelu, "relu": dc.relu}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MoEConfig:
    d_model: int
    granularity_chi: int
    expansion_rho: int
    top_k: int
    d_ffn: int | None = None
    activation: str = "gelu"

    def __post_init__(self):
        d_ffn = self.d_ffn if self.d_ffn is not None else 4 * self.d_model
        object.__setattr__(self, "d_ffn", d_ffn)
        if self.granularity_chi < 1 or self.expansion_rho < 1:
            raise ConfigError("granularity and expansion must be positive")
        if d_ffn % self.granularity_chi != 0:
            raise ConfigError(f"d_ffn={d_ffn} not divisible by chi={self.granularity_chi}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k={self.top_k} outside [1, {self.n_experts}]")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def n_experts(self) -> int:
        return self.granularity_chi * self.expansion_rho

    @property
    def d_expert(self) -> int:
        return self.d_ffn // self.granularity_chi

    @property
    def expert_weight_count(self) -> int:
        return 2 * self.d_model * self.d_expert

    @property
    def expert_param_count(self) -> int:
        return self.expert_weight_count + self.d_expert + self.d_model

    @property
    def dense_ffn_weight_count(self) -> int:
        return 2 * self.d_model * self.d_ffn

    @property
    def dense_ffn_param_count(self) -> int:
        return self.dense_ffn_weight_count + self.d_ffn + self.d_model

    @property
    def router_param_count(self) -> int:
        return self.n_experts * self.d_model

    def total_expert_weight_count(self) -> int:
        return self.n_experts * self.expert_weight_count


def active_params_per_token(config: MoEConfig, k: int | None = None) -> dict:
    """Per-token active expert parameter accounting for a given top-k.

    Weight-matrix parity with the dense FFN holds exactly at k = chi; the
    per-expert biases add a small surplus that is reported separately.
    """
    k = config.top_k if k is None else k
    weights = k * config.expert_weight_count
    biases = k * (config.d_expert + config.d_model)
    dense_biases = config.d_ffn + config.d_model
    return {
        "active_weight_params": weights,
        "active_bias_params": biases,
        "active_total": weights + biases,
        "dense_ffn_weight_params": config.dense_ffn_weight_count,
        "bias_surplus_vs_dense": biases - dense_biases,
    }


@dataclass
class RoutingRecord:
    """Routing outcome for a single token (full scores plus top-k slots)."""

    token_id: tuple
    scores: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    layer_id: int = 0


@dataclass
class LayerRouting:
    """Batched routing state for one MoE layer over N tokens.

    `scores`/`weights` stay in the autodiff graph; `selected` is a plain
    (N, k) index array. `logits` are the pre-noise router logits.
    """

    layer_id: int
    modality: int
    n_tokens: int
    logits: Tensor
    noisy_logits: Tensor
    scores: Tensor
    selected: np.ndarray
    weights: Tensor
    n_experts: int
    top_k: int
    token_ids: list = field(default_factory=list)

    def record_for_token(self, i: int) -> RoutingRecord:
        token_id = self.token_ids[i] if self.token_ids else (0, i)
        return RoutingRecord(
            token_id=token_id,
            scores=self.scores.data[i].copy(),
            selected=self.selected[i].copy(),
            weights=self.weights.data[i].copy(),
            layer_id=self.layer_id,
        )


def init_expert(config: MoEConfig, rng: dc.RngState) -> dict[str, Tensor]:
    d_m, d_e = config.d_model, config.d_expert
    return {
        "W1": Tensor(rng.normal((d_e, d_m), sigma=1.0 / np.sqrt(d_m)), requires_grad=True),
        "b1": Tensor(np.zeros(d_e, np.float32), requires_grad=True),
        "W2": Tensor(rng.normal((d_m, d_e), sigma=1.0 / np.sqrt(d_e)), requires_grad=True),
        "b2": Tensor(np.zeros(d_m, np.float32), requires_grad=True),
    }


def init_router(config: MoEConfig, rng: dc.RngState) -> dict[str, Tensor]:
    return {
        "Wg": Tensor(
            rng.normal((config.n_experts, config.d_model), sigma=1.0 / np.sqrt(config.d_model)),
            requires_grad=True,
        )
    }


def ffn_forward(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor, activation: str = "gelu") -> Tensor:
    """Two-layer FFN: W2 @ phi(W1 @ x + b1) + b2, for (d,) or (N, d) input."""
    phi = ACTIVATIONS[activation]
    single = x.ndim == 1
    xm = dc.reshape(x, (1, -1)) if single else x
    h = phi(dc.add(dc.matmul(xm, dc.transpose(W1)), b1))
    out = dc.add(dc.matmul(h, dc.transpose(W2)), b2)
    return dc.reshape(out, (-1,)) if single else out


class MoELayer:
    """Sparse MoE layer: router plus n_experts small FFNs."""

    def __init__(self, config: MoEConfig, rng: dc.RngState, layer_id: int = 0, modality: int = 0):
        self.config = config
        self.layer_id = layer_id
        self.modality = modality
        self.router = init_router(config, rng.stream(0))
        self.experts = [init_expert(config, rng.stream(i + 1)) for i in range(config.n_experts)]

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}router/Wg": self.router["Wg"]}
        for i, ex in enumerate(self.experts):
            for k, v in ex.items():
                out[f"{prefix}expert{i}/{k}"] = v
        return out

    def route_tokens(self, x: Tensor, noise_sigma: float | None = None, rng: dc.RngState | None = None) -> LayerRouting:
        """Router softmax over experts for a (N, d_model) token block.

        With noise, top-k selection and reported weights both use the noisy
        logits; the clean logits are kept for the load loss.
        """
        cfg = self.config
        logits = dc.matmul(x, dc.transpose(self.router["Wg"]))
        if noise_sigma:
            if rng is None:
                raise ValueError("routing noise requires an RngState")
            noisy = dc.add(logits, Tensor(rng.normal(logits.shape, sigma=noise_sigma)))
        else:
            noisy = logits
        scores = dc.softmax(noisy, axis=-1)
        selected, _ = dc.topk(scores, cfg.top_k)
        weights = dc.gather_cols(scores, selected)
        return LayerRouting(
            layer_id=self.layer_id,
            modality=self.modality,
            n_tokens=x.shape[0],
            logits=logits,
            noisy_logits=noisy,
            scores=scores,
            selected=selected,
            weights=weights,
            n_experts=cfg.n_experts,
            top_k=cfg.top_k,
        )

    def combine(self, x: Tensor, routing: LayerRouting, slot_mask: np.ndarray | None = None) -> Tensor:
        """Weighted sum of selected expert outputs; masked slots contribute zero."""
        cfg = self.config
        n, k = routing.selected.shape
        pair_token = np.repeat(np.arange(n), k)
        pair_expert = routing.selected.reshape(-1)
        keep = np.ones(n * k, dtype=bool) if slot_mask is None else slot_mask.reshape(-1)
        weights_flat = dc.reshape(routing.weights, (n * k,))
        out = Tensor(np.zeros((n, cfg.d_model), np.float32))
        phi = cfg.activation
        for e in range(cfg.n_experts):
            sel = np.nonzero(keep & (pair_expert == e))[0]
            if sel.size == 0:
                continue
            rows = pair_token[sel]
            xe = dc.gather_rows(x, rows)
            ex = self.experts[e]
            ye = ffn_forward(xe, ex["W1"], ex["b1"], ex["W2"], ex["b2"], phi)
            we = dc.gather_rows(weights_flat, sel)
            out = dc.add(out, dc.index_add(n, rows, dc.scale_rows(ye, we)))
        return out

    def forward(
        self,
        x: Tensor,
        noise_sigma: float | None = None,
        rng: dc.RngState | None = None,
        slot_mask: np.ndarray | None = None,
    ) -> tuple[Tensor, LayerRouting]:
        routing = self.route_tokens(x, noise_sigma=noise_sigma, rng=rng)
        return self.combine(x, routing, slot_mask=slot_mask), routing


def route(x: Tensor, router_Wg: Tensor, k: int, noise_sigma: float | None = None, rng: dc.RngState | None = None,
          token_id: tuple = (0, 0), layer_id: int = 0) -> RoutingRecord:
    """Single-token routing: full softmax scores plus top-k slots."""
    n_experts = router_Wg.shape[0]
    if not 1 <= k <= n_experts:
        raise ValueError(f"k={k} outside [1, {n_experts}]")
    logits = dc.matmul(dc.reshape(x, (1, -1)), dc.transpose(router_Wg))
    if noise_sigma:
        if rng is None:
            raise ValueError("routing noise requires an RngState")
        logits = dc.add(logits, Tensor(rng.normal(logits.shape, sigma=noise_sigma)))
    scores = dc.softmax(logits, axis=-1)
    selected, _ = dc.topk(scores.data[0], k)
    return RoutingRecord(
        token_id=token_id,
        scores=scores.data[0].copy(),
        selected=selected,
        weights=scores.data[0][selected].copy(),
        layer_id=layer_id,
    )


def moe_forward(x: Tensor, experts: list[dict[str, Tensor]], record: RoutingRecord,
                mask: np.ndarray | None = None, activation: str = "gelu") -> Tensor:
    """Single-token MoE output: sum of weight_i * expert_i(x) over retained slots.

    With every slot masked the result is the zero vector; the residual path
    is the caller's responsibility.
    """
    if record.selected.max(initial=-1) >= len(experts):
        raise ConfigError("routing record refers to a missing expert")
    d_model = x.shape[-1]
    out = Tensor(np.zeros(d_model, np.float32))
    for slot, (e, w) in enumerate(zip(record.selected, record.weights)):
        if mask is not None and not mask[slot]:
            continue
        ex = experts[e]
        y = ffn_forward(x, ex["W1"], ex["b1"], ex["W2"], ex["b2"], activation)
        out = dc.add(out, dc.mul(y, float(w)))
    return out


def save_params(params: dict[str, Tensor], path) -> None:
    """JSON checkpoint of named tensors; float32 values round-trip bit-exactly."""
    blob = {
        name: {"shape": list(t.shape), "data": [float(v) for v in t.data.reshape(-1)]}
        for name, t in params.items()
    }
    with open(path, "w") as f:
        json.dump(blob, f)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path) as f:
        blob = json.load(f)
    return {
        name: np.asarray(rec["data"], dtype=np.float32).reshape(rec["shape"])
        for name, rec in blob.items()
    }
