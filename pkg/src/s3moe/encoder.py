"""Modality-specific transformer encoders with MoE feed-forward blocks.

Each layer is pre-LN: x += MHA(LN(x)); x += MoE(LN(x)). Sample embeddings
are the mean-pooled, l2-normalized final-layer token states. Routing
records double as the concept-space view: expert index = concept, and a
concept's activation mass is the routing weight aggregated over tokens
and MoE layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .moe import LayerRouting, MoEConfig, MoELayer, RoutingRecord


class NotShareableError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int
    n_heads: int
    d_in: int
    moe: MoEConfig
    n_layers: int = 5
    pooling: str = "mean"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.moe.d_model != self.d_model:
            raise ValueError("moe config width must match encoder width")
        if self.pooling != "mean":
            raise ValueError("only mean pooling is supported")


@dataclass
class SampleEmbedding:
    z: np.ndarray
    modality_id: int
    routing: list[RoutingRecord] = field(default_factory=list)


@dataclass
class ConceptActivation:
    active_set: list[int]
    masses: np.ndarray


@dataclass
class EncodedBatch:
    """Batch of pooled embeddings plus per-layer routing state."""

    z: Tensor
    modality_id: int
    records: list[LayerRouting]
    batch_size: int
    seq_len: int

    def sample(self, i: int) -> SampleEmbedding:
        recs = []
        for layer_rec in self.records:
            for t in range(self.seq_len):
                rec = layer_rec.record_for_token(i * self.seq_len + t)
                rec.token_id = (i, t)
                recs.append(rec)
        return SampleEmbedding(z=self.z.data[i].copy(), modality_id=self.modality_id, routing=recs)


def sinusoidal_positions(seq_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(seq_len)[:, None].astype(np.float64)
    dim = np.arange(d_model)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d_model)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc.astype(np.float32)


class ModalityEncoder:
    """Stack of MHA+MoE layers for one modality."""

    def __init__(self, config: EncoderConfig, rng: dc.RngState, modality_id: int = 0):
        self.config = config
        self.modality_id = modality_id
        d, d_in = config.d_model, config.d_in
        r = rng.stream(1000)
        self.input_proj = {
            "W": Tensor(r.normal((d, d_in), sigma=1.0 / np.sqrt(d_in)), requires_grad=True),
            "b": Tensor(np.zeros(d, np.float32), requires_grad=True),
        }
        self.layers = []
        for li in range(config.n_layers):
            lr = rng.stream(li)
            attn = {
                name: Tensor(lr.normal((d, d), sigma=1.0 / np.sqrt(d)), requires_grad=True)
                for name in ("Wq", "Wk", "Wv", "Wo")
            }
            for name in ("bq", "bk", "bv", "bo"):
                attn[name] = Tensor(np.zeros(d, np.float32), requires_grad=True)
            ln = lambda: {
                "g": Tensor(np.ones(d, np.float32), requires_grad=True),
                "b": Tensor(np.zeros(d, np.float32), requires_grad=True),
            }
            self.layers.append(
                {"ln1": ln(), "attn": attn, "ln2": ln(), "moe": MoELayer(config.moe, lr.stream(99), layer_id=li, modality=modality_id)}
            )

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {
            f"{prefix}input_proj/W": self.input_proj["W"],
            f"{prefix}input_proj/b": self.input_proj["b"],
        }
        for li, layer in enumerate(self.layers):
            base = f"{prefix}layer{li}/"
            for k, v in layer["ln1"].items():
                out[f"{base}ln1/{k}"] = v
            for k, v in layer["attn"].items():
                out[f"{base}attn/{k}"] = v
            for k, v in layer["ln2"].items():
                out[f"{base}ln2/{k}"] = v
            out.update(layer["moe"].named_params(f"{base}moe/"))
        return out

    def _mha(self, x: Tensor) -> Tensor:
        cfg = self.config
        b, t, d = x.shape
        h = cfg.n_heads
        dh = d // h
        layer = self._current["attn"]
        flat = dc.reshape(x, (b * t, d))

        def heads(w, bias):
            y = dc.add(dc.matmul(flat, dc.transpose(layer[w])), layer[bias])
            return dc.reshape(dc.transpose(dc.reshape(y, (b, t, h, dh)), (0, 2, 1, 3)), (b * h, t, dh))

        q = heads("Wq", "bq")
        k = heads("Wk", "bk")
        v = heads("Wv", "bv")
        att = dc.softmax(dc.mul(dc.matmul(q, dc.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh)), axis=-1)
        ctx = dc.matmul(att, v)
        ctx = dc.reshape(dc.transpose(dc.reshape(ctx, (b, h, t, dh)), (0, 2, 1, 3)), (b * t, d))
        out = dc.add(dc.matmul(ctx, dc.transpose(layer["Wo"])), layer["bo"])
        return dc.reshape(out, (b, t, d))

    def encode(
        self,
        tokens: np.ndarray,
        train_noise_sigma: float | None = None,
        rng: dc.RngState | None = None,
        slot_masks: dict[int, np.ndarray] | None = None,
        input_jitter: float = 0.0,
    ) -> EncodedBatch:
        """Encode (B, T, d_in) raw tokens into unit embeddings (B, d_model)."""
        tokens = np.asarray(tokens, dtype=np.float32)
        if tokens.ndim != 3 or tokens.shape[1] == 0:
            raise dc.DegenerateInputError("encode: expected nonempty (B, T, d_in) tokens")
        b, t, _ = tokens.shape
        cfg = self.config
        if input_jitter:
            if rng is None:
                raise ValueError("input jitter requires an RngState")
            tokens = tokens + rng.normal(tokens.shape, sigma=input_jitter)
        flat = dc.matmul(Tensor(tokens.reshape(b * t, -1)), dc.transpose(self.input_proj["W"]))
        flat = dc.add(flat, self.input_proj["b"])
        x = dc.reshape(flat, (b, t, cfg.d_model))
        pos = sinusoidal_positions(t, cfg.d_model)
        x = dc.add(x, Tensor(np.broadcast_to(pos, (b, t, cfg.d_model)).copy()))
        records: list[LayerRouting] = []
        for li, layer in enumerate(self.layers):
            self._current = layer
            x = dc.add(x, self._mha(dc.layer_norm(x, layer["ln1"]["g"], layer["ln1"]["b"])))
            normed = dc.reshape(dc.layer_norm(x, layer["ln2"]["g"], layer["ln2"]["b"]), (b * t, cfg.d_model))
            mask = slot_masks.get(li) if slot_masks else None
            moe_out, routing = layer["moe"].forward(
                normed, noise_sigma=train_noise_sigma, rng=rng.stream(7000 + li) if rng else None, slot_mask=mask
            )
            routing.token_ids = [(i // t, i % t) for i in range(b * t)]
            records.append(routing)
            x = dc.add(x, dc.reshape(moe_out, (b, t, cfg.d_model)))
        pooled = dc.mean(x, axis=1)
        z = dc.l2_normalize(pooled, axis=-1)
        return EncodedBatch(z=z, modality_id=self.modality_id, records=records, batch_size=b, seq_len=t)


def parameter_group(name: str) -> str:
    """Freezing-contract partition of a parameter name."""
    if "/router/" in name:
        return "routers"
    if "/expert" in name:
        return "experts"
    if "input_proj" in name:
        return "input_proj"
    return "attention"


def active_concepts(emb: SampleEmbedding, epsilon: float, n_experts: int | None = None) -> ConceptActivation:
    """Experts whose routing mass (mean over tokens and MoE layers) exceeds epsilon."""
    if not emb.routing:
        raise ValueError("sample embedding carries no routing records")
    if n_experts is None:
        n_experts = len(emb.routing[0].scores)
    masses = np.zeros(n_experts, dtype=np.float64)
    for rec in emb.routing:
        for e, w in zip(rec.selected, rec.weights):
            masses[e] += w
    masses /= len(emb.routing)
    active = [int(c) for c in np.nonzero(masses > epsilon)[0]]
    return ConceptActivation(active_set=active, masses=masses.astype(np.float32))


def _concept_histogram(acts: list[ConceptActivation], concept: int, bins: int) -> np.ndarray:
    vals = [a.masses[concept] for a in acts if concept in a.active_set]
    if not vals:
        return np.zeros(bins)
    hist, _ = np.histogram(np.clip(vals, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return hist / hist.sum()


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats (max ln 2)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def dsc_divergence(
    acts_m1: list[ConceptActivation], acts_m2: list[ConceptActivation], concept: int, bins: int = 16
) -> float:
    """Cross-modal divergence of a concept's activation-mass distribution.

    Jensen-Shannon over `bins`-bin histograms of per-sample mass on [0, 1],
    restricted to samples where the concept is active. Zero iff the two
    histograms agree.
    """
    h1 = _concept_histogram(acts_m1, concept, bins)
    h2 = _concept_histogram(acts_m2, concept, bins)
    if h1.sum() == 0 or h2.sum() == 0:
        raise NotShareableError(f"concept {concept} has no active samples in one or both modalities")
    return js_divergence(h1, h2)
