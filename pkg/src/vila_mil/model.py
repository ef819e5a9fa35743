"""Dual-scale vision-language MIL model: forward pass, fusion, variants, explain."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Bag, ConfigError, rng_for
from .decoders import (PoolingParams, QKVProjection, attention_pool,
                       context_attention, prototype_attention,
                       self_attention_pool)
from .tensor import (Tensor, add, cosine_matrix, cross_entropy, mean_rows,
                     scale, softmax_rows, topk_mean_rows)
from .text import SCALES, PromptSet, encode_class_prompts

log = logging.getLogger(__name__)

AGGREGATORS = ("prototype_decoder", "mean_pool", "attention_pool", "self_attention_pool", "abmil")
FUSIONS = ("logit_summation", "feature_summation")
SIMILARITIES = ("bag_level", "instance_max", "instance_mean", "instance_topk")


@dataclass
class ModelConfig:
    d: int = 64
    n_prototypes: int = 16
    n_context: int = 16
    tau: float = 1.0
    alpha_low: float = 1.0
    alpha_high: float = 1.0
    aggregator: str = "prototype_decoder"
    fusion: str = "logit_summation"
    similarity: str = "bag_level"
    topk: int | None = None
    text_decoder: bool = True
    text_layer_norm: bool = False
    prototype_layers: int = 1
    projected_qkv: bool = False
    prototype_init_std: float = 0.02
    context_init_std: float = 1.0
    descriptions: str | None = None
    vocab_seed: int = 0
    encoder_seed: int = 0
    seed: int = 0

    def validate(self) -> None:
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(self.d >= 2, "d", "must be >= 2")
        need(self.n_prototypes >= 1, "n_prototypes", "must be >= 1")
        need(self.n_context >= 0, "n_context", "must be >= 0")
        need(self.tau > 0, "tau", "must be > 0")
        need(self.alpha_low >= 0 and self.alpha_high >= 0, "alpha_low", "alphas must be nonnegative")
        need(self.alpha_low + self.alpha_high > 0, "alpha_high", "alpha_low + alpha_high must be > 0")
        need(self.aggregator in AGGREGATORS, "aggregator", f"must be one of {AGGREGATORS}")
        need(self.fusion in FUSIONS, "fusion", f"must be one of {FUSIONS}")
        need(self.similarity in SIMILARITIES, "similarity", f"must be one of {SIMILARITIES}")
        need(self.topk is None or self.topk >= 1, "topk", "must be >= 1")
        need(self.prototype_layers >= 1, "prototype_layers", "must be >= 1")
        need(not (self.fusion == "feature_summation" and self.similarity != "bag_level"), "fusion",
             "feature summation needs bag-level similarity (instance similarity bypasses the slide feature)")

    @property
    def alpha_sum(self) -> float:
        return self.alpha_low + self.alpha_high

    def alpha(self, s: str) -> float:
        return self.alpha_low if s == "low" else self.alpha_high

    def active_scales(self) -> tuple[str, ...]:
        return tuple(s for s in SCALES if self.alpha(s) > 0)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown model config field")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ScaleDiagnostics:
    slide: Tensor | None
    text: Tensor
    text_refined: Tensor
    weights: Tensor | None
    raw_attention: Tensor | None
    cosines: Tensor
    probs: Tensor


@dataclass
class ForwardDiagnostics:
    P: Tensor
    scales: dict[str, ScaleDiagnostics] = field(default_factory=dict)

    @property
    def probs(self) -> np.ndarray:
        return self.P.data[0]


def default_topk(n: int) -> int:
    return max(1, math.ceil(0.1 * n))


class ViLaMIL:
    def __init__(self, config: ModelConfig, class_names):
        config.validate()
        self.config = config
        self.class_names = list(class_names)
        d = config.d
        self.prompts = PromptSet.build(self.class_names, d, config.n_context, config.descriptions,
                                       config.vocab_seed, config.encoder_seed, config.seed, config.context_init_std)
        self.prototypes: dict[str, Tensor] = {}
        self.pooling: dict[str, PoolingParams] = {}
        self.qkv: dict[str, QKVProjection] = {}
        for i, s in enumerate(SCALES):
            rng = rng_for(config.seed, "scale-params", i)
            self.prototypes[s] = Tensor(rng.standard_normal((config.n_prototypes, d)) * config.prototype_init_std,
                                        requires_grad=True, name=f"prototypes_{s}")
            self.pooling[s] = PoolingParams.init(d, rng, f"_{s}")
            if config.projected_qkv:
                self.qkv[s] = QKVProjection.init(d, rng, f"_{s}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    # ---------------------------------------------------------- parameters

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for s in SCALES:
            out[f"prototypes_{s}"] = self.prototypes[s]
            for k, t in self.pooling[s].tensors().items():
                out[f"{k}_{s}"] = t
            if s in self.qkv:
                for k, t in self.qkv[s].tensors().items():
                    out[f"{k}_{s}"] = t
        out.update(self.prompts.parameters())
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise ValueError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data[...] = state[k]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, t in sorted(self.parameters().items()):
            h.update(k.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def to_json(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "class_names": self.class_names,
            "params": {k: t.data.tolist() for k, t in sorted(self.parameters().items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ViLaMIL":
        model = cls(ModelConfig.from_dict(doc["config"]), doc["class_names"])
        model.load_state({k: np.array(v, dtype=np.float64) for k, v in doc["params"].items()})
        return model

    def save(self, path) -> None:
        from .data import atomic_write_bytes
        atomic_write_bytes(path, json.dumps(self.to_json()).encode())

    @classmethod
    def load(cls, path) -> "ViLaMIL":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    # ---------------------------------------------------------- forward

    def _features(self, bag: Bag, s: str) -> Tensor:
        H = bag.H_l if s == "low" else bag.H_h
        if H.shape[1] != self.config.d:
            raise ValueError(f"bag {bag.id}: feature dim {H.shape[1]} != model d {self.config.d}")
        return Tensor._from_op(H)

    def aggregate(self, H: Tensor, s: str, need_slide: bool = True):
        """Slide feature, context prototypes, prototype weights and raw map for one scale."""
        cfg = self.config
        if cfg.aggregator == "prototype_decoder":
            updated, raw = prototype_attention(self.prototypes[s], H, cfg.prototype_layers, self.qkv.get(s))
            if not need_slide:
                return None, updated, None, raw
            S, A = attention_pool(updated, self.pooling[s])
            return S, updated, A, raw
        return baseline_aggregate(H, cfg.aggregator, self.pooling[s]), None, None, None

    def _scale_forward(self, bag: Bag, s: str) -> ScaleDiagnostics:
        cfg = self.config
        H = self._features(bag, s)
        bag_level = cfg.similarity == "bag_level"
        S, context_protos, A, raw = self.aggregate(H, s, need_slide=bag_level)
        D = encode_class_prompts(self.prompts, s)
        Dr = context_attention(D, context_protos, H, cfg.text_layer_norm) if cfg.text_decoder else D
        if bag_level:
            cos = cosine_matrix(S, Dr)
        else:
            per_patch = cosine_matrix(H, Dr)
            if cfg.similarity == "instance_mean":
                cos = mean_rows(per_patch)
            else:
                n = H.shape[0]
                k = 1 if cfg.similarity == "instance_max" else (cfg.topk or default_topk(n))
                if k > n:
                    log.warning("top-k %d exceeds %d patches; clamping", k, n)
                    k = n
                cos = topk_mean_rows(per_patch, k)
        probs = softmax_rows(scale(cos, 1.0 / cfg.tau))
        return ScaleDiagnostics(S, D, Dr, A, raw, cos, probs)

    def forward(self, bag: Bag) -> ForwardDiagnostics:
        """Fused class scores P (row sums to alpha_low + alpha_high).

        Scales whose alpha is zero are never evaluated.
        """
        cfg = self.config
        if cfg.fusion == "feature_summation":
            return self._feature_summation(bag)
        diags = {s: self._scale_forward(bag, s) for s in cfg.active_scales()}
        P = None
        for s, dg in diags.items():
            term = scale(dg.probs, cfg.alpha(s))
            P = term if P is None else add(P, term)
        return ForwardDiagnostics(P, diags)

    def _feature_summation(self, bag: Bag) -> ForwardDiagnostics:
        cfg = self.config
        S_sum = D_sum = None
        diags = {}
        for s in cfg.active_scales():
            H = self._features(bag, s)
            S, protos, A, raw = self.aggregate(H, s)
            D = encode_class_prompts(self.prompts, s)
            Dr = context_attention(D, protos, H, cfg.text_layer_norm) if cfg.text_decoder else D
            S_sum = S if S_sum is None else add(S_sum, S)
            D_sum = Dr if D_sum is None else add(D_sum, Dr)
            diags[s] = (S, D, Dr, A, raw)
        cos = cosine_matrix(S_sum, D_sum)
        probs = softmax_rows(scale(cos, 1.0 / cfg.tau))
        out = {s: ScaleDiagnostics(S, D, Dr, A, raw, cos, probs) for s, (S, D, Dr, A, raw) in diags.items()}
        return ForwardDiagnostics(scale(probs, cfg.alpha_sum), out)

    def loss(self, P: Tensor, label: int) -> Tensor:
        return normalize_and_loss(P, label, self.config.alpha_sum)

    def predict_proba(self, bag: Bag) -> np.ndarray:
        return self.forward(bag).probs / self.config.alpha_sum

    def explain(self, bag: Bag) -> dict:
        """Assign each high-scale patch to its highest-attention prototype.

        Patches sharing the prototype that carries the largest pooling weight
        are flagged.
        """
        if self.config.aggregator != "prototype_decoder":
            raise ValueError(f"explain needs the prototype decoder, model uses {self.config.aggregator!r}")
        H = self._features(bag, "high")
        _, _, A, raw = self.aggregate(H, "high")
        assigned = np.argmax(raw.data, axis=0)
        rep = int(np.argmax(A.data[0]))
        return {
            "bag_id": bag.id,
            "scale": "high",
            "assignments": [{"patch": j, "prototype": int(p), "flagged": bool(p == rep)}
                            for j, p in enumerate(assigned)],
            "representative_prototype": rep,
        }


def baseline_aggregate(H: Tensor, mode: str, params: PoolingParams | None = None) -> Tensor:
    """Slide feature from patch rows for the non-prototype aggregators."""
    if mode == "mean_pool":
        return mean_rows(H)
    if mode in ("attention_pool", "abmil"):
        return attention_pool(H, params)[0]
    if mode == "self_attention_pool":
        return self_attention_pool(H)
    raise ValueError(f"unknown baseline aggregator {mode!r}")


def normalize_and_loss(P: Tensor, label: int, alpha_sum: float) -> Tensor:
    return cross_entropy(scale(P, 1.0 / alpha_sum), label)


def predict(P) -> int:
    """Highest-score class, lowest index on ties."""
    arr = P.data[0] if isinstance(P, Tensor) else np.asarray(P, dtype=np.float64).reshape(-1)
    return int(np.argmax(arr))


def single_scale_config(config: ModelConfig, scale_name: str) -> ModelConfig:
    if scale_name not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}")
    other = "alpha_high" if scale_name == "low" else "alpha_low"
    return dataclasses.replace(config, **{other: 0.0})


def single_scale_forward(model: ViLaMIL, bag: Bag, scale_name: str) -> ForwardDiagnostics:
    saved = model.config
    model.config = single_scale_config(saved, scale_name)
    try:
        return model.forward(bag)
    finally:
        model.config = saved


def feature_summation_forward(model: ViLaMIL, bag: Bag) -> ForwardDiagnostics:
    saved = model.config
    model.config = dataclasses.replace(saved, fusion="feature_summation", similarity="bag_level")
    try:
        return model.forward(bag)
    finally:
        model.config = saved


def instance_similarity(model: ViLaMIL, bag: Bag, mode: str, k: int | None = None) -> Tensor:
    """Fused P from per-patch similarities pooled by ``max``/``mean``/``topk``."""
    names = {"max": "instance_max", "mean": "instance_mean", "topk": "instance_topk"}
    if mode not in names:
        raise ValueError(f"mode must be one of {tuple(names)}")
    saved = model.config
    model.config = dataclasses.replace(saved, similarity=names[mode], fusion="logit_summation",
                                       topk=k if k is not None else saved.topk)
    try:
        return model.forward(bag).P
    finally:
        model.config = saved
