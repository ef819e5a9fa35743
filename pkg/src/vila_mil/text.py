"""Frozen text-encoder stub and dual-scale prompt assembly.

A description is tokenised on whitespace/punctuation; each token maps to a
fixed Gaussian row drawn from a PCG64 stream seeded by ``(vocab_seed,
blake2b-64(token))``. A class prompt is the scale's shared trainable context
rows followed by those frozen token rows. The encoder mean-pools the prompt
rows, applies a fixed random projection and layer-normalises the result.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .data import ConfigError, rng_for
from .tensor import (Tensor, add, concat_rows, layer_norm_rows, matmul,
                     mean_rows, mul)

SCALES = ("low", "high")
_TOKEN = re.compile(r"\w+")

BUILTIN_DESCRIPTIONS = ("renal", "lung")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def token_hash(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def token_row(token: str, vocab_seed: int, d: int) -> np.ndarray:
    return np.random.default_rng([int(vocab_seed), token_hash(token)]).standard_normal(d)


def embed_description(sentences, vocab_seed: int, d: int) -> np.ndarray:
    """Frozen (L, d) token embeddings for a list of sentences, order preserved."""
    if isinstance(sentences, str):
        sentences = [sentences]
    tokens = [t for s in sentences for t in tokenize(s)]
    if not tokens:
        raise ConfigError("descriptions", "description text has no tokens")
    return np.stack([token_row(t, vocab_seed, d) for t in tokens])


def load_descriptions(source) -> dict[str, dict[str, list[str]]]:
    """Load a description config by builtin name (``renal``/``lung``) or path."""
    if isinstance(source, dict):
        doc = source
    elif str(source) in BUILTIN_DESCRIPTIONS:
        doc = json.loads(resources.files("vila_mil.assets").joinpath(f"{source}.json").read_text())
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError("descriptions", f"no builtin or file named {source!r}")
        doc = json.loads(path.read_text())
    for name, per_scale in doc.items():
        for s in SCALES:
            if not per_scale.get(s):
                raise ConfigError("descriptions", f"class {name!r} has no {s}-scale sentences")
    return doc


def descriptions_for(class_names, source=None) -> dict[str, dict[str, list[str]]]:
    """Pick sentences for each class, searching builtin assets when unset.

    Classes missing from every source fall back to a one-line template.
    """
    pools = [load_descriptions(source)] if source is not None else [load_descriptions(n) for n in BUILTIN_DESCRIPTIONS]
    out = {}
    for name in class_names:
        for pool in pools:
            if name in pool:
                out[name] = pool[name]
                break
        else:
            if source is not None:
                raise ConfigError("descriptions", f"class {name!r} not found in {source!r}")
            out[name] = {s: [f"a {s} magnification whole slide image of {name}"] for s in SCALES}
    return out


class FrozenTextEncoder:
    def __init__(self, d: int, seed: int = 0):
        self.d = d
        self.seed = seed
        proj = rng_for(seed, "text-encoder").standard_normal((d, d)) / np.sqrt(d)
        proj.flags.writeable = False
        self._proj = Tensor._from_op(proj)

    @property
    def projection(self) -> np.ndarray:
        return self._proj.data

    def checksum(self) -> str:
        return hashlib.sha256(self._proj.data.tobytes()).hexdigest()

    def encode_text(self, seq: Tensor) -> Tensor:
        if seq.shape[0] < 1:
            raise ValueError("encode_text needs at least one token row")
        return layer_norm_rows(matmul(mean_rows(seq), self._proj))

    def encode_pooled(self, pooled: Tensor) -> Tensor:
        return layer_norm_rows(matmul(pooled, self._proj))


def assemble_prompt(context: Tensor | None, tokens: Tensor) -> Tensor:
    """Context rows first, then the description token rows."""
    if context is None or context.shape[0] == 0:
        return tokens
    if context.shape[1] != tokens.shape[1]:
        raise ValueError(f"context dim {context.shape[1]} != token dim {tokens.shape[1]}")
    return concat_rows(context, tokens)


@dataclass
class PromptSet:
    class_names: list[str]
    encoder: FrozenTextEncoder
    context: dict[str, Tensor | None]
    tokens: dict[str, list[Tensor]]
    _token_means: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    _token_counts: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for s in SCALES:
            self._token_means[s] = np.concatenate([t.data.mean(axis=0, keepdims=True) for t in self.tokens[s]])
            self._token_counts[s] = np.array([[t.shape[0]] for t in self.tokens[s]], dtype=np.float64)

    @property
    def n_context(self) -> int:
        ctx = self.context["low"]
        return 0 if ctx is None else ctx.shape[0]

    @classmethod
    def build(cls, class_names, d: int, n_context: int = 16, descriptions=None, vocab_seed: int = 0,
              encoder_seed: int = 0, context_seed: int = 0, context_init_std: float = 0.02) -> "PromptSet":
        desc = descriptions_for(class_names, descriptions)
        encoder = FrozenTextEncoder(d, encoder_seed)
        tokens = {s: [Tensor._from_op(embed_description(desc[n][s], vocab_seed, d)) for n in class_names]
                  for s in SCALES}
        context = {}
        for i, s in enumerate(SCALES):
            if n_context > 0:
                init = rng_for(context_seed, "context", i).standard_normal((n_context, d)) * context_init_std
                context[s] = Tensor(init, requires_grad=True, name=f"context_{s}")
            else:
                context[s] = None
        return cls(list(class_names), encoder, context, tokens)

    def prompt(self, scale: str, cls_index: int) -> Tensor:
        return assemble_prompt(self.context[scale], self.tokens[scale][cls_index])

    def parameters(self) -> dict[str, Tensor]:
        return {f"context_{s}": t for s, t in self.context.items() if t is not None}


def encode_class_prompts(prompts: PromptSet, scale: str) -> Tensor:
    """(C, d) text features, row i = encode_text(assemble_prompt(V_s, E_i)).

    Uses the identity mean([V; E]) = (M mean(V) + L mean(E)) / (M + L) so all
    classes go through the encoder in one batch.
    """
    enc = prompts.encoder
    means = prompts._token_means[scale]
    ctx = prompts.context[scale]
    if ctx is None:
        return enc.encode_pooled(Tensor._from_op(means))
    M = ctx.shape[0]
    L = prompts._token_counts[scale]
    w_ctx = Tensor._from_op(M / (M + L))
    token_part = Tensor._from_op(means * (L / (M + L)))
    pooled = add(mul(w_ctx, mean_rows(ctx)), token_part)
    return enc.encode_pooled(pooled)


def encode_class_prompts_reference(prompts: PromptSet, scale: str) -> Tensor:
    rows = [prompts.encoder.encode_text(prompts.prompt(scale, i)) for i in range(len(prompts.class_names))]
    return concat_rows(*rows)
