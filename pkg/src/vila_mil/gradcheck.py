"""Finite-difference verification of every primitive and of the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Bag
from .model import ModelConfig, ViLaMIL
from .tensor import Tape, Tensor, backward, numerical_grad, relative_error


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(out, Tensor._from_op(w)))


# each entry: (input shapes, op) — inputs drawn uniformly from [-2, 2]
OP_CASES: dict[str, tuple[list[tuple[int, int]], Callable[..., Tensor]]] = {
    "matmul": ([(3, 4), (4, 2)], T.matmul),
    "add": ([(3, 4), (3, 4)], T.add),
    "add_row_broadcast": ([(3, 4), (1, 4)], T.add),
    "sub": ([(3, 4), (3, 4)], T.sub),
    "mul": ([(3, 4), (3, 4)], T.mul),
    "mul_col_broadcast": ([(3, 1), (3, 4)], T.mul),
    "scale": ([(3, 4)], lambda x: T.scale(x, -1.7)),
    "tanh_elem": ([(3, 4)], T.tanh_elem),
    "softmax_rows": ([(3, 5)], T.softmax_rows),
    "layer_norm_rows": ([(3, 5)], T.layer_norm_rows),
    "concat_rows": ([(2, 3), (1, 3)], T.concat_rows),
    "mean_rows": ([(4, 3)], T.mean_rows),
    "sum_all": ([(3, 3)], T.sum_all),
    "transpose": ([(2, 5)], T.transpose),
    "take_rows": ([(4, 3)], lambda x: T.take_rows(x, [2, 0, 2])),
    "topk_mean_rows": ([(6, 3)], lambda x: T.topk_mean_rows(x, 2)),
    "cosine_matrix": ([(3, 4), (2, 4)], T.cosine_matrix),
    "cosine_rows": ([(1, 4), (1, 4)], T.cosine_rows),
    "cross_entropy": ([(1, 4)], lambda x: T.cross_entropy(T.softmax_rows(x), 2)),
}


def check_op(name: str, rng: np.random.Generator, h: float = 1e-6) -> float:
    shapes, op = OP_CASES[name]
    inputs = [Tensor(rng.uniform(-2, 2, size=s), requires_grad=True) for s in shapes]
    w = rng.uniform(-1, 1, size=op(*inputs).shape)

    def f() -> float:
        return _weighted_sum(op(*inputs), w).item()

    with Tape():
        loss = _weighted_sum(op(*inputs), w)
    backward(loss)
    return max(relative_error(x.grad, numerical_grad(f, x, h)) for x in inputs)


def check_ops(trials: int = 100, seed: int = 0, tolerance: float = 1e-5) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [CheckResult(name, max(check_op(name, rng) for _ in range(trials)), tolerance) for name in OP_CASES]


def tiny_setup(seed: int = 0, n_patches: int = 5, **overrides) -> tuple[ViLaMIL, Bag]:
    """d=8, N_p=2, C=2, M=2 model with a random 5-patch-per-scale bag."""
    cfg = dict(d=8, n_prototypes=2, n_context=2, tau=0.5, seed=seed)
    cfg.update(overrides)
    model = ViLaMIL(ModelConfig(**cfg), ["lung adenocarcinoma", "lung squamous cell carcinoma"])
    rng = np.random.default_rng(seed + 1000)
    bag = Bag("tiny", 1, rng.standard_normal((n_patches, cfg["d"])), rng.standard_normal((n_patches, cfg["d"])))
    return model, bag


def check_model(model: ViLaMIL, bag: Bag, h: float = 1e-4, tolerance: float = 1e-4) -> list[CheckResult]:
    """Analytic vs central-difference gradient for every parameter group."""

    def f() -> float:
        return model.loss(model.forward(bag).P, bag.label).item()

    model.zero_grad()
    with Tape():
        loss = model.loss(model.forward(bag).P, bag.label)
    backward(loss)
    out = []
    for name, p in model.parameters().items():
        analytic = p.grad.copy()
        out.append(CheckResult(name, relative_error(analytic, numerical_grad(f, p, h)), tolerance))
    return out


def run_suite(op_trials: int = 5, seed: int = 0) -> dict:
    ops = check_ops(op_trials, seed)
    model, bag = tiny_setup(seed)
    groups = check_model(model, bag)
    return {
        "ops": {r.name: {"max_rel_error": r.max_rel_error, "passed": r.passed} for r in ops},
        "parameter_groups": {r.name: {"max_rel_error": r.max_rel_error, "passed": r.passed} for r in groups},
        "failed": [r.name for r in ops + groups if not r.passed],
        "passed": all(r.passed for r in ops + groups),
    }
