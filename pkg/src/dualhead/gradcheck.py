"""Finite-difference verification of every op and loss gradient.

The oracle is central differences with eps = 1e-6 on float64 values,
compared coordinate by coordinate against the backward pass. The
comparison is relative above a small magnitude floor and absolute below
it (FD noise for a loss of size f is about f * 1e-10 at this eps, so
near-zero true gradients would otherwise drown in cancellation noise).

Loss cases differentiate through a real model (encoder, classifier,
projector), so a broken backward rule anywhere in the chain surfaces
here. Op and loss builders call their targets through module attributes,
which lets a test inject a corrupted rule and confirm it is caught.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import losses as losses_mod
from . import model as model_mod
from . import ndgrad as nd
from .keypool import KeyBatch
from .model import ModelDims
from .ndgrad import Tensor

EPS = 1e-6
TOLERANCE = 1e-4
REL_FLOOR = 1e-2


def relative_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def analytic_gradients(forward: Callable[[], Tensor], wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Run backward once and collect gradients for the given leaves."""
    loss = forward()
    loss.backward()
    grads = []
    for t in wrt:
        grads.append(t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        t.zero_grad()
    return grads


def finite_difference(forward: Callable[[], Tensor], t: Tensor, eps: float = EPS) -> np.ndarray:
    """Central-difference gradient of forward() w.r.t. one leaf tensor."""
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = forward().item()
        flat[i] = orig - eps
        f_minus = forward().item()
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(t.data.shape)


def worst_relative_error(
    forward: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    eps: float = EPS,
    floor: float = REL_FLOOR,
) -> float:
    """Max disagreement between backward and central differences."""
    analytic = analytic_gradients(forward, wrt)
    worst = 0.0
    for t, ana in zip(wrt, analytic):
        num = finite_difference(forward, t, eps)
        for a, n in zip(ana.reshape(-1), num.reshape(-1)):
            worst = max(worst, relative_error(float(a), float(n), floor))
    return worst


# ---------------------------------------------------------------------------
# op cases: each builds (forward, leaves) over random data; the scalar head
# weights the op output by a fixed random matrix so every entry matters.


def _head(out: Tensor, weights: np.ndarray) -> Tensor:
    return nd.sum(nd.mul(out, Tensor(weights)))


def _case_matmul(rng):
    a = Tensor(rng.normal(size=(3, 4)), grad_enabled=True)
    b = Tensor(rng.normal(size=(4, 2)), grad_enabled=True)
    r = rng.normal(size=(3, 2))
    return lambda: _head(nd.matmul(a, b), r), [a, b]


def _case_transpose(rng):
    a = Tensor(rng.normal(size=(3, 5)), grad_enabled=True)
    r = rng.normal(size=(5, 3))
    return lambda: _head(nd.transpose(a), r), [a]


def _case_add(rng):
    a = Tensor(rng.normal(size=(3, 4)), grad_enabled=True)
    b = Tensor(rng.normal(size=(3, 4)), grad_enabled=True)
    r = rng.normal(size=(3, 4))
    return lambda: _head(nd.add(a, b), r), [a, b]


def _case_add_bias(rng):
    a = Tensor(rng.normal(size=(3, 4)), grad_enabled=True)
    b = Tensor(rng.normal(size=4), grad_enabled=True)
    r = rng.normal(size=(3, 4))
    return lambda: _head(nd.add(a, b), r), [a, b]


def _case_mul(rng):
    a = Tensor(rng.normal(size=(2, 5)), grad_enabled=True)
    b = Tensor(rng.normal(size=(2, 5)), grad_enabled=True)
    r = rng.normal(size=(2, 5))
    return lambda: _head(nd.mul(a, b), r), [a, b]


def _case_scale_by_scalar(rng):
    a = Tensor(rng.normal(size=(3, 3)), grad_enabled=True)
    s = float(rng.normal())
    r = rng.normal(size=(3, 3))
    return lambda: _head(nd.scale_by_scalar(a, s), r), [a]


def _case_relu(rng):
    # Keep inputs away from the kink, where the subgradient is one-sided.
    raw = rng.normal(size=(3, 4))
    raw += np.where(raw >= 0, 0.05, -0.05)
    a = Tensor(raw, grad_enabled=True)
    r = rng.normal(size=(3, 4))
    return lambda: _head(nd.relu(a), r), [a]


def _case_sum(rng):
    a = Tensor(rng.normal(size=(2, 6)), grad_enabled=True)
    return lambda: nd.sum(a), [a]


def _case_mean(rng):
    a = Tensor(rng.normal(size=(4, 3)), grad_enabled=True)
    return lambda: nd.mean(a), [a]


def _case_select_rows(rng):
    a = Tensor(rng.normal(size=(5, 3)), grad_enabled=True)
    idx = rng.integers(0, 5, size=4)  # duplicates exercise accumulation
    r = rng.normal(size=(4, 3))
    return lambda: _head(nd.select_rows(a, idx), r), [a]


def _case_concat_rows(rng):
    a = Tensor(rng.normal(size=(2, 3)), grad_enabled=True)
    b = Tensor(rng.normal(size=(3, 3)), grad_enabled=True)
    r = rng.normal(size=(5, 3))
    return lambda: _head(nd.concat_rows([a, b]), r), [a, b]


def _case_row_l2_normalize(rng):
    a = Tensor(rng.normal(size=(2, 5)) + 0.5, grad_enabled=True)
    r = rng.normal(size=(2, 5))
    return lambda: _head(nd.row_l2_normalize(a), r), [a]


def _case_log_softmax_row(rng):
    a = Tensor(rng.normal(size=(3, 4)), grad_enabled=True)
    r = rng.normal(size=(3, 4))
    return lambda: _head(nd.log_softmax_row(a), r), [a]


OP_CASES: dict[str, Callable] = {
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "add": _case_add,
    "add_bias": _case_add_bias,
    "mul": _case_mul,
    "scale_by_scalar": _case_scale_by_scalar,
    "relu": _case_relu,
    "sum": _case_sum,
    "mean": _case_mean,
    "select_rows": _case_select_rows,
    "concat_rows": _case_concat_rows,
    "row_l2_normalize": _case_row_l2_normalize,
    "log_softmax_row": _case_log_softmax_row,
}


# ---------------------------------------------------------------------------
# loss cases: small random model, random unit key batches, gradients taken
# w.r.t. every model parameter.


def _unit_rows(rng, n: int, dim: int) -> np.ndarray:
    rows = rng.normal(size=(n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _random_key_batch(rng, k: int, d: int, L: int, c: int, slot0_label: int) -> KeyBatch:
    labels = np.concatenate([[slot0_label], rng.integers(0, c, size=k)]).astype(np.int64)
    return KeyBatch(
        h_keys=Tensor(_unit_rows(rng, k + 1, d)),
        z_keys=Tensor(_unit_rows(rng, k + 1, L)),
        labels=labels,
    )


def _loss_fixture(rng, tau: float = 0.07):
    dims = ModelDims(in_dim=3, hidden=(4,), feature_dim=6, class_count=3, projector_dim=5)
    params = model_mod.init_params(dims, rng)
    b = 2
    x = Tensor(rng.normal(size=(b, dims.in_dim)))
    y = rng.integers(0, dims.class_count, size=b).astype(np.int64)
    k = int(rng.integers(3, 9))
    kbs = [
        _random_key_batch(rng, k, dims.feature_dim, dims.projector_dim, dims.class_count, int(y[i]))
        for i in range(b)
    ]
    wrt = [t for _, t in params.named_parameters()]
    return params, x, y, kbs, tau, wrt


def _loss_case(kind: str):
    def build(rng):
        params, x, y, kbs, tau, wrt = _loss_fixture(rng)

        def forward() -> Tensor:
            h, z, logits = model_mod.forward_query(params, x)
            if kind == "ce":
                return losses_mod.ce(logits, y)
            if kind == "info_nce":
                q = nd.select_rows(z, [0])
                return losses_mod.info_nce(q, kbs[0], positive_index=1, tau=tau)
            if kind == "cce_literal":
                return losses_mod.cce(nd.row_l2_normalize(h), y, params.classifier_W, kbs, tau, variant="literal")
            if kind == "cce_per_key":
                return losses_mod.cce(nd.row_l2_normalize(h), y, params.classifier_W, kbs, tau, variant="per_key")
            if kind == "ccl":
                return losses_mod.ccl(z, y, kbs, tau)
            if kind == "joint_total":
                terms = losses_mod.LossTerms()
                terms.ce = losses_mod.ce(logits, y)
                terms.cce = losses_mod.cce(nd.row_l2_normalize(h), y, params.classifier_W, kbs, tau)
                terms.ccl = losses_mod.ccl(z, y, kbs, tau)
                return losses_mod.joint_total(terms)
            raise ValueError(kind)

        return forward, wrt

    return build


LOSS_CASES: dict[str, Callable] = {
    name: _loss_case(name)
    for name in ("ce", "info_nce", "cce_literal", "cce_per_key", "ccl", "joint_total")
}


@dataclass
class CheckResult:
    kind: str  # "op" or "loss"
    name: str
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


@dataclass
class GradcheckReport:
    results: list[CheckResult]
    instances: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            out.append(f"{r.kind:4s} {r.name:18s} max rel err {r.max_rel_err:.3e}  {status}")
        verdict = "all gradients verified" if self.passed else "GRADIENT CHECK FAILED"
        out.append(f"{len(self.results)} checks, {self.instances} instances each, tolerance {self.tolerance:g}: {verdict}")
        return out


def run_gradcheck(instances: int = 20, base_seed: int = 0, include_ops: bool = True) -> GradcheckReport:
    """Check every op and loss over the given number of random instances."""
    results: list[CheckResult] = []
    groups = ([("op", OP_CASES)] if include_ops else []) + [("loss", LOSS_CASES)]
    for kind, cases in groups:
        for name, builder in cases.items():
            worst = 0.0
            for i in range(instances):
                rng = np.random.default_rng(base_seed + i)
                forward, wrt = builder(rng)
                worst = max(worst, worst_relative_error(forward, wrt))
            results.append(CheckResult(kind=kind, name=name, max_rel_err=worst))
    return GradcheckReport(results=results, instances=instances)
