"""Autodiff vs central finite differences over every op and full adapter graphs.

Each case builds random leaves from a seed and a closure that recomputes a
scalar loss from the current leaf values.  Dropout masks are drawn from a
fixed per-case seed inside the closure, so perturbed evaluations reuse the
same mask.  ReLU is not differentiable at 0; cases whose ReLU inputs come
within ``kink_margin`` of 0 are redrawn.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import adapters as ad
from . import tensor as T
from .tensor import Tensor

TOLERANCE = 1e-6
FD_STEP = 2e-6
KINK_MARGIN = 1e-3
_SMALL = 1e-8


@dataclass(frozen=True)
class GraphSize:
    d1: int = 5
    d2: int = 4
    r: int = 3
    batch: int = 3


def _leaf(rng, shape, name, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), trainable=True, name=name)


def _probe(rng, shape):
    return Tensor(rng.standard_normal(shape))


# -- op cases: each returns (leaves, loss closure) --------------------------


def _case_matmul(rng, sz):
    a, b = _leaf(rng, (sz.d1, sz.d2), "a"), _leaf(rng, (sz.d2, sz.batch), "b")
    w = _probe(rng, (sz.d1, sz.batch))
    return [a, b], lambda: T.sum(T.matmul(T.matmul(a, b), T.transpose(w)))


def _case_add_sub(rng, sz):
    a, b = _leaf(rng, (sz.d1, sz.d2), "a"), _leaf(rng, (sz.d1, sz.d2), "b")
    y = _probe(rng, (sz.d1, sz.d2))
    return [a, b], lambda: T.mse_loss(T.sub(T.add(a, b), T.scale(b, 0.5)), y)


def _case_scale_neg(rng, sz):
    a = _leaf(rng, (sz.d1, sz.d2), "a")
    y = _probe(rng, (sz.d1, sz.d2))
    return [a], lambda: T.mse_loss(-(a * 1.7), y)


def _case_transpose_reshape(rng, sz):
    a = _leaf(rng, (sz.d1, sz.d2), "a")
    y = _probe(rng, (sz.d2 * sz.d1, 1))
    return [a], lambda: T.mse_loss(T.reshape(T.transpose(a), (sz.d2 * sz.d1, 1)), y)


def _case_relu(rng, sz):
    a = _leaf(rng, (sz.d1, sz.d2), "a")
    y = _probe(rng, (sz.d1, sz.d2))
    return [a], lambda: T.mse_loss(T.relu(a), y)


def _case_sine(rng, sz):
    a = _leaf(rng, (sz.d1, sz.d2), "a", 0.5)
    y = _probe(rng, (sz.d1, sz.d2))
    return [a], lambda: T.mse_loss(T.sine(a), y)


def _case_dropout(rng, sz):
    a = _leaf(rng, (sz.d1, sz.d2), "a")
    y = _probe(rng, (sz.d1, sz.d2))
    seed = int(rng.integers(2**31))
    return [a], lambda: T.mse_loss(T.dropout(a, 0.3, np.random.default_rng(seed)), y)


def _case_reductions(rng, sz):
    a = _leaf(rng, (sz.d1, sz.d2), "a")
    b = _leaf(rng, (sz.d1, sz.d2), "b")
    c = _leaf(rng, (sz.d1, sz.d2), "c")
    return [a, b, c], lambda: T.add(T.add(T.sum(T.sine(a)), T.mean(T.matmul(b, T.transpose(b)))), T.frobenius_norm(c))


def _case_cross_entropy(rng, sz):
    w = _leaf(rng, (sz.d1, sz.d2), "w")
    x = _probe(rng, (sz.d2, sz.batch))
    labels = rng.integers(0, sz.d1, size=sz.batch)
    return [w], lambda: T.softmax_cross_entropy_loss(T.matmul(w, x), labels)


OP_CASES = {
    "matmul": _case_matmul,
    "add_sub": _case_add_sub,
    "scale_neg": _case_scale_neg,
    "transpose_reshape": _case_transpose_reshape,
    "relu": _case_relu,
    "sine": _case_sine,
    "dropout": _case_dropout,
    "reductions": _case_reductions,
    "cross_entropy": _case_cross_entropy,
}


# -- whole-adapter graphs ---------------------------------------------------


def _neat_graph(depth, activation, residual, output_activation=False, dropout_p=0.0):
    def build(rng, sz):
        # modest scale keeps sine compositions in a regime where the
        # finite-difference truncation error stays far below tolerance
        s = 0.4 if activation == "sine" else 1.0
        base = ad.FrozenLinear(rng.standard_normal((sz.d1, sz.d2)) * s)
        theta_in = _leaf(rng, (sz.d2, sz.r), "theta_in", s / np.sqrt(sz.d2))
        inter = [_leaf(rng, (sz.r, sz.r), f"theta_{k + 2}", s / np.sqrt(sz.r)) for k in range(depth - 2)]
        theta_out = _leaf(rng, (sz.r, sz.d2), "theta_out", s / np.sqrt(sz.r))
        adapter = ad.NeatAdapter(
            theta_in, theta_out, inter, activation=activation, scaling=0.8,
            residual=residual, dropout_p=dropout_p, output_activation=output_activation,
        )
        layer = ad.AdaptedLayer(base, adapter)
        x, y = _probe(rng, (sz.d2, sz.batch)), _probe(rng, (sz.d1, sz.batch))
        seed = int(rng.integers(2**31))
        training = dropout_p > 0

        def loss():
            return T.mse_loss(ad.adapted_forward(layer, x, training, np.random.default_rng(seed)), y)

        return adapter.parameters(), loss

    return build


def _lora_graph(dropout_p):
    def build(rng, sz):
        base = ad.FrozenLinear(rng.standard_normal((sz.d1, sz.d2)))
        adapter = ad.LoraAdapter(_leaf(rng, (sz.d1, sz.r), "A"), _leaf(rng, (sz.r, sz.d2), "B"), 0.5, dropout_p)
        layer = ad.AdaptedLayer(base, adapter)
        x, y = _probe(rng, (sz.d2, sz.batch)), _probe(rng, (sz.d1, sz.batch))
        seed = int(rng.integers(2**31))
        training = dropout_p > 0

        def loss():
            return T.mse_loss(ad.adapted_forward(layer, x, training, np.random.default_rng(seed)), y)

        return adapter.parameters(), loss

    return build


def _graph_cases() -> dict:
    cases = {}
    for depth in (2, 4):
        for act in ("relu", "sine"):
            for residual in (False, True):
                cases[f"neat_d{depth}_{act}_{'res' if residual else 'plain'}"] = _neat_graph(depth, act, residual)
    cases["neat_d4_sine_res_outact_dropout"] = _neat_graph(4, "sine", True, output_activation=True, dropout_p=0.2)
    cases["neat_d2_relu_outact"] = _neat_graph(2, "relu", False, output_activation=True)
    cases["lora"] = _lora_graph(0.0)
    cases["lora_dropout"] = _lora_graph(0.25)
    return cases


GRAPH_CASES = _graph_cases()
ALL_CASES = {**OP_CASES, **GRAPH_CASES}


# -- checking ---------------------------------------------------------------


@dataclass
class CaseResult:
    case: str
    seed: int
    rel_error: float
    param: str
    index: tuple
    analytic: float
    numeric: float
    ops: tuple = ()

    @property
    def passed(self) -> bool:
        return self.rel_error <= TOLERANCE

    def describe(self) -> str:
        return (
            f"{self.case} seed={self.seed}: rel_err={self.rel_error:.3e} at {self.param}{list(self.index)} "
            f"analytic={self.analytic!r} numeric={self.numeric!r} ops={','.join(self.ops)}"
        )


def _kink_distance(tape: T.Tape) -> float:
    gaps = [np.min(np.abs(n.inputs[0].data)) for n in tape.nodes if n.op == "relu"]
    return float(min(gaps)) if gaps else np.inf


def _draw(build, seed: int, size: GraphSize, margin: float, attempts: int = 50):
    rng = np.random.default_rng(seed)
    for _ in range(attempts):
        params, loss = build(rng, size)
        with T.Tape() as tape:
            out = loss()
        if _kink_distance(tape) >= margin:
            return params, loss, tape, out
    raise RuntimeError(f"could not draw a case away from ReLU kinks after {attempts} attempts")


def check_case(name: str, seed: int, size: GraphSize = GraphSize(), h: float = FD_STEP, margin: float = KINK_MARGIN) -> CaseResult:
    build = ALL_CASES[name]
    params, loss, tape, out = _draw(build, seed, size, margin)
    for p in params:
        p.zero_grad()
    T.backward(out, tape)
    ops = tuple(sorted(set(tape.ops())))

    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = []
    for p in params:
        g = np.empty_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss().item()
            flat[i] = orig - h
            fm = loss().item()
            flat[i] = orig
            g.reshape(-1)[i] = (fp - fm) / (2.0 * h)
        numeric.append(g)

    scale = max(max(float(np.max(np.abs(a))) for a in analytic), max(float(np.max(np.abs(n))) for n in numeric), _SMALL)
    worst = (-1.0, "", (), 0.0, 0.0)
    for p, a, n in zip(params, analytic, numeric):
        diff = np.abs(a - n)
        idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
        err = float(diff[idx]) / scale
        if err > worst[0]:
            worst = (err, p.name or "param", tuple(int(i) for i in idx), float(a[idx]), float(n[idx]))
    return CaseResult(name, seed, worst[0], worst[1], worst[2], worst[3], worst[4], ops)


@dataclass
class GradcheckReport:
    results: list[CaseResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max((r.rel_error for r in self.results), default=0.0)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[CaseResult]:
        return [r for r in self.results if not r.passed]

    def covered_ops(self) -> set[str]:
        return {op for r in self.results for op in r.ops}

    def to_dict(self) -> dict:
        worst = max(self.results, key=lambda r: r.rel_error, default=None)
        return {
            "cases": len(self.results),
            "graphs": len({r.seed for r in self.results}),
            "max_rel_error": self.max_rel_error,
            "tolerance": TOLERANCE,
            "passed": self.passed,
            "worst": worst.describe() if worst else None,
            "failures": [r.describe() for r in self.failures()],
            "covered_ops": sorted(self.covered_ops()),
        }


def run_gradcheck(seed: int = 0, graphs: int = 100, size: GraphSize = GraphSize(), cases=None) -> GradcheckReport:
    """Check ``graphs`` seeded draws of every case (or of ``cases``)."""
    names = list(cases) if cases is not None else list(ALL_CASES)
    report = GradcheckReport()
    start = time.perf_counter()
    for g in range(graphs):
        for k, name in enumerate(names):
            case_seed = int(np.random.SeedSequence([seed, g, k]).generate_state(1)[0])
            res = check_case(name, case_seed, size)
            res.seed = g
            report.results.append(res)
    report.seconds = time.perf_counter() - start
    return report
