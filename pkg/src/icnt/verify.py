"""Finite-difference gradient suites behind ``icnt gradcheck``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .backbone import BackboneConfig, convnext_block, init_backbone
from .gradcheck import grad_check_detailed
from .head import HeadConfig, ModelConfig, Model, classifier_head, gagm_fuse, init_head, sevector
from .loss import cross_entropy, feature_smoothing_loss, feature_smoothing_loss_composed, total_loss
from .tensor import Tape, Tensor

OP_TOL = 1e-6
COMPOSITE_TOL = 1e-5
SCOPES = ("op", "head", "loss", "full")


@dataclass
class Check:
    name: str
    fn: Callable[..., Tensor]
    inputs: list[Tensor]
    tol: float
    seed: np.ndarray | None = None
    wrt: list[int] | None = None


@dataclass
class Outcome:
    name: str
    max_rel_error: float
    tol: float
    input_position: int
    index: tuple[int, ...]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" worst input #{self.input_position} at {self.index}" if not self.passed else ""
        return f"{status} {self.name:<32} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.0e}{where}"


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-30) * (margin + np.abs(x)), x)


def _distinct(rng, shape):
    """Random values spaced well apart, so max-pooling never flips argmax under eps."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape) / n


def op_checks(rng: np.random.Generator) -> list[Check]:
    T = lambda *s: Tensor(rng.standard_normal(s))  # noqa: E731
    seed = lambda *s: rng.standard_normal(s)  # noqa: E731
    drop_seed = int(rng.integers(1 << 31))
    return [
        Check("conv2d dense s1 p1", lambda x, w, b: ops.conv2d(x, w, b, 1, 1), [T(2, 3, 5, 5), T(4, 3, 3, 3), T(4)], OP_TOL, seed(2, 4, 5, 5)),
        Check("conv2d stem k4 s4", lambda x, w, b: ops.conv2d(x, w, b, 4, 0), [T(2, 2, 8, 8), T(3, 2, 4, 4), T(3)], OP_TOL, seed(2, 3, 2, 2)),
        Check("conv2d depthwise 7x7", lambda x, w, b: ops.conv2d(x, w, b, 1, 3, 4), [T(2, 4, 5, 5), T(4, 1, 7, 7), T(4)], OP_TOL, seed(2, 4, 5, 5)),
        Check("conv2d grouped s2", lambda x, w: ops.conv2d(x, w, None, 2, 1, 2), [T(1, 4, 6, 6), T(6, 2, 3, 3)], OP_TOL, seed(1, 6, 3, 3)),
        Check("linear", ops.linear, [T(3, 4), T(2, 4), T(2)], OP_TOL, seed(3, 2)),
        Check("layer_norm", lambda x, g, b: ops.layer_norm(x, g, b), [T(2, 8), T(8), T(8)], OP_TOL, seed(2, 8)),
        Check("relu", ops.relu, [Tensor(_away_from_zero(rng, (3, 5)))], OP_TOL, seed(3, 5)),
        Check("gelu", ops.gelu, [T(3, 5)], OP_TOL, seed(3, 5)),
        Check("sigmoid", ops.sigmoid, [T(3, 5)], OP_TOL, seed(3, 5)),
        Check("global_avg_pool", ops.global_avg_pool, [T(2, 3, 4, 4)], OP_TOL, seed(2, 3)),
        Check("global_max_pool", ops.global_max_pool, [Tensor(_distinct(rng, (2, 3, 4, 4)))], OP_TOL, seed(2, 3)),
        Check("max_pool2d", ops.max_pool2d, [Tensor(_distinct(rng, (1, 2, 4, 4)))], OP_TOL, seed(1, 2, 2, 2)),
        Check("concat_channels", ops.concat_channels, [T(2, 3), T(2, 2)], OP_TOL, seed(2, 5)),
        Check(
            "dropout (fixed mask)",
            lambda x: ops.dropout(x, 0.3, True, np.random.default_rng(drop_seed)),
            [T(4, 6)], OP_TOL, seed(4, 6),
        ),
        Check("mul", ops.mul, [T(3, 4), T(1, 4)], OP_TOL, seed(3, 4)),
        Check("add/sub", lambda a, b: ops.sub(ops.add(a, b), ops.scale(b, 3.0)), [T(3, 4), T(4)], OP_TOL, seed(3, 4)),
        Check("matmul", ops.matmul, [T(3, 4), T(4, 2)], OP_TOL, seed(3, 2)),
        Check("permute/reshape", lambda x: ops.reshape(ops.permute(x, (0, 2, 3, 1)), (2, -1)), [T(2, 3, 2, 2)], OP_TOL, seed(2, 12)),
        Check("sum_rows/mean", lambda x: ops.mean_all(ops.sum_rows(ops.mul(x, x))), [T(3, 4)], OP_TOL),
    ]


def _resolvable(check: Check, eps: float = 1e-5) -> bool:
    """True when every nonzero analytic gradient entry sits above central-difference roundoff.

    One ulp of the output divided by 2*eps is the smallest derivative the
    numeric side can see; entries below it fail a relative test on noise alone.
    """
    inputs = [Tensor(t.data.copy(), requires_grad=True) for t in check.inputs]
    with Tape() as tape:
        out = check.fn(*inputs)
        tape.backward(out, check.seed)
    f = float((out.data * check.seed).sum()) if check.seed is not None else out.item()
    floor = 4 * np.spacing(max(abs(f), 1.0)) / (2 * eps * check.tol)
    wrt = check.wrt if check.wrt is not None else range(len(inputs))
    # exact zeros (dead ReLU units) stay exactly zero under perturbation too
    mags = [np.abs(inputs[i].grad) for i in wrt]
    return all(((m == 0) | (m >= floor)).all() for m in mags)


def _draw_resolvable(make, rng: np.random.Generator, tries: int = 200) -> Check:
    for _ in range(tries):
        check = make(rng)
        if _resolvable(check):
            return check
    raise RuntimeError(f"no well-conditioned fixture for {check.name!r} after {tries} draws")


def _head_setup(rng: np.random.Generator, c: int = 8, n_class: int = 4):
    # narrow classifier keeps the element count (and roundoff-limited draws) small
    cfg = HeadConfig(C=c, hidden=32, n_class=n_class)
    params = {k: v.astype(np.float64) for k, v in init_head(cfg, rng).items()}
    # fan-in scaled weights keep activations O(1): no saturated softmax, no
    # gradients below finite-difference resolution
    for k, v in params.items():
        std = 1 / np.sqrt(v.shape[1]) if v.ndim == 2 else 0.1
        v.data = rng.standard_normal(v.shape) * std
    names = list(params)
    return cfg, params, names


def _head_fixture(rng: np.random.Generator):
    cfg, params, names = _head_setup(rng)
    fmap = Tensor(_distinct(rng, (4, cfg.C, 3, 3)) * 20 + rng.standard_normal((4, cfg.C, 1, 1)))
    return cfg, [fmap] + [params[k] for k in names], names


def _head_check(training: bool):
    name = "head train (fixed dropout)" if training else "head eval (GAGM+SEVector+FC)"

    def make(rng):
        cfg, inputs, names = _head_fixture(rng)
        drop_seed = int(rng.integers(1 << 31))

        def fn(f, *ps):
            p = dict(zip(names, ps))
            v = sevector(gagm_fuse(f, True), p, True)
            rng_ = np.random.default_rng(drop_seed) if training else None
            return classifier_head(v, p, training, rng_, cfg.dropout_p)[0]

        return Check(name, fn, inputs, COMPOSITE_TOL, rng.standard_normal((4, cfg.n_class)))
    return make


def head_checks(rng: np.random.Generator) -> list[Check]:
    return [_draw_resolvable(_head_check(False), rng), _draw_resolvable(_head_check(True), rng)]


def _end_to_end(rng: np.random.Generator) -> Check:
    labels = np.array([0, 1, 0, 2])
    cfg, inputs, names = _head_fixture(rng)

    def composite(f, *ps):
        p = dict(zip(names, ps))
        v = sevector(gagm_fuse(f, True), p, True)
        logits, pre = classifier_head(v, p, False, None, cfg.dropout_p)
        return total_loss(logits, pre, labels, 0.05)[0]

    return Check("head + CE + FSL end to end", composite, inputs, COMPOSITE_TOL)


def loss_checks(rng: np.random.Generator) -> list[Check]:
    labels = np.array([0, 1, 0, 2])

    def shared(z, wa, wb):
        # logits and features from one shared tensor, so CE and FSL gradients meet
        feats = ops.linear(z, wa)
        logits = ops.linear(feats, wb)
        return total_loss(logits, feats, labels, 0.05)[0]

    return [
        Check("cross_entropy", lambda z: cross_entropy(z, labels), [Tensor(rng.standard_normal((4, 3)))], OP_TOL),
        Check("feature_smoothing_loss", lambda f: feature_smoothing_loss(f, labels), [Tensor(rng.standard_normal((4, 5)))], OP_TOL),
        Check(
            "feature_smoothing (dynamic centers)",
            lambda f: feature_smoothing_loss_composed(f, labels),
            [Tensor(rng.standard_normal((4, 5)))], OP_TOL,
        ),
        Check(
            "total_loss shared prelogits",
            shared,
            [Tensor(rng.standard_normal((4, 6))), Tensor(rng.standard_normal((5, 6))), Tensor(rng.standard_normal((3, 5)))],
            COMPOSITE_TOL,
        ),
        _draw_resolvable(_end_to_end, rng),
    ]


def full_checks(rng: np.random.Generator) -> list[Check]:
    block_cfg = BackboneConfig(1, [1, 0, 0, 0], [4, 4, 4, 4])
    bp = {k: v.astype(np.float64) for k, v in init_backbone(block_cfg, rng).items() if k.startswith("stages.0")}
    for k, v in bp.items():
        v.data = v.data + rng.standard_normal(v.shape) * 0.3
    bnames = list(bp)

    def block_fn(x, *ps):
        return convnext_block(x, dict(zip(bnames, ps)), "stages.0.blocks.0")

    mcfg = ModelConfig("convnext", 32, BackboneConfig(1, [1, 1, 1, 1], [4, 4, 8, 8]), HeadConfig(n_class=3))
    model = Model.init(mcfg, rng).astype(np.float64)
    for k, v in model.params.items():
        if k.endswith("weight") and v.ndim > 1:
            v.data = v.data * 10
    labels = np.array([0, 1, 2, 1])
    mnames = [k for k in model.params if k.startswith(("stem.", "cls.fc2", "se.fc1"))]

    def model_fn(x, *ps):
        p = dict(model.params)
        p.update(zip(mnames, ps))
        m = Model(mcfg, p)
        logits, pre = m(x, False)
        return total_loss(logits, pre, labels, 0.05)[0]

    return [
        Check("convnext_block", block_fn, [Tensor(rng.standard_normal((1, 4, 5, 5)))] + [bp[k] for k in bnames],
              COMPOSITE_TOL, rng.standard_normal((1, 4, 5, 5))),
        Check("model end to end (stem/SE/fc2)", model_fn,
              [Tensor(rng.standard_normal((4, 1, 32, 32)))] + [model.params[k] for k in mnames], COMPOSITE_TOL,
              wrt=list(range(1, len(mnames) + 1))),
    ]


def build_checks(scope: str, seed: int = 0) -> list[Check]:
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    rng = np.random.default_rng(seed)
    table = {"op": op_checks, "head": head_checks, "loss": loss_checks, "full": full_checks}
    if scope == "full":
        return [c for fn in table.values() for c in fn(rng)]
    return table[scope](rng)


def run_checks(checks: list[Check], eps: float = 1e-5) -> list[Outcome]:
    out = []
    for c in checks:
        r = grad_check_detailed(c.fn, c.inputs, eps, c.seed, c.wrt)
        out.append(Outcome(c.name, r.max_rel_error, c.tol, r.input_position, r.index))
    return out
