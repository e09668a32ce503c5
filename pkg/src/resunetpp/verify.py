"""Numerical verification suite: gradient checks against f64 central
differences for every layer type, kernel cross-checks, optimizer oracle
equivalence, and closed-form loss identities.

Seeds are fixed so the suite is deterministic; inputs are offset away from
relu kinks where that matters for finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import tensor as T
from .autodiff import Tape, Variable
from .layers import (ASPPModule, AttentionGate, BatchNorm2D, ConvBNRelu,
                     ResBlock)
from .losses import jaccard_loss, soft_jaccard_index, dice_coefficient, jaccard_index
from .model import ResUnetPPConfig, build_model
from .optim import MomentOptimizer
from .tensor import ConvSpec

GRAD_TOL = 1e-4
MODEL_GRAD_TOL = 1e-3
LOSS_GRAD_TOL = 1e-6
KERNEL_TOL = 1e-5
ORACLE_TOL = 1e-12


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _var(rng, shape, lo=-1.0, hi=1.0):
    return Variable(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _sum_sq(out):
    return ad.reduce_sum(ad.square(out))


def _weighted_sum_sq(out):
    """Scalarize as sum((r * out)^2) with fixed random weights.

    A plain sum of squares is nearly invariant to the input of normalizing
    layers (batch norm), which drives the true gradient to ~0 and turns the
    relative-error check into noise; the weights break that symmetry. The
    weights depend only on the shape, so graph rebuilds see the same ones.
    """
    r = np.random.default_rng(12345).uniform(0.5, 1.5, out.value.shape)
    return ad.reduce_sum(ad.square(ad.mul(out, ad.constant(out.tape, r))))


def _check_elementwise(results, seeds) -> None:
    def grad_of(build_vars, build_out, wrt_index, seeds):
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            variables = build_vars(rng)

            def f(variables=variables):
                tape = Tape()
                for v in variables:
                    tape.attach(v)
                return build_out(*variables)

            worst = max(worst, ad.grad_check(f, variables[wrt_index]))
        return worst

    unary = {
        "relu": (lambda rng: (Variable(rng.uniform(0.2, 1.5, (3, 4)) *
                                       rng.choice([-1.0, 1.0], (3, 4)),
                                       requires_grad=True),),
                 lambda x: _sum_sq(ad.relu(x))),
        "sigmoid": (lambda rng: (_var(rng, (3, 4), -2, 2),),
                    lambda x: _sum_sq(ad.sigmoid(x))),
        "neg": (lambda rng: (_var(rng, (3, 4)),), lambda x: _sum_sq(ad.neg(x))),
        "exp": (lambda rng: (_var(rng, (3, 4), -1, 1),), lambda x: _sum_sq(ad.exp(x))),
        "log": (lambda rng: (_var(rng, (3, 4), 0.3, 2.0),), lambda x: _sum_sq(ad.log(x))),
        # |x| >= 0.2: the x^3-scale gradient would vanish into fd noise at 0
        "square": (lambda rng: (Variable(rng.uniform(0.2, 1.5, (3, 4)) *
                                         rng.choice([-1.0, 1.0], (3, 4)),
                                         requires_grad=True),),
                   lambda x: _sum_sq(ad.square(x))),
    }
    for name, (build_vars, build_out) in unary.items():
        err = grad_of(build_vars, build_out, 0, seeds)
        results.append(CheckResult(f"grad unary {name}", err, GRAD_TOL))

    def pair(rng):
        return _var(rng, (2, 3, 4, 4), 0.5, 1.5), _var(rng, (2, 3, 4, 4), 0.5, 1.5)

    def bias_pair(rng):
        return _var(rng, (2, 3, 4, 4), 0.5, 1.5), _var(rng, (3,), 0.5, 1.5)

    binary = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div}
    for name, op in binary.items():
        for wrt_index, side in ((0, "lhs"), (1, "rhs")):
            err = grad_of(pair, lambda a, b, op=op: _sum_sq(op(a, b)), wrt_index, seeds)
            results.append(CheckResult(f"grad binary {name} wrt {side}", err, GRAD_TOL))
        err = grad_of(bias_pair, lambda a, b, op=op: _sum_sq(op(a, b)), 1, seeds)
        results.append(CheckResult(f"grad binary {name} wrt channel bias", err, GRAD_TOL))

    reductions = {
        "sum": lambda x: ad.square(ad.reduce_sum(x)),
        "mean": lambda x: ad.square(ad.reduce_mean(x)),
        "sum axis": lambda x: _sum_sq(ad.reduce_sum(x, axes=(1,))),
        "max": lambda x: ad.square(ad.reduce_max(x)),
        "max axis": lambda x: _sum_sq(ad.reduce_max(x, axes=(0,))),
    }
    for name, build_out in reductions.items():
        err = grad_of(lambda rng: (_var(rng, (4, 5)),), build_out, 0, seeds)
        results.append(CheckResult(f"grad reduce {name}", err, GRAD_TOL))


def _check_spatial(results, seeds) -> None:
    def grad_of(build, wrt_name, seeds):
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            variables, build_out = build(rng)

            def f():
                tape = Tape()
                for v in variables.values():
                    tape.attach(v)
                return build_out()

            worst = max(worst, ad.grad_check(f, variables[wrt_name]))
        return worst

    for dilation in (1, 2, 4):
        def build(rng, dilation=dilation):
            spec = ConvSpec(3, 3, stride=1, padding=dilation, dilation=dilation)
            variables = {
                "x": _var(rng, (2, 2, 9, 9)),
                "w": _var(rng, (3, 2, 3, 3)),
                "b": _var(rng, (3,)),
            }

            def out():
                return _weighted_sum_sq(ad.conv2d(variables["x"], variables["w"],
                                                  variables["b"], spec))

            return variables, out

        for wrt in ("x", "w", "b"):
            err = grad_of(build, wrt, seeds)
            results.append(CheckResult(
                f"grad conv2d dilation={dilation} wrt {wrt}", err, GRAD_TOL))

    def pool_build(rng):
        variables = {"x": _var(rng, (2, 2, 4, 4))}
        return variables, lambda: _weighted_sum_sq(ad.maxpool2d(variables["x"]))

    results.append(CheckResult("grad maxpool2d", grad_of(pool_build, "x", seeds), GRAD_TOL))

    def up_build(rng):
        variables = {"x": _var(rng, (2, 2, 3, 3))}
        return variables, lambda: _weighted_sum_sq(ad.upsample2d(variables["x"], 2))

    results.append(CheckResult("grad upsample2d", grad_of(up_build, "x", seeds), GRAD_TOL))

    def cat_build(rng):
        variables = {"a": _var(rng, (2, 2, 3, 3)), "b": _var(rng, (2, 3, 3, 3))}
        return variables, lambda: _weighted_sum_sq(
            ad.concat_channels(variables["a"], variables["b"]))

    for wrt in ("a", "b"):
        results.append(CheckResult(f"grad concat_channels wrt {wrt}",
                                   grad_of(cat_build, wrt, seeds), GRAD_TOL))

    def scale_build(rng):
        variables = {"x": _var(rng, (2, 3, 4, 4)),
                     "alpha": _var(rng, (2, 1, 4, 4), 0.1, 0.9)}
        return variables, lambda: _weighted_sum_sq(
            ad.scale_channels(variables["x"], variables["alpha"]))

    for wrt in ("x", "alpha"):
        results.append(CheckResult(f"grad scale_channels wrt {wrt}",
                                   grad_of(scale_build, wrt, seeds), GRAD_TOL))


def _layer_param_check(results, name, make_layer, x_shape, seeds,
                       mode_arg=True, tol=GRAD_TOL, x_range=(-1.0, 1.0)) -> None:
    """Grad-check a layer w.r.t. its input and every parameter."""
    worst_by_target = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        layer = make_layer(rng)
        x = Variable(rng.uniform(*x_range, size=x_shape), requires_grad=True)

        def f():
            tape = Tape()
            tape.attach(x)
            out = layer(x, "train") if mode_arg else layer(x)
            return _weighted_sum_sq(out)

        targets = [("input", x)]
        targets += [(pname, var) for pname, var in layer.parameters()]
        for tname, var in targets:
            err = ad.grad_check(f, var)
            worst_by_target[tname] = max(worst_by_target.get(tname, 0.0), err)
    worst = max(worst_by_target.values())
    worst_name = max(worst_by_target, key=worst_by_target.get)
    results.append(CheckResult(f"grad {name} (worst: {worst_name})", worst, tol))


def _check_layers(results, seeds) -> None:
    _layer_param_check(
        results, "batchnorm train",
        lambda rng: _randomized_bn(rng, 3), (2, 3, 4, 4), seeds)
    _layer_param_check(
        results, "conv_bn_relu",
        lambda rng: ConvBNRelu(2, 3, rng=rng, dtype=np.float64), (2, 2, 5, 5), seeds)
    _layer_param_check(
        results, "resblock",
        lambda rng: ResBlock(2, 2, rng=rng, dtype=np.float64), (1, 2, 4, 4), seeds)
    _layer_param_check(
        results, "resblock projection",
        lambda rng: ResBlock(2, 4, rng=rng, dtype=np.float64), (1, 2, 4, 4), seeds)
    _layer_param_check(
        results, "aspp",
        lambda rng: ASPPModule(2, 2, (1, 2, 4), rng=rng, dtype=np.float64),
        (1, 2, 6, 6), seeds, mode_arg=False)

    # attention gate takes two inputs; check both plus all parameters
    worst = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        gate = AttentionGate(2, 3, rng=rng, dtype=np.float64)
        skip = Variable(rng.uniform(-1, 1, (1, 2, 4, 4)), requires_grad=True)
        g = Variable(rng.uniform(-1, 1, (1, 3, 4, 4)), requires_grad=True)

        def f():
            tape = Tape()
            tape.attach(skip)
            tape.attach(g)
            return _weighted_sum_sq(gate(skip, g))

        targets = [("skip", skip), ("gate", g)] + list(gate.parameters())
        for tname, var in targets:
            worst[tname] = max(worst.get(tname, 0.0), ad.grad_check(f, var))
    wname = max(worst, key=worst.get)
    results.append(CheckResult(f"grad attention gate (worst: {wname})",
                               worst[wname], GRAD_TOL))


def _randomized_bn(rng, channels):
    bn = BatchNorm2D(channels, dtype=np.float64)
    bn.gamma.value = rng.uniform(0.5, 1.5, channels)
    bn.beta.value = rng.uniform(-0.5, 0.5, channels)
    return bn


def _check_loss_grads(results, seeds) -> None:
    # direct: probabilities in (0.1, 0.9)
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        pred = Variable(rng.uniform(0.1, 0.9, (2, 1, 4, 4)), requires_grad=True)
        target = (rng.uniform(0, 1, (2, 1, 4, 4)) > 0.5).astype(np.float64)

        def f():
            tape = Tape()
            tape.attach(pred)
            return jaccard_loss(pred, target)

        worst = max(worst, ad.grad_check(f, pred))
    results.append(CheckResult("grad jaccard_loss", worst, LOSS_GRAD_TOL))

    # through sigmoid(conv(x, w)): end-to-end composite
    worst = {}
    for seed in seeds[:5]:
        rng = np.random.default_rng(seed)
        x = Variable(rng.uniform(-1, 1, (1, 2, 5, 5)), requires_grad=True)
        w = Variable(rng.uniform(-0.5, 0.5, (1, 2, 3, 3)), requires_grad=True)
        target = (rng.uniform(0, 1, (1, 1, 5, 5)) > 0.5).astype(np.float64)
        spec = ConvSpec(3, 3, padding=1)

        def f():
            tape = Tape()
            tape.attach(x)
            tape.attach(w)
            return jaccard_loss(ad.sigmoid(ad.conv2d(x, w, None, spec)), target)

        for tname, var in (("x", x), ("w", w)):
            worst[tname] = max(worst.get(tname, 0.0), ad.grad_check(f, var))
    wname = max(worst, key=worst.get)
    results.append(CheckResult(f"grad loss through conv (worst: {wname})",
                               worst[wname], GRAD_TOL))


def _check_model_grad(results, seed) -> None:
    # depth 4 keeps the deepest stage at 2x2, satisfying batch norm's
    # >=2-values-per-channel requirement at batch 1
    config = ResUnetPPConfig(base_channels=2, depth=4, input_size=(16, 16),
                             seed=seed, dtype="f64")
    model = build_model(config)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(-1, 1, (1, 3, 16, 16))
    target = (rng.uniform(0, 1, (1, 1, 16, 16)) > 0.5).astype(np.float64)

    def f():
        tape = Tape()
        pred = model.forward(tape, x, mode="train")
        return jaccard_loss(pred, target)

    params = [(n, v) for n, v in model.parameters() if v.value.size <= 256]
    name, var = params[rng.integers(len(params))]
    err = ad.grad_check(f, var)
    results.append(CheckResult(f"grad full model ({name})", err, MODEL_GRAD_TOL))


def _check_conv_kernels(results, seed, cases: int = 200) -> None:
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < cases:
        n = int(rng.integers(1, 3))
        c_in = int(rng.integers(1, 4))
        c_out = int(rng.integers(1, 5))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 4))
        padding = int(rng.integers(0, 3))
        dilation = int(rng.integers(1, 4))
        h = int(rng.integers(1, 13))
        w = int(rng.integers(1, 13))
        spec = ConvSpec(k, k, stride, padding, dilation)
        try:
            spec.output_hw(h, w)
        except Exception:
            continue
        x = rng.uniform(-1, 1, (n, c_in, h, w)).astype(np.float32)
        wgt = rng.uniform(-1, 1, (c_out, c_in, k, k)).astype(np.float32)
        bias = rng.uniform(-1, 1, c_out).astype(np.float32) if rng.integers(2) else None
        fast = T.conv2d(x, wgt, bias, spec)
        ref = T.conv2d_naive(x, wgt, bias, spec)
        worst = max(worst, float(np.abs(fast - ref).max()))
        done += 1
    results.append(CheckResult(f"conv2d im2col vs naive ({cases} configs)",
                               worst, KERNEL_TOL))


def _scalar_moment_reference(theta, g, m, v, t, kind, lr, b1, b2, eps):
    """Plain-python reference for one elementwise Adam/NAdam update."""
    m = b1 * m + (1.0 - b1) * g
    v = b2 * v + (1.0 - b2) * (g * g)
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    if kind == "adam":
        num = m / bc1
    else:
        num = b1 * (m / (1.0 - b1 ** (t + 1))) + (1.0 - b1) * (g / bc1)
    theta = theta - lr * num / (math.sqrt(v / bc2) + eps)
    return theta, m, v


def _check_optimizer_oracle(results, seed, steps: int = 100) -> None:
    for kind in ("adam", "nadam"):
        rng = np.random.default_rng(seed)
        shape = (3, 4)
        param = Variable(rng.uniform(-1, 1, shape), requires_grad=True)
        opt = MomentOptimizer([("p", param)], kind=kind, lr=0.01, eps=1e-8)
        ref_theta = param.value.copy().reshape(-1)
        ref_m = np.zeros(ref_theta.size)
        ref_v = np.zeros(ref_theta.size)
        worst = 0.0
        for step in range(1, steps + 1):
            g = rng.uniform(-1, 1, shape)
            param.grad = g.copy()
            opt.step()
            gf = g.reshape(-1)
            for i in range(ref_theta.size):
                ref_theta[i], ref_m[i], ref_v[i] = _scalar_moment_reference(
                    ref_theta[i], gf[i], ref_m[i], ref_v[i], step, kind,
                    0.01, 0.9, 0.999, 1e-8)
            worst = max(worst, float(np.abs(param.value.reshape(-1) - ref_theta).max()))
        results.append(CheckResult(f"{kind} vs scalar oracle ({steps} steps)",
                                   worst, ORACLE_TOL))

    # with beta1 = 0 the Nesterov term vanishes and the updates coincide
    rng = np.random.default_rng(seed + 1)
    shape = (5,)
    start = rng.uniform(-1, 1, shape)
    pa = Variable(start.copy(), requires_grad=True)
    pn = Variable(start.copy(), requires_grad=True)
    oa = MomentOptimizer([("p", pa)], kind="adam", lr=0.05, beta1=0.0)
    on = MomentOptimizer([("p", pn)], kind="nadam", lr=0.05, beta1=0.0)
    worst = 0.0
    for _ in range(50):
        g = rng.uniform(-1, 1, shape)
        pa.grad = g.copy()
        pn.grad = g.copy()
        oa.step()
        on.step()
        worst = max(worst, float(np.abs(pa.value - pn.value).max()))
    results.append(CheckResult("adam == nadam at beta1=0", worst, ORACLE_TOL))


def _check_loss_identities(results, seed, pairs: int = 1000) -> None:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        shape = (int(rng.integers(1, 3)), 1, int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        pred = rng.uniform(0, 1, shape)
        target = (rng.uniform(0, 1, shape) > rng.uniform(0.2, 0.8)).astype(np.float64)
        tape = Tape()
        loss = float(jaccard_loss(tape.leaf(pred), target).value)
        worst = max(worst, abs(loss - (1.0 - soft_jaccard_index(pred, target))))
    results.append(CheckResult(f"jaccard_loss == 1 - soft IoU ({pairs} pairs)",
                               worst, ORACLE_TOL))

    worst = 0.0
    for _ in range(pairs):
        shape = (int(rng.integers(2, 8)), int(rng.integers(2, 8)))
        a = (rng.uniform(0, 1, shape) > rng.uniform(0.2, 0.8)).astype(np.float64)
        b = (rng.uniform(0, 1, shape) > rng.uniform(0.2, 0.8)).astype(np.float64)
        j = jaccard_index(a, b)
        d = dice_coefficient(a, b)
        worst = max(worst, abs(d - 2.0 * j / (1.0 + j)))
    results.append(CheckResult(f"dice == 2J/(1+J) ({pairs} pairs)", worst, ORACLE_TOL))


def run_checks(seed: int = 0) -> list[CheckResult]:
    """Run the whole verification suite in f64 and return per-check results."""
    seeds = list(range(seed, seed + 20))
    results: list[CheckResult] = []
    _check_elementwise(results, seeds)
    _check_spatial(results, seeds[:8])
    _check_layers(results, seeds[:8])
    _check_loss_grads(results, seeds)
    _check_model_grad(results, seed)
    _check_conv_kernels(results, seed)
    _check_optimizer_oracle(results, seed)
    _check_loss_identities(results, seed)
    return results
