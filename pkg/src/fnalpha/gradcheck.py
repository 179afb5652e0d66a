"""Finite-difference verification of recorded gradients.

``grad_check`` compares tape gradients against central differences
(f(x+eps) - f(x-eps)) / (2 eps) per sampled leaf element and reports the
max relative error, where relative means |a - n| / max(1, |a|, |n|): a
unit floor so near-zero gradients are compared absolutely.

Finite differences are only valid where the composite is locally smooth.
Activation kinks (relu/leaky at 0, max-pool ties) sit on measure-zero
sets, but a random draw can land within eps of one and corrupt the
estimate without any gradient bug being present. The suite runner
therefore redraws a failing instance a bounded number of times: a
measurement artifact disappears under a fresh draw, a systematic
gradient error does not.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses, nn
from .blocks import (
    AttentionModule,
    AttentionSubblock,
    BasicBlock,
    GroupAttentionBlock,
    PreactBlock,
    ResABlock,
    ResidualSubblock,
    ResNeXtBlock,
    SqueezeExcite,
)
from .tensor import (
    Tensor,
    absolute,
    batch_norm,
    clamp,
    concat_channels,
    conv2d,
    div,
    dropout,
    global_avg_pool,
    leaky_relu,
    log,
    matmul,
    max_pool2,
    no_grad,
    permute_channels,
    relu,
    scale_channels,
    sigmoid,
    slice_channels,
    tmean,
    tsum,
    upsample_repeat2,
    zero_grad,
)

__all__ = ["GradCheckReport", "grad_check", "run_gradcheck_suite", "SuiteResult"]


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_leaf: dict
    worst: tuple
    passed: bool


def grad_check(f, leaves, eps: float = 1e-5, tol: float = 1e-6, sample: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Check d f() / d leaf against central finite differences.

    ``f`` is a zero-argument callable returning a scalar Tensor, closed
    over ``leaves`` (a name -> Tensor mapping with requires_grad set).
    ``sample`` limits the checked coordinates per leaf (all when None).
    """
    leaves = dict(leaves)
    for t in leaves.values():
        if not np.isfinite(t.data).all():
            raise ValueError("grad_check leaves must be finite")
    zero_grad(leaves.values())
    out = f()
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued composite")
    out.backward()
    analytic = {}
    for name, t in leaves.items():
        analytic[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()

    max_rel = 0.0
    per_leaf = {}
    worst = ("", -1, 0.0, 0.0)
    for name, t in leaves.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if sample is None or sample >= n:
            idxs = range(n)
        else:
            idxs = (rng or np.random.default_rng()).choice(n, size=sample, replace=False)
        leaf_max = 0.0
        aflat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = aflat[i]
            rel = abs(a - num) / max(1.0, abs(a), abs(num))
            if rel > leaf_max:
                leaf_max = rel
            if rel > max_rel:
                max_rel = rel
                worst = (name, int(i), float(a), float(num))
        per_leaf[name] = leaf_max
    return GradCheckReport(max_rel, per_leaf, worst, max_rel < tol)


# suite ---------------------------------------------------------------------


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce to a scalar through fixed random weights (keeps grads O(1))."""
    w = Tensor(rng.uniform(0.2, 1.0, out.shape))
    return tsum(out * w)


def _leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away_from_zero(rng, shape, gap=1e-3, lo=-1.0, hi=1.0):
    d = rng.uniform(lo, hi, shape)
    d = np.where(np.abs(d) < gap, gap * np.sign(d) + (d == 0) * gap, d)
    return Tensor(d, requires_grad=True)


def _pool_safe(rng, shape, gap=2e-3):
    """Uniform draw with distinct-enough values inside each 2x2 window."""
    for _ in range(64):
        d = rng.uniform(-1.0, 1.0, shape)
        n, c, h, w = shape
        v = d.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
        v = np.sort(v, axis=1)
        if np.diff(v, axis=1).min() > gap:
            return Tensor(d, requires_grad=True)
    raise RuntimeError("could not draw tie-free pooling input")


def _check_add(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    return lambda: _weighted(a + b + 0.5, rng), {"a": a, "b": b}


def _check_mul(rng):
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    return lambda: _weighted(a * b * 1.7, rng), {"a": a, "b": b}


def _check_div(rng):
    a = _leaf(rng, (3, 4))
    b = _away_from_zero(rng, (3, 4), gap=0.2)
    return lambda: _weighted(div(a, b), rng), {"a": a, "b": b}


def _check_log(rng):
    a = _leaf(rng, (3, 4), lo=0.1, hi=2.0)
    return lambda: _weighted(log(a), rng), {"a": a}


def _check_abs(rng):
    a = _away_from_zero(rng, (3, 4))
    return lambda: _weighted(absolute(a), rng), {"a": a}


def _check_clamp(rng):
    a = _leaf(rng, (3, 4), lo=0.1, hi=0.9)  # interior of [0, 1]
    return lambda: _weighted(clamp(a, 0.0, 1.0), rng), {"a": a}


def _check_sum_mean(rng):
    a = _leaf(rng, (2, 3, 4))
    return lambda: tsum(a) + tmean(a) * 2.0, {"a": a}


def _check_matmul(rng):
    a, b = _leaf(rng, (3, 5)), _leaf(rng, (5, 2))
    return lambda: _weighted(matmul(a, b), rng), {"a": a, "b": b}


def _check_relu(rng):
    a = _away_from_zero(rng, (2, 3, 4, 4))
    return lambda: _weighted(relu(a), rng), {"a": a}


def _check_leaky(rng):
    a = _away_from_zero(rng, (2, 3, 4, 4))
    return lambda: _weighted(leaky_relu(a, 0.3), rng), {"a": a}


def _check_sigmoid(rng):
    a = _leaf(rng, (2, 3, 4, 4), lo=-3.0, hi=3.0)
    return lambda: _weighted(sigmoid(a), rng), {"a": a}


def _make_conv_check(kernel, groups, bias):
    def factory(rng):
        cin, cout = 4, 4
        x = _leaf(rng, (2, cin, 4, 4))
        w = _leaf(rng, (cout, cin // groups, kernel, kernel), lo=-0.5, hi=0.5)
        leaves = {"x": x, "w": w}
        b = None
        if bias:
            b = _leaf(rng, (cout,), lo=-0.2, hi=0.2)
            leaves["b"] = b
        return lambda: _weighted(conv2d(x, w, b, groups), rng), leaves

    return factory


def _check_max_pool(rng):
    x = _pool_safe(rng, (2, 3, 4, 4))
    return lambda: _weighted(max_pool2(x), rng), {"x": x}


def _check_upsample(rng):
    x = _leaf(rng, (2, 3, 3, 3))
    return lambda: _weighted(upsample_repeat2(x), rng), {"x": x}


def _check_gap(rng):
    x = _leaf(rng, (2, 4, 3, 3))
    return lambda: _weighted(global_avg_pool(x), rng), {"x": x}


def _make_bn_check(training):
    def factory(rng):
        c = 3
        x = _leaf(rng, (2, c, 3, 3))
        gamma = _leaf(rng, (c,), lo=0.5, hi=1.5)
        beta = _leaf(rng, (c,), lo=-0.5, hi=0.5)
        rm = rng.uniform(-0.3, 0.3, c)
        rv = rng.uniform(0.5, 1.5, c)

        def f():
            return _weighted(batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training), rng)

        return f, {"x": x, "gamma": gamma, "beta": beta}

    return factory


def _check_dropout(rng):
    x = _leaf(rng, (2, 3, 4, 4))
    seed = int(rng.integers(1 << 31))

    def f():
        return _weighted(dropout(x, 0.4, True, np.random.default_rng(seed)), rng)

    return f, {"x": x}


def _check_concat_slice(rng):
    a, b = _leaf(rng, (2, 3, 3, 3)), _leaf(rng, (2, 2, 3, 3))

    def f():
        cat = concat_channels([a, b])
        return _weighted(slice_channels(cat, 1, 4), rng)

    return f, {"a": a, "b": b}


def _check_permute(rng):
    x = _leaf(rng, (2, 6, 3, 3))
    perm = np.arange(6).reshape(2, 3).T.reshape(-1)  # the channel-shuffle map
    return lambda: _weighted(permute_channels(x, perm), rng), {"x": x}


def _check_scale_channels(rng):
    x = _leaf(rng, (2, 4, 3, 3))
    s = _leaf(rng, (2, 4))
    return lambda: _weighted(scale_channels(x, s), rng), {"x": x, "s": s}


def _module_leaves(mod: nn.Module) -> dict:
    return dict(mod.named_parameters())


def _check_squeeze_excite(rng):
    se = SqueezeExcite(8, 2, rng)
    se.eval()
    x = _leaf(rng, (2, 8, 4, 4))
    leaves = {"x": x, **_module_leaves(se)}
    return lambda: _weighted(se(x), rng), leaves


def _check_attention_module(rng):
    m = AttentionModule(4, 2, rng)
    m.eval()
    x = _leaf(rng, (2, 4, 4, 4))
    leaves = {"x": x, **_module_leaves(m)}
    return lambda: _weighted(m(x), rng), leaves


def _check_attention_subblock(rng):
    m = AttentionSubblock(3, rng)
    m.eval()
    x = _leaf(rng, (2, 3, 4, 4))
    leaves = {"x": x, **_module_leaves(m)}
    return lambda: _weighted(m(x), rng), leaves


def _check_residual_subblock(rng):
    m = ResidualSubblock(3, rng)
    m.eval()
    x = _leaf(rng, (2, 3, 4, 4))
    leaves = {"x": x, **_module_leaves(m)}
    return lambda: _weighted(m(x), rng), leaves


def _make_gab_check(combine_mode, pair_mode="gate"):
    def factory(rng):
        m = GroupAttentionBlock(6, 8, rng, se_reduction=2, combine_mode=combine_mode,
                                pair_mode=pair_mode)
        m.eval()
        x = _leaf(rng, (2, 6, 4, 4))
        leaves = {"x": x, **_module_leaves(m)}
        return lambda: _weighted(m(x), rng), leaves

    return factory


def _make_variant_check(cls, **kw):
    def factory(rng):
        m = cls(6, 8, rng, **kw)
        m.eval()
        x = _leaf(rng, (2, 6, 4, 4))
        leaves = {"x": x, **_module_leaves(m)}
        return lambda: _weighted(m(x), rng), leaves

    return factory


def _check_loss_composite(rng):
    cfg = losses.LossConfig()
    target = Tensor((rng.random((2, 1, 4, 4)) > 0.6).astype(float))
    for _ in range(64):
        z = Tensor(rng.uniform(-2.0, 2.0, (2, 1, 4, 4)), requires_grad=True)

        def f():
            pred = sigmoid(z)
            return losses.all_wrap(losses.hybrid_loss(target, pred, cfg), cfg)

        with no_grad():
            hl = float(losses.hybrid_loss(target, sigmoid(z), cfg).data)
        if abs(abs(hl) - cfg.gamma) > 1e-3:  # keep away from the branch point
            return f, {"z": z}
    raise RuntimeError("could not draw a loss instance away from the branch point")


def _check_tiny_model(rng):
    from .model import Model, ModelConfig

    cfg = ModelConfig(scales=2, widths=[4, 8], se_reduction=2)
    m = Model(cfg, seed=int(rng.integers(1 << 31)))
    m.eval()
    x = Tensor(rng.random((1, 1, 8, 8)), requires_grad=True)
    target = Tensor((rng.random((1, 1, 8, 8)) > 0.5).astype(float))
    lcfg = losses.LossConfig()
    leaves = {"x": x, **_module_leaves(m)}

    def f():
        return losses.all_wrap(losses.hybrid_loss(target, m(x), lcfg), lcfg)

    return f, leaves


@dataclass
class CheckSpec:
    name: str
    factory: object
    instances: int = 100
    sample: int = 8
    base_tol: float = 0.0
    retries: int = 3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    passed: bool
    elapsed: float


@dataclass
class SuiteResult:
    checks: list = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def build_suite() -> list:
    primitives = [
        CheckSpec("add", _check_add),
        CheckSpec("mul", _check_mul),
        CheckSpec("div", _check_div),
        CheckSpec("log", _check_log),
        CheckSpec("abs", _check_abs),
        CheckSpec("clamp", _check_clamp),
        CheckSpec("sum_mean", _check_sum_mean),
        CheckSpec("matmul", _check_matmul),
        CheckSpec("relu", _check_relu),
        CheckSpec("leaky_relu", _check_leaky),
        CheckSpec("sigmoid", _check_sigmoid),
        CheckSpec("conv2d_1x1", _make_conv_check(1, 1, bias=True)),
        CheckSpec("conv2d_3x3", _make_conv_check(3, 1, bias=True)),
        CheckSpec("conv2d_5x5", _make_conv_check(5, 1, bias=False)),
        CheckSpec("conv2d_groups2", _make_conv_check(3, 2, bias=True)),
        CheckSpec("conv2d_groups4", _make_conv_check(3, 4, bias=False)),
        CheckSpec("max_pool2", _check_max_pool),
        CheckSpec("upsample_repeat2", _check_upsample),
        CheckSpec("global_avg_pool", _check_gap),
        CheckSpec("batch_norm_train", _make_bn_check(True)),
        CheckSpec("batch_norm_eval", _make_bn_check(False)),
        CheckSpec("dropout", _check_dropout),
        CheckSpec("concat_slice", _check_concat_slice),
        CheckSpec("channel_permute", _check_permute),
        CheckSpec("scale_channels", _check_scale_channels),
    ]
    composites = [
        CheckSpec("squeeze_excite", _check_squeeze_excite),
        CheckSpec("attention_module", _check_attention_module),
        CheckSpec("attention_subblock", _check_attention_subblock),
        CheckSpec("residual_subblock", _check_residual_subblock),
        CheckSpec("group_attention_block", _make_gab_check("permutation_equivariant_1x1")),
        CheckSpec("group_attention_block_shuffle", _make_gab_check("channel_shuffle")),
        CheckSpec("group_attention_block_concat", _make_gab_check(
            "permutation_equivariant_1x1", pair_mode="concat")),
        CheckSpec("basic_block", _make_variant_check(BasicBlock)),
        CheckSpec("preact_block", _make_variant_check(PreactBlock)),
        CheckSpec("resnext_block", _make_variant_check(ResNeXtBlock, cardinality=2)),
        CheckSpec("resnext_se_block", _make_variant_check(
            ResNeXtBlock, cardinality=2, use_se=True, se_reduction=2)),
        CheckSpec("res_a_block", _make_variant_check(ResABlock)),
        CheckSpec("hybrid_all_loss", _check_loss_composite),
        CheckSpec("tiny_model_end_to_end", _check_tiny_model,
                  instances=3, sample=6, base_tol=1e-5),
    ]
    return primitives + composites


def run_gradcheck_suite(seed: int = 0, tol: float = 1e-6, instances: int | None = None,
                        log=None) -> SuiteResult:
    """Run every registered gradient check; per-check tol = max(tol, base)."""
    result = SuiteResult()
    t0 = time.perf_counter()
    root = np.random.SeedSequence(seed)
    for spec in build_suite():
        use_tol = max(tol, spec.base_tol)
        n_inst = instances if instances is not None else spec.instances
        t1 = time.perf_counter()
        worst = 0.0
        ok = True
        for i in range(n_inst):
            ss = np.random.SeedSequence(entropy=root.entropy, spawn_key=(hash(spec.name) & 0xFFFF, i))
            report = None
            for attempt in range(spec.retries + 1):
                rng = np.random.default_rng(
                    np.random.SeedSequence(entropy=ss.entropy, spawn_key=ss.spawn_key + (attempt,)))
                f, leaves = spec.factory(rng)
                report = grad_check(f, leaves, tol=use_tol, sample=spec.sample, rng=rng)
                if report.passed:
                    break
            worst = max(worst, report.max_rel_err)
            if not report.passed:
                ok = False
                break
        res = CheckResult(spec.name, worst, use_tol, ok, time.perf_counter() - t1)
        result.checks.append(res)
        if log is not None:
            status = "PASS" if res.passed else "FAIL"
            log(f"{status} {res.name}: max_rel_err={res.max_rel_err:.3e} "
                f"tol={res.tol:.0e} ({res.elapsed:.1f}s)")
    result.elapsed = time.perf_counter() - t0
    return result
