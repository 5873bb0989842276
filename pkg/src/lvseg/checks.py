"""Gradient-check battery covering every differentiable piece.

Shared by the CLI's gradcheck subcommand and by the acceptance tests:
primitive ops, pooling/resampling, convolution wrt input/weight/bias,
all six normalization kinds wrt every parameter, both losses, and a
tiny end-to-end model per architecture variant. Each check compares
taped gradients against central differences and reports the max
relative error against a per-check tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import bce_loss, soft_dice_loss
from .layers import (
    ConvParams,
    concat_channels,
    conv2d,
    crop_center,
    elu,
    maxpool2,
    relu,
    upsample2,
)
from .model import VARIANTS, UNetSpec, build, forward
from .norm import NORM_KINDS, NormSpec, init_norm_state, normalize
from .tensor import Tensor, gradcheck, moments, reduce_sum, sigmoid, sqrt

__all__ = ["CheckResult", "run_gradcheck_suite", "format_results"]

# central differences bottom out near sqrt(eps_f64) ~ 1e-8 of relative
# roundoff per coordinate; composites amplify that, so they get a wider
# gate and a larger step
_TOL_PRIMITIVE = 1e-6
_TOL_COMPOSITE = 1e-4
_H_COMPOSITE = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _rng_tensor(shape, seed, lo=-1.0, hi=1.0) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, shape))


def _primitive_checks() -> list[tuple]:
    x = lambda seed=0, shape=(2, 3, 4, 4): _rng_tensor(shape, seed)
    c = _rng_tensor((2, 3, 4, 4), 99)
    chan = _rng_tensor((1, 3, 1, 1), 7)
    checks = [
        ("add", lambda t: t + c, x(1)),
        ("add_broadcast", lambda t: t + chan, x(2)),
        ("sub", lambda t: c - t, x(3)),
        ("mul", lambda t: t * c, x(4)),
        ("mul_broadcast", lambda t: t * chan, x(5)),
        ("div", lambda t: t / (c * c + 1.0), x(6)),
        ("neg", lambda t: -t, x(7)),
        ("sqrt", lambda t: sqrt(t * t + 1.0), x(8)),
        ("sigmoid", lambda t: sigmoid(t), x(9, (2, 2, 3, 3))),
        ("reduce_sum_all", lambda t: reduce_sum(t, "all"), x(10)),
        ("reduce_sum_batch", lambda t: reduce_sum(t, "batch"), x(11)),
        ("reduce_sum_layer", lambda t: reduce_sum(t, "layer"), x(12)),
        ("reduce_sum_instance", lambda t: reduce_sum(t, "instance"), x(13)),
        ("reduce_sum_group", lambda t: reduce_sum(t, "group", groups=3), x(14, (2, 6, 3, 3))),
        ("moments_mean", lambda t: moments(t, "batch")[0], x(15)),
        ("moments_var", lambda t: moments(t, "batch")[1], x(16)),
        ("moments_group_var", lambda t: moments(t, "group", groups=2)[1], x(17, (2, 4, 3, 3))),
        ("upsample2", lambda t: upsample2(t), x(18, (1, 2, 3, 3))),
        ("crop_center", lambda t: crop_center(t, 3, 3), x(19, (1, 2, 6, 6))),
        ("concat_first", lambda t: concat_channels(t, c), x(22)),
        ("concat_second", lambda t: concat_channels(c, t), x(23)),
    ]
    # keep activations away from their kinks so numerics stay clean
    d = np.random.default_rng(20).uniform(-1, 1, (2, 2, 4, 4))
    far = np.where(np.abs(d) < 0.2, d + 0.5, d)
    checks.append(("elu", lambda t: elu(t), Tensor(far.copy())))
    checks.append(("relu", lambda t: relu(t), Tensor(far.copy())))
    # maxpool: well-separated values so the argmax never flips under nudges
    mp = np.random.default_rng(21).permutation(np.arange(2 * 2 * 4 * 4, dtype=np.float64))
    checks.append(("maxpool2", lambda t: maxpool2(t)[0], Tensor(mp.reshape(2, 2, 4, 4))))
    return checks


def _conv_checks() -> list[tuple]:
    out = []
    for k, pad in ((3, "same"), (3, "valid"), (2, "same")):
        rng = np.random.default_rng(30 + k * 10 + (pad == "same"))
        w = Tensor(rng.uniform(-0.5, 0.5, (4, 3, k, k)))
        b = Tensor(rng.uniform(-0.5, 0.5, (1, 4, 1, 1)))
        xv = Tensor(rng.uniform(-1, 1, (2, 3, 6, 6)))
        p = ConvParams(weight=w, bias=b, padding_mode=pad)
        out.append((f"conv{k}_{pad}_x", lambda t, p=p: conv2d(t, p), Tensor(xv.data.copy())))
        out.append((
            f"conv{k}_{pad}_w",
            lambda t, xv=xv, b=b, pad=pad: conv2d(xv, ConvParams(weight=t, bias=b, padding_mode=pad)),
            Tensor(w.data.copy()),
        ))
        out.append((
            f"conv{k}_{pad}_b",
            lambda t, xv=xv, w=w, pad=pad: conv2d(xv, ConvParams(weight=w, bias=t, padding_mode=pad)),
            Tensor(b.data.copy()),
        ))
    return out


def _norm_checks() -> list[tuple]:
    out = []
    for i, kind in enumerate(NORM_KINDS):
        spec = NormSpec(kind=kind, channels=4, groups=2)
        state = init_norm_state(spec)
        xv = _rng_tensor((3, 4, 5, 5), 40 + i, -2.0, 2.0)

        def wrt_x(t, spec=spec, state=state):
            return normalize(t, spec, state, mode="train")

        out.append((f"norm_{kind}_x", wrt_x, Tensor(xv.data.copy())))
        for pname in ("gamma", "beta", "blend_logit"):
            if pname == "blend_logit" and state.blend_logit is None:
                continue

            def wrt_p(t, spec=spec, state=state, xv=xv, pname=pname):
                setattr(state, pname, t)
                return normalize(xv, spec, state, mode="train")

            init = getattr(state, pname)
            out.append((f"norm_{kind}_{pname}", wrt_p, Tensor(init.data.copy())))
    return out


def _loss_checks() -> list[tuple]:
    rng = np.random.default_rng(50)
    t = (rng.random((2, 1, 6, 6)) > 0.5).astype(np.float64)
    z = Tensor(rng.uniform(-2, 2, (2, 1, 6, 6)))
    return [
        ("soft_dice_loss", lambda x, t=t: soft_dice_loss(x, t), Tensor(z.data.copy())),
        ("bce_loss", lambda x, t=t: bce_loss(x, t), Tensor(z.data.copy())),
    ]


def _model_checks() -> list[tuple]:
    out = []
    for variant in VARIANTS:
        spec = UNetSpec(variant=variant, depth=1, base_channels=2,
                        kernel_size=3, activation="elu", groups=2,
                        dropconnect_rate=0.0)
        model = build(spec, seed=3)
        xv = _rng_tensor((2, 1, 8, 8), 60, -1.0, 1.0)

        def run(t, model=model, spec=spec):
            return forward(model, spec, t, "train")

        out.append((f"model_{variant}", run, Tensor(xv.data.copy())))
    return out


def run_gradcheck_suite(progress=None) -> list[CheckResult]:
    """Run every check; returns results in execution order."""
    results = []
    groups = [
        (_primitive_checks(), _TOL_PRIMITIVE, 1e-6),
        (_conv_checks(), _TOL_COMPOSITE, _H_COMPOSITE),
        (_norm_checks(), _TOL_COMPOSITE, _H_COMPOSITE),
        (_loss_checks(), _TOL_COMPOSITE, _H_COMPOSITE),
        (_model_checks(), _TOL_COMPOSITE, _H_COMPOSITE),
    ]
    for checks, tol, h in groups:
        for name, fn, xv in checks:
            err = gradcheck(fn, xv, h=h)
            results.append(CheckResult(name=name, max_rel_err=err, tol=tol))
            if progress is not None:
                r = results[-1]
                progress(f"{'ok  ' if r.passed else 'FAIL'} {name:28s} "
                         f"max_rel_err={err:.3e} tol={tol:.0e}")
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'ok  ' if r.passed else 'FAIL'} {r.name:28s} "
             f"max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e}" for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} gradient checks passed")
    return "\n".join(lines)
