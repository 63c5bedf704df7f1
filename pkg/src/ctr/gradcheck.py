"""Finite-difference checks for every differentiable op and the composed models.

All checks run in float64. Each case maps input arrays to one output tensor;
the scalar checked is ``sum(output * R)`` for a fixed random ``R``, so every
output element contributes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, Decoder, PBCEncoder, SelfAttentionEncoder
from .autodiff import Tensor
from .head import TrainingTarget, refine_loss
from .model import ModelConfig, RefineModel
from .nn import LayerNorm, ParameterSet

OP_TOL = 1e-3
MODEL_TOL = 1e-2
OP_EPS = 1e-3
MODEL_EPS = 1e-6  # deep relu stacks: a small step keeps kinks out of the stencil


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(self.rel_error < self.tol)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 2.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm((a - b).ravel())
    den = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return float(num / den)


def check_fn(name: str, fn: Callable[..., Tensor], inputs: list[np.ndarray], tol: float = OP_TOL,
             eps: float = OP_EPS, seed: int = 0) -> CheckResult:
    """Compare analytic and central-difference gradients of ``fn`` w.r.t. all ``inputs``."""
    with ad.precision("float64"):
        xs = [np.array(x, dtype=np.float64) for x in inputs]
        ts = [Tensor(x, requires_grad=True) for x in xs]
        out = fn(*ts)
        # own stream: a projection equal to an input can cancel the gradient
        r = np.random.default_rng([seed, 7919]).standard_normal(out.shape)
        ad.sum_(out * Tensor(r)).backward()
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

        def scalar():
            return float((fn(*[Tensor(x) for x in xs]).data * r).sum())

        with ad.no_grad():
            numeric = [_numeric_grad(scalar, x, eps) for x in xs]
    err = rel_error(np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric]))
    return CheckResult(name, err, tol)


def check_params(name: str, loss_fn: Callable[[], Tensor], params: ParameterSet, tol: float = MODEL_TOL,
                 eps: float = MODEL_EPS) -> CheckResult:
    """FD check of a scalar loss against every parameter of a float64 parameter set."""
    params.zero_grad()
    loss_fn().backward()
    analytic = np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params])
    with ad.no_grad():
        numeric = np.concatenate([_numeric_grad(lambda: loss_fn().item(), p.data, eps).ravel() for p in params])
    params.zero_grad()
    return CheckResult(name, rel_error(analytic, numeric), tol)


# -- op registry ---------------------------------------------------------

def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list]]:
    """Inputs are uniform in [-2, 2], mostly 5 x 7; kinked ops keep a margin from their kinks."""

    def u(*shape):
        return rng.uniform(-2.0, 2.0, shape)

    bce_target = rng.uniform(0, 1, (5, 7))
    huber = np.concatenate([rng.uniform(0.05, 0.9, 18), rng.uniform(1.1, 2.0, 17)]) * rng.choice([-1.0, 1.0], 35)
    return {
        "add": (ad.add, [u(5, 7), u(7)]),
        "sub": (ad.sub, [u(2, 5, 7), u(5, 1)]),
        "mul": (ad.mul, [u(5, 7), u(5, 7)]),
        "div": (ad.div, [u(5, 7), _away_from_zero(rng, (1, 7), 0.5)]),
        "exp": (ad.exp, [u(5, 7)]),
        "relu": (ad.relu, [_away_from_zero(rng, (5, 7))]),
        "sigmoid": (ad.sigmoid, [u(5, 7)]),
        "matmul": (ad.matmul, [u(2, 5, 7), u(7, 4)]),
        "transpose_last_two": (ad.transpose_last_two, [u(2, 5, 7)]),
        "permute": (lambda x: ad.permute(x, (2, 0, 1)), [u(2, 5, 7)]),
        "reshape": (lambda x: ad.reshape(x, (7, 5)), [u(5, 7)]),
        "concat": (lambda a, b: ad.concat([a, b], axis=0), [u(5, 7), u(2, 7)]),
        "concat_last_dim": (lambda a, b: ad.concat_last_dim(a, b), [u(5, 7), u(5, 3)]),
        "broadcast_row": (lambda v: ad.broadcast_row(v, 5), [u(1, 7)]),
        "index_last": (lambda x: ad.index_last(x, 2, 5), [u(5, 7)]),
        "sum": (lambda x: ad.sum_(x, axis=1), [u(5, 7)]),
        "mean": (lambda x: ad.mean(x, axis=-1, keepdims=True), [u(5, 7)]),
        "softmax": (lambda x: ad.softmax(x, axis=-1), [u(6, 9)]),
        "softmax_axis0": (lambda x: ad.softmax(x, axis=0), [u(6, 9)]),
        "linear": (ad.linear, [u(5, 7), u(7, 4), u(4)]),
        "layernorm": (ad.layernorm, [u(5, 7), u(7), u(7)]),
        "bce_with_logits": (lambda x: ad.bce_with_logits(x, bce_target), [u(5, 7)]),
        "smooth_l1": (ad.smooth_l1, [huber.reshape(5, 7)]),
    }


def check_ops(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [check_fn(name, fn, inputs, seed=seed) for name, (fn, inputs) in _op_cases(rng).items()]


def registered_ops() -> list[str]:
    return list(_op_cases(np.random.default_rng(0)))


# -- composed blocks -----------------------------------------------------

def _small_cfg(d: int = 8) -> AttentionConfig:
    return AttentionConfig(d_model=d, n_heads=2, n_layers=2, ffn_expansion=2)


def check_blocks(seed: int = 0, n: int = 10, d: int = 8) -> list[CheckResult]:
    """Encoders and decoders checked w.r.t. their inputs and parameters."""
    rng = np.random.default_rng(seed)
    out = []
    with ad.precision("float64"):
        cfg = _small_cfg(d)
        x, k = rng.standard_normal((2, n, d)), rng.standard_normal((2, 9, d))
        r = rng.standard_normal((2, n, d))
        rk = rng.standard_normal((2, 9, d))

        ps = ParameterSet(np.random.default_rng(seed))
        sa = SelfAttentionEncoder(ps, cfg)
        out.append(check_fn("self_attention_encode", lambda t: sa(t)[0], [x], tol=MODEL_TOL, eps=MODEL_EPS))
        out.append(check_params("self_attention_encode.params",
                                lambda: ad.sum_(sa(Tensor(x))[0] * Tensor(r)), ps))

        ps = ParameterSet(np.random.default_rng(seed))
        pbc = PBCEncoder(ps, cfg)

        def pbc_out(a, b):
            f, fk = pbc(a, b)
            return ad.concat([f, fk], axis=-2)

        out.append(check_fn("pbc_encode", pbc_out, [x, k], tol=MODEL_TOL, eps=MODEL_EPS))
        out.append(check_params("pbc_encode.params",
                                lambda: ad.sum_(pbc_out(Tensor(x), Tensor(k)) * Tensor(np.concatenate([r, rk], 1))),
                                ps))

        for scheme in ("standard", "channelwise", "extended"):
            ps = ParameterSet(np.random.default_rng(seed))
            dec = Decoder(ps, d, scheme, n_heads=2)
            # non-zero s logits so the compression weights are exercised
            if dec.s_logits is not None:
                dec.s_logits.data[...] = rng.standard_normal(dec.s_logits.shape)
            ry = rng.standard_normal((2, 1, d))
            out.append(check_fn(f"decode.{scheme}", lambda t: dec(t), [x], tol=MODEL_TOL, eps=MODEL_EPS))
            out.append(check_params(f"decode.{scheme}.params", lambda: ad.sum_(dec(Tensor(x)) * Tensor(ry)), ps))

        u = rng.uniform(-2.0, 2.0, (5, 7))
        ws = [rng.uniform(-2.0, 2.0, s) for s in ((7, 6), (6, 6), (6, 3))]
        out.append(check_fn("mlp3", lambda x, a, b, c: ad.linear(ad.relu(ad.linear(ad.relu(ad.linear(x, a)), b)), c),
                            [u, *ws], eps=MODEL_EPS))

        ps = ParameterSet(np.random.default_rng(seed))
        ln = LayerNorm(ps, "ln", d)
        out.append(check_fn("layernorm_layer", lambda t: ln(t), [x], tol=OP_TOL))
    return out


def check_models(seed: int = 0, n: int = 10, d: int = 8) -> list[CheckResult]:
    """Full refinement models: loss gradient against every parameter."""
    if not 8 <= n <= 12:
        raise ValueError("end-to-end checks use N in [8, 12]")
    rng = np.random.default_rng(seed)
    out = []
    with ad.precision("float64"):
        for variant in ("ct3d", "ct3dpp"):
            cfg = ModelConfig(variant=variant, attn=_small_cfg(d))
            model = RefineModel(cfg, seed=seed)
            # push the residual head out of its near-zero init so every layer carries signal
            for p in model.params:
                if p.name.startswith("head.reg"):
                    p.data[...] = rng.uniform(-0.5, 0.5, p.shape)
            pr = rng.standard_normal((4, n, cfg.input_dim))
            kr = rng.standard_normal((4, 9, cfg.input_dim)) if variant == "ct3dpp" else None
            iou = np.array([0.3, 0.6, 0.8, 0.9])
            target = TrainingTarget.build(iou, rng.standard_normal((4, 7)) * 0.3)
            out.append(check_params(f"model.{variant}", lambda: refine_loss(model(pr, kr), target), model.params))
    return out


def run_all(seed: int = 0) -> list[CheckResult]:
    return check_ops(seed) + check_blocks(seed) + check_models(seed)
