"""Finite-difference checks for every differentiable operation.

Each entry builds a scalar function of one or more inputs from a random
draw; every input is checked separately at three independent points.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nm
from .adapters import LmoeAdapter, LoraAdapter, load_balance_loss, lmoe_forward, lora_forward
from .losses import LossWeights, ce_loss, kd_loss, personalized_loss
from .nn import multi_head_attention, patch_embed
from .numerics import GradCheckReport, Tensor, grad_check, grad_check_params
from .rng import stream
from .segmodel import ModelConfig, build_model

TOLERANCE = 1e-4
EPS = 1e-5
N_POINTS = 3


def _project(out, rng):
    """Random linear functional of ``out`` so every output coordinate matters."""
    return nm.tsum(out * rng.normal(size=out.shape))


def _rand_params(n):
    return lambda rng: [rng.normal(size=s) for s in n]


def _suite():
    """name -> (input generator, scalar fn over Tensors)."""
    cases = {}

    def case(name, shapes=None, gen=None):
        def deco(fn):
            cases[name] = (gen or _rand_params(shapes), fn)
            return fn
        return deco

    case("add", [(3, 4), (4,)])(lambda r, a, b: _project(nm.add(a, b), r))
    case("sub", [(3, 4), (3, 1)])(lambda r, a, b: _project(nm.sub(a, b), r))
    case("mul", [(3, 4), (3, 4)])(lambda r, a, b: _project(nm.mul(a, b), r))
    case("div", gen=lambda rng: [rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 1))])(
        lambda r, a, b: _project(nm.div(a, b), r)
    )
    case("neg", [(5,)])(lambda r, a: _project(nm.neg(a), r))
    case("relu", [(4, 5)])(lambda r, a: _project(nm.relu(a), r))
    case("sigmoid", [(4, 5)])(lambda r, a: _project(nm.sigmoid(a), r))
    case("log_sigmoid", [(4, 5)])(lambda r, a: _project(nm.log_sigmoid(a), r))
    case("exp", [(4, 5)])(lambda r, a: _project(nm.exp(a), r))
    case("reshape", [(2, 6)])(lambda r, a: _project(nm.reshape(a, (3, 4)), r))
    case("permute", [(2, 3, 4)])(lambda r, a: _project(nm.permute(a, (2, 0, 1)), r))
    case("stack", [(2, 3), (2, 3), (2, 3)])(lambda r, a, b, c: _project(nm.stack([a, b, c], axis=1), r))
    case("sum", [(3, 4)])(lambda r, a: _project(nm.tsum(a, axis=1, keepdims=True), r))
    case("mean", [(3, 4)])(lambda r, a: _project(nm.mean(a, axis=0), r))
    case("matmul", [(2, 3, 4), (4, 5)])(lambda r, a, b: _project(nm.matmul(a, b), r))
    case("matmul_batched", [(2, 3, 4), (2, 4, 2)])(lambda r, a, b: _project(nm.matmul(a, b), r))
    case("linear", [(6, 4), (5, 4), (5,)])(lambda r, x, w, b: _project(nm.linear(x, w, b), r))
    case("softmax", [(3, 5)])(lambda r, a: _project(nm.softmax(a), r))
    case("layernorm", gen=lambda rng: [rng.normal(size=(3, 6)), rng.uniform(0.5, 1.5, 6), rng.normal(size=6)])(
        lambda r, x, g, b: _project(nm.layernorm(x, g, b), r)
    )
    case("conv2d", [(2, 2, 5, 5), (3, 2, 3, 3), (3,)])(lambda r, x, w, b: _project(nm.conv2d(x, w, b, 1), r))
    case("conv2d_valid", [(2, 4, 4), (1, 2, 3, 3)])(lambda r, x, w: _project(nm.conv2d(x, w, None, 0), r))
    case("avgpool", [(2, 4, 6)])(lambda r, a: _project(nm.avgpool2d(a, 2), r))
    case("upsample", [(2, 3, 2)])(lambda r, a: _project(nm.upsample_nearest(a, 2), r))
    case("patch_embed", [(2, 1, 8, 8), (6, 16), (6,)])(lambda r, x, w, b: _project(patch_embed(x, w, b, 4), r))

    # the key bias is left out: softmax is invariant to it, so its true
    # gradient is exactly zero and relative error would only measure roundoff
    attn_keys = ["q.weight", "q.bias", "k.weight", "v.weight", "v.bias", "o.weight", "o.bias"]

    def attention_case(rng):
        return [rng.normal(size=(2, 4, 6))] + [rng.normal(size=(6, 6) if k.endswith("weight") else 6) * 0.5 for k in attn_keys]

    @case("attention", gen=attention_case)
    def _attention(r, x, *ws):
        weights = dict(zip(attn_keys, ws))
        weights["k.bias"] = Tensor(np.full(6, 0.3))
        return _project(multi_head_attention(x, weights, heads=2), r)

    case("lora_forward", [(5, 6), (2, 6), (4, 2), (4, 6)])(
        lambda r, x, A, B, W0: _project(lora_forward(LoraAdapter(A, B, 2, 4.0), W0, x), r)
    )

    def lmoe_case(rng):
        arrays = [rng.normal(size=(2, 16, 6)), rng.normal(size=(3, 6)), rng.normal(size=(5, 3)), rng.normal(size=(4, 3))]
        for _ in range(4):
            arrays += [rng.normal(size=(3, 3, 3, 3)) * 0.5, rng.normal(size=3) * 0.1]
        arrays.append(rng.normal(size=(5, 6)))
        return arrays

    @case("lmoe_forward", gen=lmoe_case)
    def _lmoe(r, x, A, B, G, *rest):
        from .adapters import ConvExpert

        experts = [ConvExpert(s, rest[2 * j], rest[2 * j + 1]) for j, s in enumerate((1, 1, 2, 2))]
        adapter = LmoeAdapter(A, B, G, experts, 2, 3, 6.0)
        out, aux = adapter(x, rest[-1], None, (4, 4))
        return _project(out, r) + aux

    def lb_case(rng):
        z = rng.normal(size=(8, 4))
        return [z]

    @case("load_balance_loss", gen=lb_case)
    def _lb(r, z):
        probs = nm.softmax(z)
        mask = np.zeros((8, 4), dtype=bool)
        mask[np.arange(8), [0, 0, 0, 1, 1, 2, 0, 3]] = True
        return load_balance_loss(probs, mask)

    def ce_case(rng):
        return [rng.normal(size=(2, 4, 4)) * 2]

    @case("ce_loss", gen=ce_case)
    def _ce(r, z):
        return ce_loss(z, (r.uniform(size=z.shape) > 0.5).astype(float))

    @case("kd_loss", gen=ce_case)
    def _kd(r, z):
        return kd_loss(z, r.normal(size=z.shape) * 2, 0.5)

    return cases


def run_case(name, seed=0, n_points=N_POINTS, eps=EPS, tolerance=TOLERANCE) -> GradCheckReport:
    gen, fn = _suite()[name]
    worst = 0.0
    for k in range(n_points):
        arrays = gen(stream(seed, "gradcheck", name, k))
        for i in range(len(arrays)):

            def f(t, i=i, k=k):
                args = [Tensor(a) for a in arrays]
                args[i] = t
                return fn(stream(seed, "gradcheck-proj", name, k), *args)

            rep = grad_check(f, arrays[i], eps, tolerance, name)
            worst = max(worst, rep.max_rel_error)
    return GradCheckReport(name, worst, tolerance, worst <= tolerance)


def composite_config() -> ModelConfig:
    return ModelConfig(image_size=32, patch_size=8, embed_dim=16, depth=2, heads=2, mask_scale=4)


def composite_case(seed=0, n_points=N_POINTS, eps=EPS, tolerance=TOLERANCE) -> GradCheckReport:
    """Full personalized objective (CE + L-MoE aux + KD) through a complete L-MoE model."""
    cfg = composite_config()
    worst = 0.0
    for k in range(n_points):
        rng = stream(seed, "gradcheck", "composite", k)
        student = build_model(cfg, seed + k)
        for t in student.trainable_params.values():
            t.data = rng.normal(0.0, 0.3, size=t.shape)
        teacher = build_model(cfg.with_variant("lora"), seed + k, base_params=student.base_params)
        for t in teacher.trainable_params.values():
            t.data = rng.normal(0.0, 0.3, size=t.shape)
        images = rng.uniform(size=(2, 1, cfg.image_size, cfg.image_size))
        labels = (rng.uniform(size=(2, cfg.mask_size, cfg.mask_size)) > 0.5).astype(float)
        with nm.no_grad():
            t_logits = teacher.forward_batch(images)[0].data

        def loss_fn():
            logits, aux = student.forward_batch(images)
            return personalized_loss(logits, labels, t_logits, aux, LossWeights())[0]

        picked = {n: p for n, p in student.trainable_params.items() if n.startswith("block0.attn.q") or n.startswith("decoder.conv2")}
        rep = grad_check_params(loss_fn, picked, eps, tolerance, "personalized_loss")
        worst = max(worst, rep.max_rel_error)
    return GradCheckReport("personalized_loss", worst, tolerance, worst <= tolerance)


def case_names() -> list[str]:
    return list(_suite())


def run_suite(seed=0) -> list[GradCheckReport]:
    reports = [run_case(name, seed) for name in case_names()]
    reports.append(composite_case(seed))
    return reports
