"""Gradient verification routines behind the ``gradcheck`` command.

Three levels: per-op and per-network first-order checks against central
finite differences, the finite-difference mixed Hessian-vector product
against its exact double-backward oracle, and the full architecture-gradient
chain against brute-force differencing of the training pipeline.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import engine as eng
from .autodiff import ParamGroup, bind, constant
from .models import DiscriminatorNet, GeneratorNet, SegNet
from .synthdata import gen_task
from .tensor import ConvSpec

GRAD_TOL = 1e-5
HVP_COSINE_TOL = 0.999
HVP_RATIO_RANGE = (0.99, 1.01)
HYPER_COSINE_EXACT_TOL = 0.99
HYPER_COSINE_FD_TOL = 0.95


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def fd_gradient(f, x0: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    g = np.zeros_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        g[i] = (f(x0 + e) - f(x0 - e)) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(reference))), 1e-8)
    return float(np.max(np.abs(analytic - reference))) / scale


def _param_rel_error(loss_fn, group: ParamGroup, h: float = 1e-5) -> float:
    """Analytic vs finite-difference gradient over a flat parameter vector."""
    binding = bind(group)
    analytic = ad.flat_grad(loss_fn(binding), binding, group)

    def value(vec):
        b = bind(group.unflatten(vec))
        return float(loss_fn(b).value)

    numeric = fd_gradient(value, group.flatten(), h)
    return rel_error(analytic, numeric)


def check_op_grads(seed: int = 0) -> dict[str, float]:
    """Max relative FD error for every differentiable primitive and composite."""
    rng = np.random.default_rng(seed)

    def x(shape, positive=False, away_from_zero=False):
        v = rng.uniform(0.5, 1.5, size=shape) if positive else rng.normal(0, 1, size=shape)
        if away_from_zero:
            v = np.sign(v) * (np.abs(v) + 0.2)
        return v

    other = constant(x((3, 4)))
    cases = {
        "add": lambda a: ad.add(a, other),
        "sub": lambda a: ad.sub(other, a),
        "mul": lambda a: ad.mul(a, other),
        "div": lambda a: ad.div(other, ad.shift(ad.mul(a, a), 0.5)),
        "neg": ad.neg,
        "relu": ad.relu,
        "sigmoid": ad.sigmoid,
        "tanh": ad.tanh,
        "exp": ad.exp,
        "softplus": ad.softplus,
        "abs": ad.absval,
        "softmax": lambda a: ad.softmax(a, axis=1),
        "logsumexp": lambda a: ad.logsumexp(a, axis=1),
        "reshape": lambda a: ad.reshape(a, (4, 3)),
        "transpose": lambda a: ad.transpose(a, (1, 0)),
        "concat": lambda a: ad.concat([a, other], axis=1),
        "slice": lambda a: ad.slice_axis(a, 1, 1, 3),
        "sum": lambda a: ad.sum_(a, axes=1, keepdims=True),
        "mean": lambda a: ad.mean_(a, axes=0),
        "broadcast": lambda a: ad.broadcast_to(ad.reshape(a, (3, 4, 1)), (3, 4, 5)),
    }
    out = {}
    for name, fn in cases.items():
        away = name in ("relu", "abs")
        base = x((3, 4), positive=False, away_from_zero=away)
        group = ParamGroup("G", [("x", base)])
        weight = None

        def loss(binding, fn=fn):
            nonlocal weight
            y = fn(binding["x"])
            if weight is None:
                weight = rng.normal(0, 1, size=y.value.shape)
            return ad.dot(y, constant(weight))

        out[name] = _param_rel_error(loss, group)

    # log needs positive inputs
    group = ParamGroup("G", [("x", x((3, 4), positive=True))])
    w_log = rng.normal(0, 1, size=(3, 4))
    out["log"] = _param_rel_error(lambda b: ad.dot(ad.log(b["x"]), constant(w_log)), group)

    # matmul, both arguments
    group = ParamGroup("G", [("a", x((3, 4))), ("b", x((4, 2)))])
    w_mm = rng.normal(0, 1, size=(3, 2))
    out["matmul"] = _param_rel_error(
        lambda bi: ad.dot(ad.matmul(bi["a"], bi["b"]), constant(w_mm)), group)

    # convolutions: plain, strided, and transposed, including weight and bias
    for tag, spec, wshape, bias_len in (
        ("conv_421", ConvSpec(4, 2, 1), (2, 3, 4, 4), 2),
        ("conv_311", ConvSpec(3, 1, 1), (2, 3, 3, 3), 2),
        ("upconv_421", ConvSpec(4, 2, 1, transposed=True), (3, 2, 4, 4), 2),
        ("upconv_622", ConvSpec(6, 2, 2, transposed=True), (3, 2, 6, 6), 2),
    ):
        group = ParamGroup("G", [("x", x((2, 3, 6, 6))),
                                 ("w", x(wshape) * 0.3),
                                 ("b", x((bias_len,)) * 0.3)])
        probe = {}

        def conv_loss(bi, spec=spec, probe=probe):
            y = ad.conv2d(bi["x"], bi["w"], bi["b"], spec)
            if "w" not in probe:
                probe["w"] = np.random.default_rng(0).normal(0, 1, size=y.value.shape)
            return ad.dot(y, constant(probe["w"]))

        out[tag] = _param_rel_error(conv_loss, group)

    # im2col / col2im as standalone linear maps
    group = ParamGroup("G", [("x", x((2, 2, 5, 5)))])
    w_cols = rng.normal(0, 1, size=(2 * 9, 2 * 9))
    out["im2col"] = _param_rel_error(
        lambda bi: ad.dot(ad.im2col(bi["x"], 3, 2, 1), constant(w_cols)), group)
    group = ParamGroup("G", [("c", x((2 * 9, 2 * 9)))])
    w_im = rng.normal(0, 1, size=(2, 2, 5, 5))
    out["col2im"] = _param_rel_error(
        lambda bi: ad.dot(ad.col2im(bi["c"], (2, 2, 5, 5), 3, 2, 1), constant(w_im)), group)
    return out


def _tiny_nets(seed: int):
    gen = GeneratorNet(enc_cells=1, base_channels=2)
    disc = DiscriminatorNet(base_channels=2, depth=2)
    seg = SegNet(depth=2, base_channels=2)
    G, A = gen.init_params(seed)
    H = disc.init_params(seed + 1)
    S = seg.init_params(seed + 2)
    return gen, disc, seg, G, A, H, S


def check_net_grads(seed: int = 0) -> dict[str, float]:
    """FD check of full-network parameter gradients on small instances."""
    rng = np.random.default_rng(seed)
    gen, disc, seg, G, A, H, S = _tiny_nets(seed)
    masks = (rng.uniform(size=(2, 1, 8, 8)) < 0.3).astype(np.float64)
    images = rng.uniform(-0.9, 0.9, size=(2, 1, 8, 8))
    target = rng.normal(0, 1, size=(2, 1, 8, 8))

    ab = {lbl: constant(arr) for lbl, arr in A.entries}
    out = {}

    def gen_loss(bi):
        y = gen.forward(bi, ab, constant(masks))
        return ad.mean_(ad.mul(ad.sub(y, constant(target)), ad.sub(y, constant(target))))

    out["generator"] = _param_rel_error(gen_loss, G)

    def arch_loss(bi):
        gb = {lbl: constant(arr) for lbl, arr in G.entries}
        y = gen.forward(gb, bi, constant(masks))
        return ad.mean_(ad.mul(ad.sub(y, constant(target)), ad.sub(y, constant(target))))

    out["architecture"] = _param_rel_error(arch_loss, A)

    def disc_loss(bi):
        return eng.bce_with_logits(disc.forward(bi, constant(masks), constant(images)), 1.0)

    out["discriminator"] = _param_rel_error(disc_loss, H)

    def seg_loss(bi):
        return eng.seg_cross_entropy(seg.forward(bi, constant(images)), masks)

    out["segmenter"] = _param_rel_error(seg_loss, S)
    return out


def check_hvp(seed: int = 0, trials: int = 3) -> tuple[float, float]:
    """Worst cosine and magnitude ratio of fd vs exact mixed HVPs on small nets."""
    cosines, ratios = [], []
    for t in range(trials):
        rng = np.random.default_rng(seed + 17 * t)
        x = rng.normal(0, 1, size=(3, 2, 6, 6))
        y = rng.normal(0, 1, size=(3, 2, 6, 6))
        spec = ConvSpec(3, 1, 1)
        P = ParamGroup("G", [("w1", rng.normal(0, 0.5, size=(4, 2, 3, 3))),
                             ("b1", rng.normal(0, 0.1, size=4))])
        Q = ParamGroup("S", [("w2", rng.normal(0, 0.5, size=(2, 4, 3, 3))),
                             ("b2", rng.normal(0, 0.1, size=2))])

        def loss(pb, qb):
            hlayer = ad.tanh(ad.conv2d(constant(x), pb["w1"], pb["b1"], spec))
            out = ad.conv2d(hlayer, qb["w2"], qb["b2"], spec)
            diff = ad.sub(out, constant(y))
            return ad.mean_(ad.mul(diff, diff))

        v = rng.normal(0, 1, size=Q.size)
        fd = ad.mixed_hvp_fd(loss, P, Q, v)
        exact = ad.mixed_hvp_exact(loss, P, Q, v)
        cosines.append(cosine(fd, exact))
        ratios.append(float(np.linalg.norm(fd) / np.linalg.norm(exact)))
    worst_ratio = ratios[int(np.argmax(np.abs(np.asarray(ratios) - 1.0)))]
    return min(cosines), worst_ratio


def tiny_instance(seed: int = 0, backend: str = "exact"):
    """An 8x8 single-cell training setup small enough for brute-force checks."""
    cfg = eng.TrainConfig(mode="genseg", seed=seed, iters=0, img_size=8, enc_cells=1,
                          base_channels=2, hypergrad_backend=backend)
    data = gen_task(seed=seed + 100, n=6, size=8)
    train = eng.Dataset(data.pairs[:4], split="train")
    val = eng.Dataset(data.pairs[4:], split="val")
    trainer = eng.Trainer(cfg, train, val)
    return trainer, train, val


def measured_iteration(trainer, state, rng, train, val):
    """Run stages I-III once without the architecture update; returns the chain
    hypergradient plus everything the brute-force oracle needs to replay."""
    masks, images = train.masks(), train.images()
    val_masks, val_images = val.masks(), val.images()
    G_pre, H_pre, S_pre = state.G, state.H, state.S
    trainer.stage1_update(state, masks, images)
    ops = trainer._sample_ops(rng, len(masks))
    m_hats, synth = trainer.synth_batch(state.G, state.A, masks, ops)
    trainer.stage2_update(state, m_hats, synth, masks, images)
    chain = trainer.stage3_hypergrad(G_pre, H_pre, S_pre, state, masks, images,
                                     m_hats, val_masks, val_images)
    return chain, (G_pre, H_pre, S_pre, masks, images, m_hats, val_masks, val_images)


def check_hypergrad(seed: int = 0, warmup: int = 20, h: float = 1e-4) -> tuple[float, float]:
    """Cosines of the exact- and fd-backend chains against the pipeline oracle."""
    results = []
    for backend in ("exact", "fd"):
        trainer, train, val = tiny_instance(seed, backend)
        state = trainer.init_state()
        rng = trainer.loop_rng()
        for it in range(1, warmup + 1):
            state.iteration = it
            chain, _ = measured_iteration(trainer, state, rng, train, val)
            trainer.outer_update_A(state, chain)
        state.iteration = warmup + 1
        chain, saved = measured_iteration(trainer, state, rng, train, val)
        G_pre, H_pre, S_pre, masks, images, m_hats, val_masks, val_images = saved
        oracle = eng.hypergrad_fd_oracle(trainer, G_pre, H_pre, S_pre, state.A,
                                         masks, images, m_hats, val_masks, val_images, h=h)
        results.append(cosine(chain, oracle))
    return results[0], results[1]
