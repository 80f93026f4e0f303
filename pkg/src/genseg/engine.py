"""Trilevel training engine.

One iteration runs three coupled stages: a single descent step on the
generator and discriminator weights (adversarial objectives over real
mask/image pairs), a single descent step of the segmenter on synthetic plus
real pairs, and an architecture update whose gradient is chained backwards
through both one-step updates via mixed second-derivative products. Plain
one-step gradient updates are used for the inner variables on purpose: the
architecture chain differentiates exactly those steps.

Also provides the two reference modes: ``baseline`` (segmenter on real data
only) and ``separate`` (fit the generator first, freeze it, then fit the
segmenter on its outputs plus real data).
"""
from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass, fields

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    def threadpool_limits(*args, **kwargs):
        return contextlib.nullcontext()

from . import augment as aug
from . import autodiff as ad
from . import metrics as met
from .autodiff import Node, ParamGroup, bind, constant
from .models import DiscriminatorNet, GeneratorNet, SegNet, predict_mask
from .synthdata import Dataset

MODES = ("genseg", "separate", "baseline")
BACKENDS = ("fd", "exact")

# architecture optimizer settings (adaptive moments, decoupled decay)
ARCH_BETA1 = 0.5
ARCH_BETA2 = 0.999
ARCH_WEIGHT_DECAY = 1e-5
ARCH_EPS = 1e-8

AUGMENT_MAX_LEN = 3


class TrainingAborted(RuntimeError):
    """Raised when a loss or gradient turns non-finite mid-run."""


@dataclass
class TrainConfig:
    mode: str = "genseg"
    seed: int = 0
    iters: int = 5000
    batch: int = 0  # 0 = auto: full training set when <= 32 examples, else 16
    img_size: int = 32
    enc_cells: int = 3
    base_channels: int = 8
    eta_g: float = 2e-3
    eta_h: float = 2e-3
    eta_s: float = 0.2
    eta_a: float = 1e-4
    gamma: float = 1.0
    lambda_l1: float = 100.0
    eps_scale: float = 0.01
    hypergrad_backend: str = "fd"
    direct_path: bool = False
    augment_rotate: bool = True
    augment_flip: bool = True
    augment_translate: bool = True
    data_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.hypergrad_backend not in BACKENDS:
            raise ValueError(f"hypergrad_backend must be one of {BACKENDS}")
        for name in ("eta_g", "eta_h", "eta_s", "eta_a", "gamma", "lambda_l1", "eps_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.iters < 0 or self.batch < 0:
            raise ValueError("iters and batch must be >= 0")

    def batch_size(self, n_train: int) -> int:
        if self.batch:
            return min(self.batch, n_train)
        return n_train if n_train <= 32 else 16


# config file keys in canonical order; dots map to underscores on the dataclass
CONFIG_KEYS = [
    "mode", "seed", "iters", "batch", "img_size", "enc_cells", "base_channels",
    "eta_g", "eta_h", "eta_s", "eta_a", "gamma", "lambda_l1", "eps_scale",
    "hypergrad_backend", "direct_path",
    "augment.rotate", "augment.flip", "augment.translate",
    "data_dir", "out_dir",
]

_FIELD_FOR_KEY = {k: k.replace(".", "_") for k in CONFIG_KEYS}
_TYPES = {f.name: f.type for f in fields(TrainConfig)}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    typ = _TYPES[_FIELD_FOR_KEY[key]]
    if typ == "bool":
        if raw not in ("true", "false"):
            raise ConfigError(f"key '{key}': expected true or false, got '{raw}'")
        return raw == "true"
    if typ == "int":
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"key '{key}': not an integer: '{raw}'") from e
    if typ == "float":
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"key '{key}': not a number: '{raw}'") from e
    return raw


def parse_config(text: str, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments); unknown keys are errors."""
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_FOR_KEY:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        values[_FIELD_FOR_KEY[key]] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in _FIELD_FOR_KEY:
            raise ConfigError(f"override: unknown config key '{key}'")
        values[_FIELD_FOR_KEY[key]] = _coerce(key, str(raw))
    try:
        return TrainConfig(**values)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def resolved_config_text(cfg: TrainConfig) -> str:
    lines = []
    for key in CONFIG_KEYS:
        val = getattr(cfg, _FIELD_FOR_KEY[key])
        if isinstance(val, bool):
            val = "true" if val else "false"
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def config_digest(cfg: TrainConfig) -> str:
    return hashlib.sha256(resolved_config_text(cfg).encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Node, target: float) -> Node:
    """Mean binary cross-entropy of a logit map against a constant target."""
    if target == 1.0:
        return ad.mean_(ad.softplus(ad.neg(logits)))
    if target == 0.0:
        return ad.mean_(ad.softplus(logits))
    raise ValueError(f"target must be 0 or 1, got {target}")


def seg_cross_entropy(logits: Node, masks: np.ndarray) -> Node:
    """Mean pixel-wise two-class cross-entropy against binary masks."""
    m = constant(np.asarray(masks, dtype=np.float64))
    z0 = ad.slice_axis(logits, 1, 0, 1)
    z1 = ad.slice_axis(logits, 1, 1, 2)
    zt = ad.add(ad.mul(m, z1), ad.mul(ad.shift(ad.neg(m), 1.0), z0))
    lse = ad.logsumexp(logits, axis=1, keepdims=True)
    return ad.mean_(ad.sub(lse, zt))


def l1_mean(a: Node, b: Node) -> Node:
    return ad.mean_(ad.absval(ad.sub(a, b)))


def _const_binding(group: ParamGroup) -> dict[str, Node]:
    return {lbl: constant(arr) for lbl, arr in group.entries}


def _gd_step(group: ParamGroup, grads, eta: float) -> ParamGroup:
    entries = [(lbl, arr - eta * g) for (lbl, arr), g in zip(group.entries, grads)]
    return ParamGroup(group.name, entries)


def _check_finite(value: float, what: str, iteration: int):
    if not math.isfinite(value):
        raise TrainingAborted(f"{what} became non-finite ({value}) at iteration {iteration}")


def _check_finite_grads(grads, what: str, iteration: int):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"gradient of {what} became non-finite at iteration {iteration}")


@dataclass
class TrainState:
    G: ParamGroup
    H: ParamGroup
    S: ParamGroup
    A: ParamGroup
    adam_m: np.ndarray
    adam_v: np.ndarray
    adam_t: int = 0
    iteration: int = 0
    best_metric: float = -1.0
    best_iteration: int = -1
    best_params: dict[str, ParamGroup] | None = None
    last_loss_seg: float = 0.0
    last_loss_g: float = 0.0
    last_loss_d: float = 0.0

    def groups(self) -> dict[str, ParamGroup]:
        return {"G": self.G, "H": self.H, "S": self.S, "A": self.A}


class Trainer:
    """Owns the networks, the configuration, and the per-iteration stages."""

    def __init__(self, config: TrainConfig, train_ds: Dataset, val_ds: Dataset,
                 test_ds: Dataset | None = None):
        if len(train_ds) == 0:
            raise ValueError("training set must not be empty")
        self.config = config
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.test_ds = test_ds
        extent = train_ds[0].image.shape[-1]
        if extent != config.img_size:
            raise ValueError(f"img_size {config.img_size} does not match data extent {extent}")
        img_channels = train_ds[0].image.shape[0]
        self.gen = GeneratorNet(mask_channels=1, img_channels=img_channels,
                                enc_cells=config.enc_cells, base_channels=config.base_channels)
        disc_depth = min(3, int(math.log2(config.img_size)) - 1)
        self.disc = DiscriminatorNet(mask_channels=1, img_channels=img_channels,
                                     base_channels=config.base_channels, depth=max(1, disc_depth))
        self.seg = SegNet(img_channels=img_channels, num_classes=2,
                          depth=2, base_channels=config.base_channels)
        self.aug_kinds = aug.enabled_kinds(config.augment_rotate, config.augment_flip,
                                           config.augment_translate)

    def init_state(self) -> TrainState:
        ss = np.random.SeedSequence(self.config.seed)
        gen_ss, disc_ss, seg_ss, _ = ss.spawn(4)
        G, A = self.gen.init_params(gen_ss)
        H = self.disc.init_params(disc_ss)
        S = self.seg.init_params(seg_ss)
        return TrainState(G=G, H=H, S=S, A=A,
                          adam_m=np.zeros(A.size), adam_v=np.zeros(A.size))

    def loop_rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.config.seed).spawn(4)[3])

    # -- stage I ------------------------------------------------------------

    def _gan_graph(self, G: ParamGroup, H: ParamGroup, A: ParamGroup,
                   masks: np.ndarray, images: np.ndarray):
        gb, hb, ab = bind(G), bind(H), bind(A)
        m, i = constant(masks), constant(images)
        fake = self.gen.forward(gb, ab, m)
        d_real = self.disc.forward(hb, m, i)
        d_fake_detached = self.disc.forward(hb, m, ad.stop_gradient(fake))
        d_fake = self.disc.forward(hb, m, fake)
        l_disc = ad.add(bce_with_logits(d_real, 1.0), bce_with_logits(d_fake_detached, 0.0))
        l_gen = bce_with_logits(d_fake, 1.0)
        if self.config.lambda_l1 > 0:
            l_gen = ad.add(l_gen, ad.scale(l1_mean(fake, i), self.config.lambda_l1))
        return l_disc, l_gen, gb, hb, ab

    def gan_losses(self, G: ParamGroup, A: ParamGroup, H: ParamGroup,
                   masks: np.ndarray, images: np.ndarray) -> tuple[float, float]:
        """Discriminator and generator loss values on one real batch.

        The discriminator term sees generated images through a stop-gradient,
        so its updates never flow into the generator.
        """
        if len(masks) == 0:
            raise ValueError("gan_losses needs a non-empty batch")
        l_disc, l_gen, *_ = self._gan_graph(G, H, A, masks, images)
        return float(l_disc.value), float(l_gen.value)

    def stage1_update(self, state: TrainState, masks: np.ndarray, images: np.ndarray):
        """One plain descent step on G (generator loss) and H (discriminator loss)."""
        if len(masks) == 0:
            raise ValueError("stage1_update needs a non-empty batch")
        l_disc, l_gen, gb, hb, _ = self._gan_graph(state.G, state.H, state.A, masks, images)
        _check_finite(float(l_disc.value), "discriminator loss", state.iteration)
        _check_finite(float(l_gen.value), "generator loss", state.iteration)
        g_G = ad.group_backward(l_gen, gb, state.G)
        g_H = ad.group_backward(l_disc, hb, state.H)
        _check_finite_grads(g_G, "generator loss", state.iteration)
        _check_finite_grads(g_H, "discriminator loss", state.iteration)
        state.G = _gd_step(state.G, g_G, self.config.eta_g)
        state.H = _gd_step(state.H, g_H, self.config.eta_h)
        state.last_loss_g = float(l_gen.value)
        state.last_loss_d = float(l_disc.value)

    # -- stage II -----------------------------------------------------------

    def synth_batch(self, G: ParamGroup, A: ParamGroup, masks: np.ndarray,
                    ops_per_mask) -> tuple[np.ndarray, np.ndarray]:
        """Augment each real mask and render its image with the generator.

        The architecture enters this forward pass as a frozen constant; the
        chain in stage III tracks its influence through the stage-I update
        (plus the direct term when ``direct_path`` is set).
        """
        m_hats = np.stack([aug.apply_sequence(ops, m) for ops, m in zip(ops_per_mask, masks)])
        images = self.gen.forward(_const_binding(G), _const_binding(A), constant(m_hats))
        return m_hats, images.value

    def stage2_objective(self, sb: dict[str, Node], synth_masks, synth_images: Node,
                         real_masks, real_images) -> Node:
        """Segmentation loss on synthetic data plus gamma times the real-data loss."""
        obj = seg_cross_entropy(self.seg.forward(sb, synth_images), synth_masks)
        if self.config.gamma > 0:
            real_loss = seg_cross_entropy(self.seg.forward(sb, constant(real_images)), real_masks)
            obj = ad.add(obj, ad.scale(real_loss, self.config.gamma))
        return obj

    def stage2_update(self, state: TrainState, synth_masks: np.ndarray,
                      synth_images: np.ndarray, real_masks: np.ndarray,
                      real_images: np.ndarray):
        """One plain descent step of S on the combined segmentation objective."""
        if len(synth_masks) == 0:
            raise ValueError("stage2_update needs a non-empty synthetic batch")
        if self.config.gamma > 0 and len(real_masks) == 0:
            raise ValueError("stage2_update needs a non-empty real batch when gamma > 0")
        sb = bind(state.S)
        obj = self.stage2_objective(sb, synth_masks, constant(synth_images),
                                    real_masks, real_images)
        _check_finite(float(obj.value), "segmentation objective", state.iteration)
        g_S = ad.group_backward(obj, sb, state.S)
        _check_finite_grads(g_S, "segmentation objective", state.iteration)
        state.S = _gd_step(state.S, g_S, self.config.eta_s)
        state.last_loss_seg = float(obj.value)

    def _baseline_update(self, state: TrainState, real_masks, real_images):
        sb = bind(state.S)
        loss = seg_cross_entropy(self.seg.forward(sb, constant(real_images)), real_masks)
        _check_finite(float(loss.value), "segmentation loss", state.iteration)
        g_S = ad.group_backward(loss, sb, state.S)
        state.S = _gd_step(state.S, g_S, self.config.eta_s)
        state.last_loss_seg = float(loss.value)

    # -- stage III ----------------------------------------------------------

    def stage3_hypergrad(self, G_pre: ParamGroup, H_pre: ParamGroup, S_pre: ParamGroup,
                         state: TrainState, gan_masks: np.ndarray, gan_images: np.ndarray,
                         m_hats: np.ndarray, val_masks: np.ndarray,
                         val_images: np.ndarray) -> np.ndarray:
        """Validation-loss gradient with respect to the architecture logits.

        Chains three factors: the validation-loss gradient at the updated
        segmenter, the mixed second derivative of the stage-II objective in
        (updated generator weights, segmenter), and the mixed second
        derivative of the generator loss in (architecture, generator
        weights). The two step sizes multiply in; either being zero makes the
        product exactly zero, as does a stationary validation loss.
        """
        cfg = self.config
        if cfg.eta_g == 0.0 or cfg.eta_s == 0.0:
            return np.zeros(state.A.size)

        sb = bind(state.S)
        val_loss = seg_cross_entropy(self.seg.forward(sb, constant(val_images)), val_masks)
        v = ad.flat_grad(val_loss, sb, state.S)
        if not np.any(v):
            return np.zeros(state.A.size)

        fd = cfg.hypergrad_backend == "fd"
        eps_rule = lambda vec: cfg.eps_scale / float(np.linalg.norm(vec))  # noqa: E731
        a_const = _const_binding(state.A)

        # only the synthetic term depends on the generator; the gamma real-data
        # term has no generator dependence and contributes zero here
        def synth_seg_loss(g_binding, s_binding):
            images = self.gen.forward(g_binding, a_const, constant(m_hats))
            return seg_cross_entropy(self.seg.forward(s_binding, images), m_hats)

        if fd:
            gb = bind(state.G)
            images = self.gen.forward(gb, a_const, constant(m_hats))
            u = self._seg_hvp_fd(images, gb, state.G, S_pre, v, m_hats, eps_rule)
        else:
            u = ad.mixed_hvp_exact(synth_seg_loss, state.G, S_pre, v)

        def gen_loss(a_binding, g_binding):
            m, i = constant(gan_masks), constant(gan_images)
            fake = self.gen.forward(g_binding, a_binding, m)
            loss = bce_with_logits(self.disc.forward(_const_binding(H_pre), m, fake), 1.0)
            if cfg.lambda_l1 > 0:
                loss = ad.add(loss, ad.scale(l1_mean(fake, i), cfg.lambda_l1))
            return loss

        if fd:
            w = ad.mixed_hvp_fd(gen_loss, state.A, G_pre, u, eps_rule=eps_rule)
        else:
            w = ad.mixed_hvp_exact(gen_loss, state.A, G_pre, u)
        hyper = cfg.eta_g * cfg.eta_s * w

        if cfg.direct_path:
            # architecture also enters generation inside stage II directly
            def synth_seg_loss_arch(a_binding, s_binding):
                g_const = _const_binding(state.G)
                images = self.gen.forward(g_const, a_binding, constant(m_hats))
                return seg_cross_entropy(self.seg.forward(s_binding, images), m_hats)

            if fd:
                ab = bind(state.A)
                images = self.gen.forward(_const_binding(state.G), ab, constant(m_hats))
                direct = self._seg_hvp_fd(images, ab, state.A, S_pre, v, m_hats, eps_rule)
            else:
                direct = ad.mixed_hvp_exact(synth_seg_loss_arch, state.A, S_pre, v)
            hyper = hyper - cfg.eta_s * direct
        return hyper

    def _seg_hvp_fd(self, images: Node, p_binding, p_group: ParamGroup,
                    S_base: ParamGroup, v: np.ndarray, m_hats: np.ndarray,
                    eps_rule) -> np.ndarray:
        """Central-difference mixed HVP of the synthetic segmentation loss,
        differentiated with respect to the binding that produced ``images``.

        The generator forward pass does not depend on the segmenter, so its
        graph is shared by the two perturbed-segmenter evaluations.
        """
        eps = eps_rule(v)
        s0 = S_base.flatten()

        def grad_p(svec):
            sb = _const_binding(S_base.unflatten(svec))
            loss = seg_cross_entropy(self.seg.forward(sb, images), m_hats)
            return ad.flat_grad(loss, p_binding, p_group)

        return (grad_p(s0 + eps * v) - grad_p(s0 - eps * v)) / (2.0 * eps)

    def outer_update_A(self, state: TrainState, hypergrad: np.ndarray,
                       weight_decay: float = ARCH_WEIGHT_DECAY):
        """Adaptive-moment step on the architecture logits with decoupled decay."""
        if hypergrad.shape != (state.A.size,):
            raise ValueError(f"hypergrad shape {hypergrad.shape} != ({state.A.size},)")
        state.adam_t += 1
        t = state.adam_t
        state.adam_m = ARCH_BETA1 * state.adam_m + (1 - ARCH_BETA1) * hypergrad
        state.adam_v = ARCH_BETA2 * state.adam_v + (1 - ARCH_BETA2) * hypergrad ** 2
        m_hat = state.adam_m / (1 - ARCH_BETA1 ** t)
        v_hat = state.adam_v / (1 - ARCH_BETA2 ** t)
        flat = state.A.flatten()
        flat = flat - self.config.eta_a * (m_hat / (np.sqrt(v_hat) + ARCH_EPS) + weight_decay * flat)
        state.A = state.A.unflatten(flat)

    # -- evaluation and the loop ---------------------------------------------

    def evaluate(self, S: ParamGroup, dataset: Dataset) -> tuple[float, float]:
        """Mean dice and jaccard of the segmenter over a dataset."""
        return evaluate_segmenter(self.seg, S, dataset)

    def _record(self, state: TrainState, split: str, d: float, j: float) -> met.EvalRecord:
        return met.EvalRecord(state.iteration, split, d, j, state.last_loss_seg,
                              state.last_loss_g, state.last_loss_d)

    def train(self) -> tuple[list[met.EvalRecord], TrainState]:
        """Run the configured mode for ``iters`` iterations.

        Validation runs after every epoch-equivalent (one pass over the
        training set); the best-validation segmenter snapshot is kept and
        evaluated on the test split at the end. BLAS runs single-threaded so
        identical runs are bit-identical and small matrix products avoid
        synchronization overhead.
        """
        with threadpool_limits(limits=1, user_api="blas"):
            return self._train_loop()

    def _train_loop(self) -> tuple[list[met.EvalRecord], TrainState]:
        cfg = self.config
        state = self.init_state()
        rng = self.loop_rng()
        n = len(self.train_ds)
        batch = cfg.batch_size(n)
        ipe = max(1, math.ceil(n / batch))  # iterations per epoch-equivalent
        records: list[met.EvalRecord] = []
        sep_switch = cfg.iters // 2

        for it in range(1, cfg.iters + 1):
            state.iteration = it
            idx = np.arange(n) if batch == n else rng.choice(n, size=batch, replace=False)
            masks = self.train_ds.masks(idx)
            images = self.train_ds.images(idx)

            if cfg.mode == "baseline":
                self._baseline_update(state, masks, images)
            elif cfg.mode == "separate":
                if it <= sep_switch:
                    self.stage1_update(state, masks, images)
                else:
                    ops = self._sample_ops(rng, len(masks))
                    m_hats, synth_images = self.synth_batch(state.G, state.A, masks, ops)
                    self.stage2_update(state, m_hats, synth_images, masks, images)
            else:
                G_pre, H_pre, S_pre = state.G, state.H, state.S
                self.stage1_update(state, masks, images)
                ops = self._sample_ops(rng, len(masks))
                m_hats, synth_images = self.synth_batch(state.G, state.A, masks, ops)
                self.stage2_update(state, m_hats, synth_images, masks, images)
                val_masks = self.val_ds.masks()
                val_images = self.val_ds.images()
                hyper = self.stage3_hypergrad(G_pre, H_pre, S_pre, state, masks, images,
                                              m_hats, val_masks, val_images)
                self.outer_update_A(state, hyper)

            if it % ipe == 0:
                d, j = self.evaluate(state.S, self.val_ds)
                records.append(self._record(state, "val", d, j))
                if d > state.best_metric:
                    state.best_metric = d
                    state.best_iteration = it
                    state.best_params = {k: v.copy() for k, v in state.groups().items()}

        if state.best_params is None and cfg.iters > 0:
            state.best_params = {k: v.copy() for k, v in state.groups().items()}
        if self.test_ds is not None and len(self.test_ds) and cfg.iters > 0:
            best_S = state.best_params["S"] if state.best_params else state.S
            d, j = self.evaluate(best_S, self.test_ds)
            records.append(self._record(state, "test", d, j))
        return records, state

    def _sample_ops(self, rng: np.random.Generator, count: int) -> list:
        if not self.aug_kinds:
            return [[] for _ in range(count)]
        return [aug.random_sequence(rng, self.aug_kinds, AUGMENT_MAX_LEN, self.config.img_size)
                for _ in range(count)]


def evaluate_segmenter(seg: SegNet, S: ParamGroup, dataset: Dataset,
                       chunk: int = 64) -> tuple[float, float]:
    """Mean dice and jaccard of a segmenter's argmax predictions over a dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    sb = bind(S)
    dices, jacs = [], []
    for start in range(0, len(dataset), chunk):
        idx = range(start, min(start + chunk, len(dataset)))
        images = dataset.images(idx)
        masks = dataset.masks(idx)
        logits = seg.forward(sb, constant(images))
        preds = predict_mask(logits.value)
        for p, m in zip(preds, masks):
            dices.append(met.dice(p, m))
            jacs.append(met.jaccard(p, m))
    return float(np.mean(dices)), float(np.mean(jacs))


# ---------------------------------------------------------------------------
# brute-force architecture-gradient oracle
# ---------------------------------------------------------------------------

def hypergrad_fd_oracle(trainer: Trainer, G: ParamGroup, H: ParamGroup, S: ParamGroup,
                        A: ParamGroup, gan_masks: np.ndarray, gan_images: np.ndarray,
                        m_hats: np.ndarray, val_masks: np.ndarray, val_images: np.ndarray,
                        h: float = 1e-4, arch_live_in_generation: bool = False) -> np.ndarray:
    """Central finite differences of the full map: architecture to validation loss.

    Replays stage I and stage II from the given base parameters for each
    perturbed architecture and evaluates the validation loss at the resulting
    segmenter. By default generation inside stage II uses the frozen base
    architecture, matching the dependency the implemented chain tracks;
    ``arch_live_in_generation`` matches the direct-path variant instead.
    """
    cfg = trainer.config
    a0 = A.flatten()

    def pipeline(avec: np.ndarray) -> float:
        A_pert = A.unflatten(avec)
        gb, ab = bind(G), bind(A_pert)
        m, i = constant(gan_masks), constant(gan_images)
        fake = trainer.gen.forward(gb, ab, m)
        l_gen = bce_with_logits(trainer.disc.forward(_const_binding(H), m, fake), 1.0)
        if cfg.lambda_l1 > 0:
            l_gen = ad.add(l_gen, ad.scale(l1_mean(fake, i), cfg.lambda_l1))
        G_prime = _gd_step(G, ad.group_backward(l_gen, gb, G), cfg.eta_g)

        A_gen = A_pert if arch_live_in_generation else A
        synth_images = trainer.gen.forward(_const_binding(G_prime), _const_binding(A_gen),
                                           constant(m_hats)).value
        sb = bind(S)
        obj = trainer.stage2_objective(sb, m_hats, constant(synth_images),
                                       gan_masks, gan_images)
        S_prime = _gd_step(S, ad.group_backward(obj, sb, S), cfg.eta_s)

        sb2 = bind(S_prime)
        val_loss = seg_cross_entropy(trainer.seg.forward(sb2, constant(val_images)), val_masks)
        return float(val_loss.value)

    grad = np.zeros_like(a0)
    for k in range(a0.size):
        e = np.zeros_like(a0)
        e[k] = h
        grad[k] = (pipeline(a0 + e) - pipeline(a0 - e)) / (2 * h)
    return grad
