"""The three networks: searchable mask-to-image generator, conditional patch
discriminator, and a small U-Net segmenter, plus discrete architecture
derivation from the learned mixture logits.

Parameters live in :class:`~genseg.autodiff.ParamGroup` objects (G, H, S, A);
forward passes take label-to-node bindings so the same code serves training,
evaluation, and second-order products.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamGroup
from .tensor import ConvSpec

# candidate pool per cell: kernel/stride/padding triples that all halve
# (or, transposed, double) even spatial extents
DOWN_CANDIDATES = (ConvSpec(4, 2, 1), ConvSpec(6, 2, 2), ConvSpec(8, 2, 3))
UP_CANDIDATES = tuple(ConvSpec(k, s, p, transposed=True) for k, s, p in ((4, 2, 1), (6, 2, 2), (8, 2, 3)))


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape).astype(np.float64)


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


class SearchableCell:
    """K candidate convolutions mixed by softmax weights over per-cell logits.

    All pool candidates share the stride and embed exactly into the largest
    kernel (zero borders, offset = padding difference), so the mixture runs
    as a single convolution of the softmax-weighted kernel sum; this equals
    the weighted sum of per-candidate outputs because convolution is linear
    in its kernel.
    """

    def __init__(self, name: str, in_ch: int, out_ch: int, transposed: bool):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.candidates = UP_CANDIDATES if transposed else DOWN_CANDIDATES
        big = max(self.candidates, key=lambda c: c.kernel)
        for c in self.candidates:
            if c.stride != big.stride or big.padding < c.padding \
                    or c.kernel + big.padding - c.padding > big.kernel:
                raise ValueError(f"candidate {c} does not embed into {big}")
        self.fused_spec = big

    def param_entries(self, rng: np.random.Generator) -> list[tuple[str, np.ndarray]]:
        entries = []
        for spec in self.candidates:
            k = spec.kernel
            wshape = (self.in_ch, self.out_ch, k, k) if spec.transposed else (self.out_ch, self.in_ch, k, k)
            entries.append((f"{self.name}.{spec.name}.w", _uniform_init(rng, wshape, self.in_ch * k * k)))
            entries.append((f"{self.name}.{spec.name}.b", np.zeros(self.out_ch, dtype=np.float64)))
        return entries

    def logit_label(self) -> str:
        return f"{self.name}.logits"

    def forward(self, params: dict[str, Node], logits: Node, x: Node) -> Node:
        weights = ad.softmax(logits)
        big = self.fused_spec
        w_eff = b_eff = None
        for idx, spec in enumerate(self.candidates):
            wk = params[f"{self.name}.{spec.name}.w"]
            bk = params[f"{self.name}.{spec.name}.b"]
            off = big.padding - spec.padding
            if spec.kernel != big.kernel:
                co, ci = wk.value.shape[0], wk.value.shape[1]
                wk = ad.pad_insert(wk, (co, ci, big.kernel, spec.kernel), 2, off)
                wk = ad.pad_insert(wk, (co, ci, big.kernel, big.kernel), 3, off)
            alpha = ad.slice_axis(weights, 0, idx, idx + 1)
            w_term, b_term = ad.mul(alpha, wk), ad.mul(alpha, bk)
            w_eff = w_term if w_eff is None else ad.add(w_eff, w_term)
            b_eff = b_term if b_eff is None else ad.add(b_eff, b_term)
        return ad.conv2d(x, w_eff, b_eff, big)


class GeneratorNet:
    """Mask-to-image U-Net whose every scale change is a searchable cell.

    Encoder cells halve the spatial extent, decoder cells double it; encoder
    output i is concatenated onto the decoder input at the matching scale.
    A 1x1 head with tanh maps to image channels, so outputs lie in (-1, 1).
    """

    def __init__(self, mask_channels: int = 1, img_channels: int = 1,
                 enc_cells: int = 3, base_channels: int = 8):
        self.enc_cells = enc_cells
        self.mask_channels = mask_channels
        self.img_channels = img_channels
        widths = [mask_channels] + [base_channels * 2 ** i for i in range(enc_cells)]
        self.encoders = [SearchableCell(f"enc{i+1}", widths[i], widths[i + 1], transposed=False)
                         for i in range(enc_cells)]
        self.decoders = []
        for j in range(1, enc_cells + 1):
            in_ch = widths[enc_cells] if j == 1 else 2 * widths[enc_cells - j + 1]
            out_ch = widths[enc_cells - j] if j < enc_cells else base_channels
            self.decoders.append(SearchableCell(f"dec{j}", in_ch, out_ch, transposed=True))
        self.head_in = base_channels

    def init_params(self, seed: int) -> tuple[ParamGroup, ParamGroup]:
        rng = np.random.default_rng(seed)
        g = ParamGroup("G")
        a = ParamGroup("A")
        for cell in self.encoders + self.decoders:
            g.entries.extend(cell.param_entries(rng))
            a.entries.append((cell.logit_label(), np.zeros(len(cell.candidates), dtype=np.float64)))
        g.entries.append(("head.w", _uniform_init(rng, (self.img_channels, self.head_in, 1, 1), self.head_in)))
        g.entries.append(("head.b", np.zeros(self.img_channels, dtype=np.float64)))
        return g, a

    def forward(self, g: dict[str, Node], a: dict[str, Node], mask: Node) -> Node:
        n, c, h, w = mask.value.shape
        if c != self.mask_channels:
            raise ValueError(f"mask has {c} channels, expected {self.mask_channels}")
        if h != w or not _is_power_of_two(h) or h < 2 ** self.enc_cells:
            raise ValueError(f"mask extent {h}x{w} must be a square power of two >= {2 ** self.enc_cells}")
        skips = []
        x = mask
        for cell in self.encoders:
            x = ad.tanh(cell.forward(g, a[cell.logit_label()], x))
            skips.append(x)
        for j, cell in enumerate(self.decoders, start=1):
            if j > 1:
                x = ad.concat([x, skips[self.enc_cells - j]], axis=1)
            x = ad.tanh(cell.forward(g, a[cell.logit_label()], x))
        x = ad.conv2d(x, g["head.w"], g["head.b"], ConvSpec(1, 1, 0))
        return ad.tanh(x)

    def cells(self) -> list[SearchableCell]:
        return self.encoders + self.decoders


class DiscriminatorNet:
    """Patch discriminator over channel-concatenated (mask, image) pairs.

    ``depth`` stride-2 convolutions followed by a 1x1 head produce a logit
    map; losses consume the logits directly, there is no final sigmoid.
    """

    def __init__(self, mask_channels: int = 1, img_channels: int = 1,
                 base_channels: int = 8, depth: int = 3):
        self.layers = []
        in_ch = mask_channels + img_channels
        for i in range(depth):
            out_ch = base_channels * 2 ** i
            self.layers.append((f"d{i+1}", in_ch, out_ch, ConvSpec(4, 2, 1)))
            in_ch = out_ch
        self.head_in = in_ch
        self.depth = depth

    def init_params(self, seed: int) -> ParamGroup:
        rng = np.random.default_rng(seed)
        h = ParamGroup("H")
        for name, in_ch, out_ch, spec in self.layers:
            k = spec.kernel
            h.entries.append((f"{name}.w", _uniform_init(rng, (out_ch, in_ch, k, k), in_ch * k * k)))
            h.entries.append((f"{name}.b", np.zeros(out_ch, dtype=np.float64)))
        h.entries.append(("head.w", _uniform_init(rng, (1, self.head_in, 1, 1), self.head_in)))
        h.entries.append(("head.b", np.zeros(1, dtype=np.float64)))
        return h

    def forward(self, h: dict[str, Node], mask: Node, image: Node) -> Node:
        if mask.value.shape[2:] != image.value.shape[2:]:
            raise ValueError(f"mask {mask.value.shape} and image {image.value.shape} are not spatially aligned")
        x = ad.concat([mask, image], axis=1)
        for name, _, _, spec in self.layers:
            x = ad.tanh(ad.conv2d(x, h[f"{name}.w"], h[f"{name}.b"], spec))
        return ad.conv2d(x, h["head.w"], h["head.b"], ConvSpec(1, 1, 0))


class SegNet:
    """Small fixed-architecture U-Net emitting per-pixel two-class logits."""

    def __init__(self, img_channels: int = 1, num_classes: int = 2,
                 depth: int = 2, base_channels: int = 8):
        self.img_channels = img_channels
        self.num_classes = num_classes
        self.depth = depth
        widths = [img_channels] + [base_channels * 2 ** i for i in range(depth)]
        self.down = [(f"down{i+1}", widths[i], widths[i + 1]) for i in range(depth)]
        self.up = []
        for j in range(1, depth + 1):
            in_ch = widths[depth] if j == 1 else 2 * widths[depth - j + 1]
            out_ch = widths[depth - j] if j < depth else base_channels
            self.up.append((f"up{j}", in_ch, out_ch))
        self.head_in = base_channels

    def init_params(self, seed: int) -> ParamGroup:
        rng = np.random.default_rng(seed)
        s = ParamGroup("S")
        for name, in_ch, out_ch in self.down:
            s.entries.append((f"{name}.w", _uniform_init(rng, (out_ch, in_ch, 4, 4), in_ch * 16)))
            s.entries.append((f"{name}.b", np.zeros(out_ch, dtype=np.float64)))
        for name, in_ch, out_ch in self.up:
            s.entries.append((f"{name}.w", _uniform_init(rng, (in_ch, out_ch, 4, 4), in_ch * 16)))
            s.entries.append((f"{name}.b", np.zeros(out_ch, dtype=np.float64)))
        s.entries.append(("head.w", _uniform_init(rng, (self.num_classes, self.head_in, 1, 1), self.head_in)))
        s.entries.append(("head.b", np.zeros(self.num_classes, dtype=np.float64)))
        return s

    @classmethod
    def from_params(cls, group: ParamGroup) -> "SegNet":
        """Reconstruct the layer structure from a saved parameter group."""
        depth = sum(1 for lbl, _ in group.entries if lbl.startswith("down") and lbl.endswith(".w"))
        first = group.get("down1.w")
        head = group.get("head.w")
        return cls(img_channels=first.shape[1], num_classes=head.shape[0],
                   depth=depth, base_channels=first.shape[0])

    def forward(self, s: dict[str, Node], image: Node) -> Node:
        n, c, h, w = image.value.shape
        if c != self.img_channels:
            raise ValueError(f"image has {c} channels, expected {self.img_channels}")
        down_spec = ConvSpec(4, 2, 1)
        up_spec = ConvSpec(4, 2, 1, transposed=True)
        skips = []
        x = image
        for name, _, _ in self.down:
            x = ad.tanh(ad.conv2d(x, s[f"{name}.w"], s[f"{name}.b"], down_spec))
            skips.append(x)
        for j, (name, _, _) in enumerate(self.up, start=1):
            if j > 1:
                x = ad.concat([x, skips[self.depth - j]], axis=1)
            x = ad.tanh(ad.conv2d(x, s[f"{name}.w"], s[f"{name}.b"], up_spec))
        return ad.conv2d(x, s["head.w"], s["head.b"], ConvSpec(1, 1, 0))


def predict_mask(logits: np.ndarray) -> np.ndarray:
    """Binarize two-class logits by argmax over the class axis."""
    return (logits[:, 1:2] > logits[:, 0:1]).astype(np.float64)


def derive_architecture(arch: ParamGroup) -> dict[str, int]:
    """Per cell, the index of the highest-softmax candidate (ties: lowest index)."""
    out = {}
    for label, logits in arch.entries:
        out[label] = int(np.argmax(logits))
    return out
