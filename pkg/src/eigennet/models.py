"""Block-structured models and the desk-scale presets.

A model is an ordered list of blocks; each block holds one or more eigen
layers (each followed by a rectifier) and exactly one local classifier head.
The last block's head is the model output. Blocks are the unit of locality:
in local training every block consumes a detached copy of its predecessor's
activation and trains against its own loss.
"""

import numpy as np

from . import autograd as ag
from .errors import ConfigError
from .layers import EigenConv2d, EigenLinear, LocalHead

PRESETS = ("mlp-4block", "cnn-4block")

MLP_WIDTHS = (784, 512, 256, 128, 64)
CNN_CHANNELS = (16, 32, 64, 128)
# 4x4/stride-2/pad-1 halves even extents exactly, which the patch-geometry
# contract requires (3x3/stride-2 has no integral tiling of 32 or 28).
CNN_KERNEL, CNN_STRIDE, CNN_PAD = 4, 2, 1


class Block:
    def __init__(self, layers, head):
        self.layers = layers
        self.head = head

    def forward(self, x):
        for layer in self.layers:
            x = ag.relu(layer.forward(x))
        return x

    def parameters(self, include_head=True):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        if include_head:
            out.extend(self.head.parameters())
        return out

    def orth_penalty(self):
        total = None
        for layer in self.layers:
            p = layer.orth_penalty()
            total = p if total is None else ag.add(total, p)
        return total


class Model:
    def __init__(self, blocks, num_classes, input_kind, input_shape, name="model"):
        if not blocks:
            raise ConfigError("a model needs at least one block")
        self.blocks = blocks
        self.num_classes = num_classes
        self.input_kind = input_kind  # 'vector' or 'image'
        self.input_shape = input_shape  # feature width, or (c, h, w)
        self.name = name

    def eigen_layers(self):
        return [layer for block in self.blocks for layer in block.layers]

    def heads(self):
        return [block.head for block in self.blocks]

    def forward_logits(self, x):
        """Full forward pass to the final head's logits (no detaching)."""
        h = x
        for block in self.blocks:
            h = block.forward(h)
        return self.blocks[-1].head.forward(h)

    def global_parameters(self):
        """End-to-end trainable set: all layers plus the output head only."""
        out = []
        for i, block in enumerate(self.blocks):
            out.extend(block.parameters(include_head=(i == len(self.blocks) - 1)))
        return out

    def max_gram_drift(self):
        return max(layer.gram_drift() for layer in self.eigen_layers())

    def param_counts(self):
        """(raw stored scalars, constrained degrees of freedom, dense-equivalent)."""
        raw = sum(layer.raw_param_count() for layer in self.eigen_layers())
        raw += sum(head.raw_param_count() for head in self.heads())
        dof = sum(layer.effective_dof() for layer in self.eigen_layers())
        dense = sum(layer.m * layer.n if isinstance(layer, EigenLinear) else layer.inner.m * layer.inner.n
                    for layer in self.eigen_layers())
        return raw, dof, dense


def _spawn_seeds(seed, count):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def build_mlp_4block(num_classes=10, input_width=MLP_WIDTHS[0], seed=0):
    widths = (input_width,) + MLP_WIDTHS[1:]
    seeds = _spawn_seeds(seed, 2 * (len(widths) - 1))
    blocks = []
    for i in range(len(widths) - 1):
        layer = EigenLinear(widths[i], widths[i + 1], seeds[2 * i], name=f"layer{i}")
        head = LocalHead(widths[i + 1], num_classes, seeds[2 * i + 1], name=f"head{i}")
        blocks.append(Block([layer], head))
    return Model(blocks, num_classes, "vector", input_width, name="mlp-4block")


def build_cnn_4block(num_classes=10, input_geometry=(3, 32, 32), seed=0):
    c, h, w = input_geometry
    seeds = _spawn_seeds(seed, 2 * len(CNN_CHANNELS))
    blocks = []
    in_ch = c
    for i, out_ch in enumerate(CNN_CHANNELS):
        layer = EigenConv2d(in_ch, out_ch, CNN_KERNEL, CNN_KERNEL, CNN_STRIDE, CNN_PAD,
                            seeds[2 * i], name=f"layer{i}")
        head = LocalHead(out_ch, num_classes, seeds[2 * i + 1], name=f"head{i}")
        blocks.append(Block([layer], head))
        in_ch = out_ch
    return Model(blocks, num_classes, "image", input_geometry, name="cnn-4block")


def build_preset(name, num_classes, input_geometry, seed):
    """input_geometry is (c, h, w); MLPs flatten it to a feature width."""
    if name == "mlp-4block":
        c, h, w = input_geometry
        return build_mlp_4block(num_classes, c * h * w, seed)
    if name == "cnn-4block":
        return build_cnn_4block(num_classes, input_geometry, seed)
    raise ConfigError(f"unknown preset {name!r}, expected one of {PRESETS}")
