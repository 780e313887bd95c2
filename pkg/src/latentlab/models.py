"""Model graphs with per-block taps, and the auxiliary logits heads.

A ModelGraph is a chain of stages; the output of stage l is the tap z(l),
and a final pooled linear classifier maps the last tap to logits.  Auxiliary
LogitsHead instances turn any intermediate tap into class logits through the
same pool-then-linear form.
"""

import math

import numpy as np

from . import tensor as T
from .errors import InvalidArchitecture, MissingHead, ShapeMismatch
from .tensor import Tensor


def _uniform_param(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class ConvUnit:
    def __init__(self, weight, stride=1, padding=1):
        self.weight = weight
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [self.weight]


class AffineUnit:
    """Per-channel scale and shift; the frozen-normalization form."""

    def __init__(self, scale, shift):
        self.scale = scale
        self.shift = shift

    def forward(self, x):
        return T.affine_channel(x, self.scale, self.shift)

    def parameters(self):
        return [self.scale, self.shift]


class ResidualBlock:
    def __init__(self, conv1, aff1, conv2, aff2, skip_conv=None, skip_aff=None):
        self.conv1 = conv1
        self.aff1 = aff1
        self.conv2 = conv2
        self.aff2 = aff2
        self.skip_conv = skip_conv
        self.skip_aff = skip_aff

    def forward(self, x):
        h = T.relu(self.aff1.forward(self.conv1.forward(x)))
        h = self.aff2.forward(self.conv2.forward(h))
        if self.skip_conv is not None:
            x = self.skip_aff.forward(self.skip_conv.forward(x))
        return T.relu(h + x)

    def parameters(self):
        out = self.conv1.parameters() + self.aff1.parameters()
        out += self.conv2.parameters() + self.aff2.parameters()
        if self.skip_conv is not None:
            out += self.skip_conv.parameters() + self.skip_aff.parameters()
        return out


class Stage:
    """One tap-producing segment: an optional stem, then a residual block."""

    def __init__(self, block, stem_conv=None, stem_aff=None):
        self.block = block
        self.stem_conv = stem_conv
        self.stem_aff = stem_aff

    def forward(self, x):
        if self.stem_conv is not None:
            x = T.relu(self.stem_aff.forward(self.stem_conv.forward(x)))
        return self.block.forward(x)

    def parameters(self):
        out = []
        if self.stem_conv is not None:
            out += self.stem_conv.parameters() + self.stem_aff.parameters()
        return out + self.block.parameters()


class LogitsHead:
    """Pooled linear read-out: logits = gap(tap) @ phi + eta."""

    def __init__(self, phi, eta):
        self.phi = phi
        self.eta = eta

    def __call__(self, tap):
        return T.matmul(T.global_avg_pool(tap), self.phi) + self.eta

    def parameters(self):
        return [self.phi, self.eta]


class ModelGraph:
    """Stages 1..N-1 produce taps; the output head is layer N (its own head is
    the identity).  Tracks forward passes by rows for budget accounting."""

    def __init__(self, stages, output_head, input_shape, num_classes, arch=None):
        self.stages = stages
        self.output_head = output_head
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.arch = arch
        self.forward_count = 0

    @property
    def num_layers(self):
        return len(self.stages) + 1

    def forward_with_taps(self, x):
        if x.data.ndim != 4 or x.data.shape[1:] != self.input_shape:
            raise ShapeMismatch(
                f"expected input (B, {', '.join(map(str, self.input_shape))}), got {x.data.shape}"
            )
        self.forward_count += x.data.shape[0]
        taps = []
        h = x
        for stage in self.stages:
            h = stage.forward(h)
            taps.append(h)
        return self.output_head(h), taps

    def forward(self, x):
        logits, _ = self.forward_with_taps(x)
        return logits

    def parameters(self):
        out = []
        for stage in self.stages:
            out += stage.parameters()
        return out + self.output_head.parameters()

    def reset_forward_count(self):
        self.forward_count = 0


def build_resnet_small(blocks, widths, num_classes, input_shape, seed, dtype=np.float32):
    """Stem conv, then `blocks` residual blocks (stride 2 from the second
    block on), pooled linear classifier.  Fan-in scaled uniform init, drawn
    in a fixed order from the seed."""
    widths = list(widths)
    if blocks < 1:
        raise InvalidArchitecture(f"need at least one block, got {blocks}")
    if len(widths) != blocks:
        raise InvalidArchitecture(f"widths {widths} does not match blocks={blocks}")
    if any(w < 1 for w in widths):
        raise InvalidArchitecture(f"widths must be positive, got {widths}")
    if num_classes < 2:
        raise InvalidArchitecture(f"need at least 2 classes, got {num_classes}")
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise InvalidArchitecture(f"input_shape must be (C, H, W) positive, got {input_shape}")

    rng = np.random.default_rng(seed)
    c_in = input_shape[0]

    def conv(cin, cout, k, stride):
        w = _uniform_param(rng, (cout, cin, k, k), cin * k * k, dtype)
        return ConvUnit(w, stride=stride, padding=k // 2)

    def affine(c):
        return AffineUnit(
            Tensor(np.ones(c, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        )

    stages = []
    for l in range(blocks):
        cin = widths[l - 1] if l > 0 else widths[0]
        cout = widths[l]
        stride = 1 if l == 0 else 2
        stem_conv = conv(c_in, widths[0], 3, 1) if l == 0 else None
        stem_aff = affine(widths[0]) if l == 0 else None
        conv1 = conv(cin, cout, 3, stride)
        aff1 = affine(cout)
        conv2 = conv(cout, cout, 3, 1)
        aff2 = affine(cout)
        if stride != 1 or cin != cout:
            block = ResidualBlock(conv1, aff1, conv2, aff2, conv(cin, cout, 1, stride), affine(cout))
        else:
            block = ResidualBlock(conv1, aff1, conv2, aff2)
        stages.append(Stage(block, stem_conv, stem_aff))

    phi = _uniform_param(rng, (widths[-1], num_classes), widths[-1], dtype)
    eta = _uniform_param(rng, (num_classes,), widths[-1], dtype)
    head = LogitsHead(phi, eta)

    arch = {
        "kind": "resnet_small",
        "blocks": blocks,
        "widths": widths,
        "num_classes": num_classes,
        "input_shape": list(input_shape),
        "seed": seed,
    }
    return ModelGraph(stages, head, input_shape, num_classes, arch=arch)


def build_head(model, layer, seed, dtype=None):
    """Fresh auxiliary head for tap `layer` (1-based, < num_layers)."""
    if not 1 <= layer <= len(model.stages):
        raise MissingHead(f"layer {layer} out of range 1..{len(model.stages)}")
    if dtype is None:
        dtype = model.parameters()[0].dtype
    channels = _tap_channels(model, layer)
    rng = np.random.default_rng(seed)
    phi = _uniform_param(rng, (channels, model.num_classes), channels, dtype)
    eta = Tensor(np.zeros(model.num_classes, dtype=dtype), requires_grad=True)
    return LogitsHead(phi, eta)


def _tap_channels(model, layer):
    if model.arch is not None:
        return model.arch["widths"][layer - 1]
    return model.stages[layer - 1].block.conv2.weight.shape[0]


def head_logits(head, tap):
    return head(tap)
