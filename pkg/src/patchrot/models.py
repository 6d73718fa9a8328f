"""Encoders (CIFAR-style ResNet-8 / ResNet-32), task heads, and GradCAM.

Encoder layout: 3x3 conv -> BN -> ReLU, three stages of residual blocks
with widths 16/32/64, stride-2 downsampling at stage transitions, global
average pool to a 64-dim latent.  ResNet-8 has one block per stage,
ResNet-32 five (6n+2 counting).  Downsampling skip connections are
zero-padded identity, realised as a frozen 1x1 convolution whose kernel
embeds the input channels into the first output channels.

Weight init (from a seeded substream, in construction order): Kaiming
fan-in normal for convs, uniform +-1/sqrt(fan_in) for linear layers,
BN scale 1 / shift 0.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import imaging, seeding
from .errors import InvalidClassError, ShapeMismatchError

STAGE_WIDTHS = (16, 32, 64)
LATENT_DIM = 64
BLOCKS_PER_STAGE = {"resnet8": 1, "resnet32": 5}

ROTNET4 = "rotnet4"
PATCHROT8 = "patchrot8"
RELNET4 = "relnet4"
HEAD_CLASSES = {ROTNET4: 4, PATCHROT8: 8, RELNET4: 4}


@dataclass
class EncoderSpec:
    variant: str = "resnet8"
    input_channels: int = 3
    latent_dim: int = LATENT_DIM

    def __post_init__(self):
        if self.variant not in BLOCKS_PER_STAGE:
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.latent_dim != LATENT_DIM:
            raise ValueError("latent_dim is fixed at 64")
        if self.input_channels not in (1, 3):
            raise ValueError("input_channels must be 1 or 3")

    @property
    def arch_string(self) -> str:
        return f"{self.variant};in={self.input_channels};widths=16/32/64;latent={self.latent_dim}"


def _kaiming_conv(rng, f, c, kh, kw):
    std = np.sqrt(2.0 / (c * kh * kw))
    return (rng.standard_normal((f, c, kh, kw)) * std).astype(np.float32)


def _uniform_linear(rng, out_dim, in_dim):
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(np.float32)
    b = rng.uniform(-bound, bound, size=out_dim).astype(np.float32)
    return w, b


class Conv3x3:
    def __init__(self, rng, cin, cout, stride=1):
        self.stride = stride
        self.weight = ad.Tensor(_kaiming_conv(rng, cout, cin, 3, 3), requires_grad=True)

    def __call__(self, x):
        return ad.conv2d(x, self.weight, stride=self.stride, padding="same")

    def named_params(self, prefix):
        return [(prefix + ".weight", self.weight)]


class BatchNorm:
    def __init__(self, channels):
        self.gamma = ad.Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x, train):
        return ad.batchnorm2d(x, self.gamma, self.beta,
                              self.running_mean, self.running_var, train=train)

    def named_params(self, prefix):
        return [(prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]

    def named_buffers(self, prefix):
        return [(prefix + ".running_mean", self.running_mean),
                (prefix + ".running_var", self.running_var)]


def _identity_embed_kernel(cin, cout):
    w = np.zeros((cout, cin, 1, 1), dtype=np.float32)
    for i in range(cin):
        w[i, i, 0, 0] = 1.0
    return w


class ResidualBlock:
    def __init__(self, rng, cin, cout, stride):
        self.conv1 = Conv3x3(rng, cin, cout, stride=stride)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv3x3(rng, cout, cout)
        self.bn2 = BatchNorm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            # zero-padded identity shortcut as a frozen 1x1 strided conv
            self.skip_weight = ad.Tensor(_identity_embed_kernel(cin, cout))
            self.skip_stride = stride
            self.skip = True

    def __call__(self, x, train):
        h = ad.relu(self.bn1(self.conv1(x), train))
        h = self.bn2(self.conv2(h), train)
        s = x
        if self.skip:
            s = ad.conv2d(x, self.skip_weight, stride=self.skip_stride, padding="valid")
        return ad.relu(ad.add(h, s))

    def named_params(self, prefix):
        out = self.conv1.named_params(prefix + ".conv1")
        out += self.bn1.named_params(prefix + ".bn1")
        out += self.conv2.named_params(prefix + ".conv2")
        out += self.bn2.named_params(prefix + ".bn2")
        return out

    def named_buffers(self, prefix):
        return self.bn1.named_buffers(prefix + ".bn1") + self.bn2.named_buffers(prefix + ".bn2")


class Encoder:
    """Maps (N, C, H, W) batches to (N, 64) latents."""

    def __init__(self, spec: EncoderSpec, seed: int):
        self.spec = spec
        rng = seeding.substream(seed, seeding.INIT)
        n_blocks = BLOCKS_PER_STAGE[spec.variant]
        self.conv1 = Conv3x3(rng, spec.input_channels, STAGE_WIDTHS[0])
        self.bn1 = BatchNorm(STAGE_WIDTHS[0])
        self.stages = []
        cin = STAGE_WIDTHS[0]
        for si, width in enumerate(STAGE_WIDTHS):
            blocks = []
            for bi in range(n_blocks):
                stride = 2 if (si > 0 and bi == 0) else 1
                blocks.append(ResidualBlock(rng, cin, width, stride))
                cin = width
            self.stages.append(blocks)

    def forward(self, x: ad.Tensor, train: bool):
        """Returns (latent (N, 64), last conv stage features pre-pool)."""
        if x.data.ndim != 4 or x.data.shape[1] != self.spec.input_channels:
            raise ShapeMismatchError(f"expected NxCxHxW with C={self.spec.input_channels}, "
                                     f"got {x.data.shape}")
        if x.data.shape[2] < 8 or x.data.shape[3] < 8:
            raise ShapeMismatchError("spatial dims must be >= 8")
        h = ad.relu(self.bn1(self.conv1(x), train))
        for blocks in self.stages:
            for block in blocks:
                h = block(h, train)
        return ad.global_avg_pool(h), h

    def named_params(self):
        out = self.conv1.named_params("encoder.conv1")
        out += self.bn1.named_params("encoder.bn1")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                out += block.named_params(f"encoder.stage{si}.{bi}")
        return out

    def named_buffers(self):
        out = self.bn1.named_buffers("encoder.bn1")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                out += block.named_buffers(f"encoder.stage{si}.{bi}")
        return out


class LinearHead:
    """Single linear layer, the SSL classification head."""

    def __init__(self, rng, in_dim, classes):
        w, b = _uniform_linear(rng, classes, in_dim)
        self.weight = ad.Tensor(w, requires_grad=True)
        self.bias = ad.Tensor(b, requires_grad=True)
        self.classes = classes

    def __call__(self, z):
        return ad.linear(z, self.weight, self.bias)

    def named_params(self, prefix="head"):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]


class TwoLayerHead:
    """64 -> hidden -> classes with ReLU, the downstream evaluation head."""

    def __init__(self, rng, in_dim, hidden, classes):
        w1, b1 = _uniform_linear(rng, hidden, in_dim)
        w2, b2 = _uniform_linear(rng, classes, hidden)
        self.w1 = ad.Tensor(w1, requires_grad=True)
        self.b1 = ad.Tensor(b1, requires_grad=True)
        self.w2 = ad.Tensor(w2, requires_grad=True)
        self.b2 = ad.Tensor(b2, requires_grad=True)
        self.hidden = hidden
        self.classes = classes

    def __call__(self, z):
        return ad.linear(ad.relu(ad.linear(z, self.w1, self.b1)), self.w2, self.b2)

    def named_params(self, prefix="head"):
        return [(prefix + ".w1", self.w1), (prefix + ".b1", self.b1),
                (prefix + ".w2", self.w2), (prefix + ".b2", self.b2)]


class SslModel:
    """Encoder plus the pretext head for one task variant."""

    def __init__(self, spec: EncoderSpec, head_kind: str, seed: int):
        if head_kind not in HEAD_CLASSES:
            raise ValueError(f"unknown head {head_kind!r}")
        self.encoder = Encoder(spec, seed)
        self.head_kind = head_kind
        in_dim = 2 * LATENT_DIM if head_kind == RELNET4 else LATENT_DIM
        self.head = LinearHead(seeding.substream(seed, seeding.HEAD),
                               in_dim, HEAD_CLASSES[head_kind])

    def forward(self, x: ad.Tensor, x_b: ad.Tensor | None = None, train: bool = False):
        """Logits for a batch; RelNet heads need the paired batch x_b."""
        if self.head_kind == RELNET4:
            if x_b is None:
                raise ShapeMismatchError("relnet4 head needs a paired batch")
            if x_b.data.shape[0] != x.data.shape[0]:
                raise ShapeMismatchError("paired batches must have equal size")
            za, _ = self.encoder.forward(x, train)
            zb, _ = self.encoder.forward(x_b, train)
            return self.head(ad.concat([za, zb], axis=1))
        z, _ = self.encoder.forward(x, train)
        return self.head(z)

    @property
    def arch_string(self):
        return f"{self.encoder.spec.arch_string};head={self.head_kind}"

    def named_params(self):
        return self.encoder.named_params() + self.head.named_params()

    def named_buffers(self):
        return self.encoder.named_buffers()


class DownstreamModel:
    """Encoder plus the two-layer classification head."""

    def __init__(self, spec: EncoderSpec, classes: int, seed: int, hidden: int = 128):
        self.encoder = Encoder(spec, seed)
        self.head = TwoLayerHead(seeding.substream(seed, seeding.HEAD),
                                 LATENT_DIM, hidden, classes)

    def forward(self, x: ad.Tensor, train: bool = False):
        z, _ = self.encoder.forward(x, train)
        return self.head(z)

    @property
    def arch_string(self):
        return (f"{self.encoder.spec.arch_string};"
                f"head=twolayer:{self.head.hidden}:{self.head.classes}")

    def named_params(self):
        return self.encoder.named_params() + self.head.named_params()

    def named_buffers(self):
        return self.encoder.named_buffers()


def encode(model, batch: np.ndarray) -> np.ndarray:
    """Eval-mode latents (N, 64) for an NCHW float32 batch."""
    z, _ = model.encoder.forward(ad.Tensor(batch), train=False)
    return z.data


def classify_patchrot(model: SslModel, batch: np.ndarray, train: bool = False) -> ad.Tensor:
    if model.head_kind != PATCHROT8:
        raise InvalidClassError("model does not carry an 8-way patch head")
    return model.forward(ad.Tensor(batch), train=train)


def classify_rotnet(model: SslModel, batch: np.ndarray, train: bool = False) -> ad.Tensor:
    if model.head_kind != ROTNET4:
        raise InvalidClassError("model does not carry a 4-way rotation head")
    return model.forward(ad.Tensor(batch), train=train)


def classify_rel(model: SslModel, batch_a: np.ndarray, batch_b: np.ndarray,
                 train: bool = False) -> ad.Tensor:
    if model.head_kind != RELNET4:
        raise InvalidClassError("model does not carry a relation head")
    return model.forward(ad.Tensor(batch_a), ad.Tensor(batch_b), train=train)


def count_params(model) -> int:
    return sum(t.data.size for _, t in model.named_params())


def combine_cam(weights: np.ndarray, activations: np.ndarray) -> np.ndarray:
    """ReLU of the channel-weighted activation sum, max-normalized.

    weights (C,), activations (C, H, W) -> (H, W) in [0, 1]; an all-zero
    weighted sum stays all-zero.
    """
    cam = np.maximum((weights[:, None, None] * activations).sum(axis=0), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.astype(np.float32)


def gradcam(model, image: np.ndarray, target_class: int, upsample: bool = False) -> np.ndarray:
    """Class-evidence heatmap from the last conv stage.

    Channel weights are the spatial mean of d(logit)/d(activation); the map
    is ReLU(sum_c w_c A_c), max-normalized (an all-zero map stays zero),
    optionally bilinearly upsampled to the input size.  For relation heads
    the image is paired with itself and the patched branch is tapped.
    """
    classes = model.head.classes
    if not 0 <= target_class < classes:
        raise InvalidClassError(f"class {target_class} outside 0..{classes - 1}")
    x = ad.Tensor(np.ascontiguousarray(image.transpose(2, 0, 1))[None])
    with ad.Tape() as tape:
        if isinstance(model, SslModel) and model.head_kind == RELNET4:
            za, _ = model.encoder.forward(x, train=False)
            zb, feats = model.encoder.forward(x, train=False)
            logits = model.head(ad.concat([za, zb], axis=1))
        else:
            z, feats = model.encoder.forward(x, train=False)
            logits = model.head(z)
        onehot = np.zeros(logits.data.shape, dtype=np.float32)
        onehot[0, target_class] = 1.0
        target = ad.sum_all(ad.mul(logits, ad.Tensor(onehot)))
    tape.backward(target)

    weights = feats.grad[0].mean(axis=(1, 2))
    cam = combine_cam(weights, feats.data[0])
    if upsample:
        h, w = image.shape[:2]
        cam = imaging.bilinear_resize(cam[:, :, None], h, w)[:, :, 0]
        cam = np.clip(cam, 0.0, 1.0)
    return cam
