"""1-D residual classifier and convolutional autoencoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from cmcppg.errors import ShapeError
from cmcppg.nn import tensor as T
from cmcppg.nn.layers import BatchNorm1d, Conv1d, Identity, Linear, Module
from cmcppg.nn.tensor import Tensor

# blocks per stage, channel widths per stage
PRESETS = {
    "TINY": ((1, 1, 1, 1), (8, 16, 32, 64)),
    "R18": ((2, 2, 2, 2), (64, 128, 256, 512)),
    "R34": ((3, 4, 6, 3), (64, 128, 256, 512)),
}


@dataclass
class ArchSpec:
    kind: str = "resnet1d"
    preset: str = "TINY"
    input_len: int = 1200
    in_channels: int = 1
    n_classes: int = 2
    norm: bool = True
    zero_head: bool = False
    seed: int = 0
    # autoencoder only
    latent_dim: int = 64
    ae_channels: tuple = field(default=(8, 16, 16))
    # input view the autoencoder was fit on ("raw" or "acf"); the network
    # itself only sees input_len values per record
    view: str = "raw"

    def to_json(self):
        d = asdict(self)
        d["ae_channels"] = list(self.ae_channels)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        if "ae_channels" in d:
            d["ae_channels"] = tuple(d["ae_channels"])
        return cls(**d)


def _norm(channels, enabled):
    return BatchNorm1d(channels) if enabled else Identity()


class BasicBlock(Module):
    def __init__(self, c_in, c_out, stride, rng, norm=True):
        super().__init__()
        self.conv1 = Conv1d(c_in, c_out, 3, rng, stride=stride, bias=not norm)
        self.bn1 = _norm(c_out, norm)
        self.conv2 = Conv1d(c_out, c_out, 3, rng, bias=not norm)
        self.bn2 = _norm(c_out, norm)
        if stride != 1 or c_in != c_out:
            self.down = Conv1d(c_in, c_out, 1, rng, stride=stride, padding=0, bias=not norm)
            self.down_bn = _norm(c_out, norm)
        else:
            self.down = None

    def forward(self, x):
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = self.down_bn(self.down(x)) if self.down is not None else x
        return T.relu(out + skip)


class ResNet1d(Module):
    """Residual network over (B, 1, L) inputs.

    ``forward`` returns ``(logits, latents)``; the latent map is the global
    average pool of the last convolutional stage.
    """

    def __init__(self, spec: ArchSpec):
        super().__init__()
        if spec.preset not in PRESETS:
            raise ValueError(f"unknown preset {spec.preset!r}; choose from {sorted(PRESETS)}")
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        blocks, widths = PRESETS[spec.preset]
        self.stem = Conv1d(spec.in_channels, widths[0], 7, rng, stride=2, bias=not spec.norm)
        self.stem_bn = _norm(widths[0], spec.norm)
        self.blocks = []
        c_in = widths[0]
        for stage, (n_blocks, width) in enumerate(zip(blocks, widths)):
            for i in range(n_blocks):
                stride = 2 if (stage > 0 and i == 0) else 1
                blk = BasicBlock(c_in, width, stride, rng, norm=spec.norm)
                setattr(self, f"block{stage}_{i}", blk)
                self.blocks.append(blk)
                c_in = width
        self.latent_dim = c_in
        self.head = Linear(c_in, spec.n_classes, rng, zero=spec.zero_head)

    def features(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.stem.weight.data.dtype))
        if x.data.ndim != 3 or x.shape[1] != self.spec.in_channels or x.shape[2] != self.spec.input_len:
            raise ShapeError(
                f"expected batch (B, {self.spec.in_channels}, {self.spec.input_len}), got {x.shape}")
        h = T.relu(self.stem_bn(self.stem(T.transpose12(x))))
        h = T.max_pool1d(h, 2)
        for blk in self.blocks:
            h = blk(h)
        return T.global_avg_pool(h)

    def forward(self, x):
        latents = self.features(x)
        return self.head(latents), latents


class Autoencoder(Module):
    """Strided-conv encoder with a dense bottleneck; the decoder mirrors it
    with nearest upsampling followed by convolutions. Trained on MSE."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        chans = (spec.in_channels,) + tuple(spec.ae_channels)
        self.enc = []
        length = spec.input_len
        for i in range(len(chans) - 1):
            conv = Conv1d(chans[i], chans[i + 1], 5, rng, stride=2, bias=True)
            setattr(self, f"enc{i}", conv)
            self.enc.append(conv)
            length = (length + 2 * 2 - 5) // 2 + 1
        self.code_len = length
        flat = chans[-1] * length
        self.to_latent = Linear(flat, spec.latent_dim, rng)
        self.from_latent = Linear(spec.latent_dim, flat, rng)
        self.dec = []
        rev = chans[::-1]
        for i in range(len(rev) - 1):
            conv = Conv1d(rev[i], rev[i + 1], 5, rng, stride=1, bias=True)
            setattr(self, f"dec{i}", conv)
            self.dec.append(conv)

    def _check(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.to_latent.weight.data.dtype))
        if x.data.ndim != 3 or x.shape[1] != self.spec.in_channels or x.shape[2] != self.spec.input_len:
            raise ShapeError(
                f"expected batch (B, {self.spec.in_channels}, {self.spec.input_len}), got {x.shape}")
        return x

    def encode(self, x):
        h = T.transpose12(self._check(x))
        for conv in self.enc:
            h = T.relu(conv(h))
        h = h.reshape(h.shape[0], -1)
        return self.to_latent(h)

    def decode(self, z):
        b = z.shape[0]
        h = T.relu(self.from_latent(z))
        h = h.reshape(b, self.code_len, self.spec.ae_channels[-1])
        for i, conv in enumerate(self.dec):
            h = conv(T.upsample1d(h, 2))
            if i < len(self.dec) - 1:
                h = T.relu(h)
        return T.transpose12(T.crop(h, self.spec.input_len))

    def forward(self, x):
        return self.decode(self.encode(x))


def build_model(spec: ArchSpec):
    if spec.kind == "resnet1d":
        return ResNet1d(spec)
    if spec.kind == "autoencoder":
        return Autoencoder(spec)
    raise ValueError(f"unknown model kind {spec.kind!r}")
