"""Generator (U-Net) and discriminator (conv/BN/LeakyReLU stack).

Batch normalization always normalizes with the statistics of the batch it
is given and keeps no running buffers, so a network's forward pass is a
pure function of its parameters and input; there is no train/eval split to
keep in sync across the Reptile copies.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters


class ShapeError(ValueError):
    pass


def _bn(c):
    return nn.BatchNorm2d(c, track_running_stats=False)


@dataclass(frozen=True)
class GeneratorArch:
    depth: int = 3
    base_width: int = 16

    def widths(self):
        return [self.base_width * 2**i for i in range(self.depth)]


@dataclass(frozen=True)
class DiscriminatorArch:
    n_blocks: int = 3
    base_width: int = 16
    patch: bool = False
    negative_slope: float = 0.2


class GeneratorNet(nn.Module):
    """U-Net mapping a 1-channel L batch to a 2-channel ab batch in [-1, 1].

    Down stage i is a stride-2 4x4 conv (BatchNorm on all but the first and
    innermost stage) with LeakyReLU(0.2). Up stages mirror it with transposed
    convs, BatchNorm and ReLU, and each up output is concatenated with the
    encoder output of the same resolution. A final transposed conv + tanh
    produces ab.
    """

    def __init__(self, depth=3, base_width=16):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.arch = GeneratorArch(depth, base_width)
        w = self.arch.widths()
        self.down = nn.ModuleList()
        c_in = 1
        for i in range(depth):
            norm = 0 < i < depth - 1
            layers = [nn.Conv2d(c_in, w[i], 4, 2, 1, bias=not norm)]
            if norm:
                layers.append(_bn(w[i]))
            layers.append(nn.LeakyReLU(0.2))
            self.down.append(nn.Sequential(*layers))
            c_in = w[i]
        # up[i] maps resolution of down[i] back to that of down[i-1]
        self.up = nn.ModuleList()
        for i in range(depth - 1, 0, -1):
            c_in = w[i] if i == depth - 1 else 2 * w[i]
            self.up.append(
                nn.Sequential(nn.ConvTranspose2d(c_in, w[i - 1], 4, 2, 1, bias=False), _bn(w[i - 1]), nn.ReLU())
            )
        c_last = w[0] if depth == 1 else 2 * w[0]
        self.out = nn.ConvTranspose2d(c_last, 2, 4, 2, 1)

    @property
    def depth(self):
        return self.arch.depth

    def forward(self, L):
        if L.dim() != 4 or L.shape[1] != 1:
            raise ShapeError(f"expected B x 1 x H x W lightness batch, got {tuple(L.shape)}")
        m = 2**self.depth
        if L.shape[2] % m or L.shape[3] % m:
            raise ShapeError(f"H and W must be divisible by {m}, got {tuple(L.shape[2:])}")
        skips = []
        x = L
        for stage in self.down:
            x = stage(x)
            skips.append(x)
        skips.pop()
        for stage in self.up:
            x = torch.cat([stage(x), skips.pop()], dim=1)
        return torch.tanh(self.out(x))


class DiscriminatorNet(nn.Module):
    """DCGAN-style critic on a full normalized Lab batch (L concatenated with ab).

    Returns per-image logits of shape (B,), or (B, h, w) in patch mode. Use
    :func:`discriminator_forward` for probabilities.
    """

    def __init__(self, n_blocks=3, base_width=16, patch=False, negative_slope=0.2):
        super().__init__()
        if n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        self.arch = DiscriminatorArch(n_blocks, base_width, patch, negative_slope)
        blocks = []
        c_in = 3
        for i in range(n_blocks):
            c_out = base_width * 2**i
            layers = [nn.Conv2d(c_in, c_out, 4, 2, 1, bias=i == 0)]
            if i > 0:
                layers.append(_bn(c_out))
            layers.append(nn.LeakyReLU(negative_slope))
            blocks.append(nn.Sequential(*layers))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        if patch:
            self.head = nn.Conv2d(c_in, 1, 1)
        else:
            self.head = nn.Linear(c_in, 1)

    def forward(self, lab):
        if lab.dim() != 4 or lab.shape[1] != 3:
            raise ShapeError(f"expected B x 3 x H x W Lab batch, got {tuple(lab.shape)}")
        h = self.blocks(lab)
        if self.arch.patch:
            return self.head(h)[:, 0]
        return self.head(h.mean(dim=(2, 3)))[:, 0]


def generator_forward(g: GeneratorNet, L):
    return g(L)


def discriminator_forward(d: DiscriminatorNet, lab):
    """Realness probabilities in (0, 1)."""
    return torch.sigmoid(d(lab))


def compose_lab(L, ab):
    """Channels-first concatenation of lightness and chroma batches."""
    return torch.cat([L, ab], dim=1)


def init_params(net: nn.Module, seed=0, std=0.02):
    """DCGAN initialization: conv weights ~ N(0, std), BN scale 1 / shift 0, biases 0.

    Returns the flattened parameter vector.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return flatten_params(net)


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def flatten_params(net: nn.Module) -> np.ndarray:
    return parameters_to_vector(net.parameters()).detach().cpu().numpy().copy()


def load_params(net: nn.Module, vec) -> None:
    vec = np.asarray(vec)
    n = param_count(net)
    if vec.shape != (n,):
        raise ShapeError(f"parameter vector has shape {vec.shape}, network needs ({n},)")
    ref = next(net.parameters())
    t = torch.from_numpy(np.ascontiguousarray(vec)).to(dtype=ref.dtype)
    with torch.no_grad():
        vector_to_parameters(t, net.parameters())


def arch_dict(net: nn.Module) -> dict:
    kind = "generator" if isinstance(net, GeneratorNet) else "discriminator"
    return {"kind": kind, **asdict(net.arch)}


def build_generator(depth=3, base_width=16, seed=0, dtype=torch.float32) -> GeneratorNet:
    g = GeneratorNet(depth, base_width).to(dtype)
    init_params(g, seed)
    return g


def build_discriminator(n_blocks=3, base_width=16, patch=False, negative_slope=0.2, seed=0, dtype=torch.float32):
    d = DiscriminatorNet(n_blocks, base_width, patch, negative_slope).to(dtype)
    init_params(d, seed)
    return d
