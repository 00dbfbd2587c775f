"""ViT backbones and attention-layer capture.

Two sources are supported:

* ``toy:d<width>-l<layers>-h<heads>[-r<registers>]`` builds a small
  randomly-initialized ViT (patch size 14, pre-norm blocks, fused qkv),
  seeded from the identifier so the same string always yields the same
  weights. Used for tests and format work without network access.
* any other identifier is resolved through ``torch.hub`` against the
  DINOv2 repository (network and weights required).

Capture point: the token matrix is taken at the input of the chosen
block's fused qkv projection, i.e. after that block's first LayerNorm, so
the dumped facets satisfy Q = tokens @ W_q + b_q exactly. ``layer_offset``
counts back from the output layer: 1 selects the penultimate block.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

PATCH_SIZE = 14

_TOY_RE = re.compile(r"^toy:d(?P<d>\d+)-l(?P<l>\d+)-h(?P<h>\d+)(?:-r(?P<r>\d+))?$")


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim)
        )
        self.heads = heads

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        n, dim = x.shape
        qkv = self.qkv(x).reshape(n, 3, self.heads, dim // self.heads)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]  # (n, heads, head_dim)
        q = q.permute(1, 0, 2)
        k = k.permute(1, 0, 2)
        v = v.permute(1, 0, 2)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
        out = (attn @ v).permute(1, 0, 2).reshape(n, dim)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ToyViT(nn.Module):
    """Deterministic miniature ViT with DINOv2-like block structure."""

    def __init__(self, dim: int, layers: int, heads: int, registers: int, seed: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        generator = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.n_registers = registers
        self.patch_embed = nn.Conv2d(3, dim, kernel_size=PATCH_SIZE, stride=PATCH_SIZE)
        self.cls_token = nn.Parameter(torch.empty(1, dim))
        self.register_tokens = nn.Parameter(torch.empty(registers, dim))
        self.blocks = nn.ModuleList(_Block(dim, heads) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.ndim == 1 and name.endswith("weight"):
                    p.fill_(1.0)  # LayerNorm scales
                else:
                    p.normal_(0.0, 0.02, generator=generator)

    def _pos_embed(self, grid: int) -> torch.Tensor:
        """2-D sin-cos positional embedding for a grid x grid patch layout."""
        half = self.dim // 4
        omega = 1.0 / (10000 ** (torch.arange(half, dtype=torch.float32) / half))
        coords = torch.arange(grid, dtype=torch.float32)
        out = []
        for axis in (0, 1):
            pos = coords.repeat_interleave(grid) if axis == 0 else coords.repeat(grid)
            angles = pos[:, None] * omega[None, :]
            out += [torch.sin(angles), torch.cos(angles)]
        emb = torch.cat(out, dim=1)
        if emb.shape[1] < self.dim:  # odd head splits leave a remainder
            emb = torch.cat([emb, torch.zeros(emb.shape[0], self.dim - emb.shape[1])], dim=1)
        return emb


    def forward_tokens(self, image: torch.Tensor) -> torch.Tensor:
        """Final normalized token matrix for one (3, H, W) image.

        Row 0 is the CLS token, rows 1..r the registers, the rest patches.
        """
        patches = self.patch_embed(image[None])  # (1, dim, g, g)
        grid = patches.shape[-1]
        tokens = patches.flatten(2).transpose(1, 2)[0]  # (p, dim)
        tokens = tokens + self._pos_embed(grid)
        tokens = torch.cat([self.cls_token, self.register_tokens, tokens], dim=0)
        for block in self.blocks:
            tokens = block(tokens)
        return self.norm(tokens)


@dataclass
class LayerCapture:
    """Everything dumped at the chosen attention layer for one image."""

    tokens: np.ndarray  # (1 + registers + p, d_model), input to the qkv projection
    w_q: np.ndarray  # (d_model, d)
    w_k: np.ndarray
    w_v: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    heads: int
    n_registers: int
    final_tokens: np.ndarray  # output-layer tokens after the final norm


class Backbone:
    """A loaded model plus the machinery to capture one attention layer."""

    def __init__(self, model: nn.Module, blocks: list[nn.Module], heads: int,
                 n_registers: int, identifier: str):
        self.model = model.eval()
        self.blocks = blocks
        self.heads = heads
        self.n_registers = n_registers
        self.identifier = identifier

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def qkv_of(self, layer_offset: int) -> nn.Linear:
        if not 1 <= layer_offset < self.n_layers:
            raise ValueError(
                f"layer offset {layer_offset} not in [1, {self.n_layers - 1}]"
            )
        block = self.blocks[self.n_layers - 1 - layer_offset]
        return block.qkv if hasattr(block, "qkv") else block.attn.qkv

    def capture(self, image: torch.Tensor, layer_offset: int) -> LayerCapture:
        qkv = self.qkv_of(layer_offset)
        grabbed: dict = {}

        def hook(_module, inputs, _output):
            grabbed["tokens"] = inputs[0].detach()

        handle = qkv.register_forward_hook(hook)
        try:
            with torch.no_grad():
                final_tokens = self._forward_tokens(image)
        finally:
            handle.remove()
        tokens = grabbed["tokens"]
        if tokens.ndim == 3:  # batched backbones yield (1, n, d)
            tokens = tokens[0]

        dim = tokens.shape[1]
        weight = qkv.weight.detach()  # (3*dim, dim): rows are Q, K, V stacked
        bias = qkv.bias.detach() if qkv.bias is not None else torch.zeros(3 * dim)
        return LayerCapture(
            tokens=tokens.cpu().numpy().astype(np.float32),
            w_q=weight[0:dim].T.cpu().numpy().astype(np.float32),
            w_k=weight[dim:2 * dim].T.cpu().numpy().astype(np.float32),
            w_v=weight[2 * dim:3 * dim].T.cpu().numpy().astype(np.float32),
            b_q=bias[0:dim].cpu().numpy().astype(np.float32),
            b_k=bias[dim:2 * dim].cpu().numpy().astype(np.float32),
            b_v=bias[2 * dim:3 * dim].cpu().numpy().astype(np.float32),
            heads=self.heads,
            n_registers=self.n_registers,
            final_tokens=final_tokens.cpu().numpy().astype(np.float32),
        )

    def _forward_tokens(self, image: torch.Tensor) -> torch.Tensor:
        if isinstance(self.model, ToyViT):
            return self.model.forward_tokens(image)
        # DINOv2-style API: normalized CLS + register + patch tokens
        feats = self.model.forward_features(image[None])
        cls = feats["x_norm_clstoken"][0:1] if feats["x_norm_clstoken"].ndim == 2 \
            else feats["x_norm_clstoken"][None]
        regs = feats.get("x_norm_regtokens")
        patches = feats["x_norm_patchtokens"]
        parts = [cls]
        if regs is not None and regs.numel():
            parts.append(regs[0] if regs.ndim == 3 else regs)
        parts.append(patches[0] if patches.ndim == 3 else patches)
        return torch.cat(parts, dim=0)


def load_backbone(identifier: str) -> Backbone:
    m = _TOY_RE.match(identifier)
    if m:
        dim, layers, heads = int(m["d"]), int(m["l"]), int(m["h"])
        registers = int(m["r"]) if m["r"] else 0
        if layers < 2:
            raise ValueError("need at least 2 layers so an offset of 1 is valid")
        seed = int.from_bytes(identifier.encode(), "little") % (2**31)
        model = ToyViT(dim, layers, heads, registers, seed=seed)
        return Backbone(model, list(model.blocks), heads, registers, identifier)

    model = torch.hub.load("facebookresearch/dinov2", identifier)
    heads = model.blocks[0].attn.num_heads
    registers = int(getattr(model, "num_register_tokens", 0))
    return Backbone(model, list(model.blocks), heads, registers, identifier)
