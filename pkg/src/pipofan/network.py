"""Pyramid-input / pyramid-output backbone with equal convolutional depth.

The network is defined by a :class:`FeatureGraph` whose nodes follow the
encoding/decoding recursions

    encoding  f[s,j] = Conv(f[s,j-1])                          j < s
              f[s,j] = Conv(f[s,j-1]) + Pool(Conv(f[s-1,j-1]))  j = s
    decoding  f[s,j] = Concat(Upsample(Conv(f[s+1,j-1])), Conv(f[s,s]))   j + s = 2D
              f[s,j] = Conv(f[s,j-1])                                     j + s > 2D

where D is the depth of the U-shaped path and f[s,1] is the input image at
scale s. Skip branches carry extra conv blocks so that both operands of every
concat have passed through the same number of conv blocks. The forward pass
walks the graph in insertion order, so the structure checked by
:func:`conv_depth` is the structure that runs.
"""
from __future__ import annotations

import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import ScalePyramid
from .exceptions import ConfigurationError, ContractError, ECDViolation

logger = logging.getLogger(__name__)

DEFAULT_CHANNELS = (64, 128, 256, 512, 512, 512, 256, 128, 64)
#: total trainable parameters reported for the 5-scale-in / 5-scale-out model
REFERENCE_PARAM_COUNT = 28_270_986

MERGE_OPS = ("sum", "concat")


@dataclass(frozen=True)
class NetworkConfig:
    scales: int = 5
    channels: tuple = DEFAULT_CHANNELS
    block_type: str = "residual"
    n_classes: int = 4
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) % 2 == 0:
            raise ConfigurationError(
                f"channels must have odd length 2*depth-1, got {len(self.channels)}"
            )
        if any(c < 1 for c in self.channels):
            raise ConfigurationError(f"channel widths must be positive: {self.channels}")
        if not 1 <= self.scales <= self.depth:
            raise ConfigurationError(f"scales must be in 1..{self.depth}, got {self.scales}")
        if self.block_type not in ("residual", "plain"):
            raise ConfigurationError(f"block_type must be 'residual' or 'plain', got {self.block_type!r}")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be >= 1")

    @property
    def depth(self) -> int:
        return (len(self.channels) + 1) // 2

    @property
    def min_divisor(self) -> int:
        """Input sizes must be divisible by this."""
        return 2 ** (self.depth - 1)

    def encoder_width(self, s: int) -> int:
        return self.channels[s - 1]

    def decoder_width(self, s: int) -> int:
        return self.channels[2 * self.depth - 1 - s]


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple
    channels: int
    scale: int


@dataclass
class FeatureGraph:
    """Acyclic graph of feature maps; edges are Conv, Pool, Upsample, Sum and Concat."""

    config: NetworkConfig
    nodes: "OrderedDict[str, Node]" = field(default_factory=OrderedDict)

    def add(self, name, op, inputs, channels, scale) -> str:
        if name in self.nodes:
            raise ConfigurationError(f"duplicate node {name}")
        for src in inputs:
            if src not in self.nodes:
                raise ConfigurationError(f"node {name} references unknown input {src}")
        self.nodes[name] = Node(name, op, tuple(inputs), int(channels), scale)
        return name

    def __getitem__(self, name) -> Node:
        return self.nodes[name]

    def __iter__(self):
        return iter(self.nodes.values())

    def merge_nodes(self) -> list:
        return [n.name for n in self if n.op in MERGE_OPS]

    def outputs(self) -> list:
        return [n.name for n in self if n.op == "head"]

    def inputs(self) -> list:
        return [n.name for n in self if n.op == "input"]

    def edges(self) -> list:
        return [(src, n.name, n.op) for n in self for src in n.inputs]


def feature_node(s: int, j: int) -> str:
    return f"f[{s},{j}]"


def build_feature_graph(config: NetworkConfig) -> FeatureGraph:
    g = FeatureGraph(config)
    D, S = config.depth, config.scales
    g.add(feature_node(1, 1), "input", (), config.in_channels, 1)

    for s in range(2, D + 1):
        enc = g.add(f"enc[{s - 1}]", "conv", [feature_node(s - 1, s - 1)], config.encoder_width(s - 1), s - 1)
        if s > S:
            g.add(feature_node(s, s), "pool", [enc], config.encoder_width(s - 1), s)
            continue
        pool = g.add(f"pool[{s - 1}]", "pool", [enc], config.encoder_width(s - 1), s)
        prev = g.add(feature_node(s, 1), "input", (), config.in_channels, s)
        for j in range(2, s):
            prev = g.add(feature_node(s, j), "conv", [prev], config.encoder_width(1), s)
        pre = g.add(f"pre[{s}]", "conv", [prev], config.encoder_width(s - 1), s)
        g.add(feature_node(s, s), "sum", [pre, pool], config.encoder_width(s - 1), s)

    out = {D: g.add(f"enc[{D}]", "conv", [feature_node(D, D)], config.encoder_width(D), D)}
    for s in range(D - 1, 0, -1):
        up_ch = max(g[out[s + 1]].channels // 2, 1)
        up = g.add(f"up[{s}]", "up", [out[s + 1]], up_ch, s)
        skip = f"enc[{s}]"
        for k in range(1, 2 * (D - s)):
            skip = g.add(f"skip[{s},{k}]", "conv", [skip], config.encoder_width(s), s)
        j = 2 * D - s
        cat = g.add(feature_node(s, j), "concat", [up, skip], up_ch + config.encoder_width(s), s)
        out[s] = g.add(feature_node(s, j + 1), "conv", [cat], config.decoder_width(s), s)

    for s in range(1, S + 1):
        g.add(f"score[{s}]", "head", [out[s]], config.n_classes, s)
    return g


def conv_depth(graph: FeatureGraph, node: str, _memo=None) -> int:
    """Number of conv blocks between the inputs and ``node``.

    Raises :class:`ECDViolation` if any merge on the way joins branches of
    different depth.
    """
    memo = {} if _memo is None else _memo
    needed = set()
    stack = [node]
    while stack:
        name = stack.pop()
        if name not in needed and name not in memo:
            needed.add(name)
            stack.extend(graph[name].inputs)
    # insertion order is topological
    for name in graph.nodes:
        if name not in needed:
            continue
        n = graph[name]
        if n.op == "input":
            memo[name] = 0
            continue
        depths = [memo[src] for src in n.inputs]
        if n.op in MERGE_OPS and len(set(depths)) > 1:
            raise ECDViolation(name, {src: memo[src] for src in n.inputs})
        memo[name] = depths[0] + (1 if n.op == "conv" else 0)
    return memo[node]


def branch_depths(graph: FeatureGraph, node: str) -> dict:
    """Conv depth of each branch entering ``node``."""
    memo = {}
    return {src: conv_depth(graph, src, memo) for src in graph[node].inputs}


def check_ecd(graph: FeatureGraph) -> dict:
    """Verify equal depth at every merge node; returns ``{node: depth}`` for merges."""
    memo = {}
    for name in graph.nodes:
        conv_depth(graph, name, memo)
    return {name: memo[name] for name in graph.merge_nodes()}


class ConvBlock(nn.Module):
    """Two 3x3 conv + BN + ReLU layers, optionally with a residual shortcut."""

    def __init__(self, in_ch, out_ch, residual=True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.residual = residual
        self.shortcut = None
        if residual and in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.residual:
            out = out + (x if self.shortcut is None else self.shortcut(x))
        return F.relu(out)


class UpProject(nn.Module):
    """Bilinear x2 upsampling then a 1x1 conv + BN + ReLU channel projection."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.relu(self.bn(self.proj(x)))


def _key(name: str) -> str:
    return name.replace("[", "_").replace("]", "").replace(",", "_")


def build_input_pyramid(x, scales: int) -> ScalePyramid:
    """Average-pool an image ``scales - 1`` times by a factor of two.

    Accepts a torch tensor or numpy array whose last two axes are spatial.
    """
    is_numpy = isinstance(x, np.ndarray)
    t = torch.from_numpy(x) if is_numpy else x
    h, w = t.shape[-2:]
    if h % 2 ** (scales - 1) or w % 2 ** (scales - 1):
        raise ConfigurationError(f"input size {(h, w)} is not divisible by 2^{scales - 1}")
    lead = t.shape[:-2]
    flat = t.reshape(-1, 1, h, w)
    levels = [t]
    for _ in range(scales - 1):
        flat = F.avg_pool2d(flat, 2)
        levels.append(flat.reshape(*lead, *flat.shape[-2:]))
    if is_numpy:
        levels = [lvl.numpy() for lvl in levels]
    return ScalePyramid(tuple(levels))


class PipoFanNet(nn.Module):
    """Multi-scale segmentation backbone returning one score map per output scale."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.graph = build_feature_graph(config)
        check_ecd(self.graph)
        residual = config.block_type == "residual"
        layers = {}
        for node in self.graph:
            if node.op == "conv":
                src = self.graph[node.inputs[0]]
                layers[_key(node.name)] = ConvBlock(src.channels, node.channels, residual)
            elif node.op == "up":
                src = self.graph[node.inputs[0]]
                layers[_key(node.name)] = UpProject(src.channels, node.channels)
            elif node.op == "head":
                src = self.graph[node.inputs[0]]
                layers[_key(node.name)] = nn.Conv2d(src.channels, node.channels, 1)
        self.layers = nn.ModuleDict(layers)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0):
        gen = torch.Generator().manual_seed(int(seed))
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
                m.reset_running_stats()

    def heads(self) -> list:
        return [self.layers[_key(n)] for n in self.graph.outputs()]

    def zero_heads(self):
        with torch.no_grad():
            for head in self.heads():
                head.weight.zero_()
                head.bias.zero_()

    def forward(self, x) -> ScalePyramid:
        """``x`` is an ``(N, C, H, W)`` tensor or a ready-made input pyramid."""
        cfg = self.config
        pyramid = x if isinstance(x, ScalePyramid) else build_input_pyramid(x, cfg.scales)
        if len(pyramid) != cfg.scales:
            raise ContractError(f"expected {cfg.scales} input scales, got {len(pyramid)}")
        h, w = pyramid[0].shape[-2:]
        if h % cfg.min_divisor or w % cfg.min_divisor:
            raise ConfigurationError(
                f"input size {(h, w)} is not divisible by 2^{cfg.depth - 1}"
            )
        if pyramid[0].shape[1] != cfg.in_channels:
            raise ContractError(
                f"expected {cfg.in_channels} input channels, got {pyramid[0].shape[1]}"
            )

        feats = {}
        for node in self.graph:
            if node.op == "input":
                feats[node.name] = pyramid[node.scale - 1]
            elif node.op == "sum":
                a, b = (feats[i] for i in node.inputs)
                feats[node.name] = a + b
            elif node.op == "concat":
                feats[node.name] = torch.cat([feats[i] for i in node.inputs], dim=1)
            elif node.op == "pool":
                feats[node.name] = F.max_pool2d(feats[node.inputs[0]], 2)
            else:
                feats[node.name] = self.layers[_key(node.name)](feats[node.inputs[0]])
        return ScalePyramid(tuple(feats[n] for n in self.graph.outputs()))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def check_parameter_count(total: int, config: NetworkConfig) -> bool:
    """Compare against the published count for the default 5/5 model; warns on mismatch."""
    if config.channels != DEFAULT_CHANNELS or config.scales != 5:
        return True
    if total != REFERENCE_PARAM_COUNT:
        warnings.warn(
            f"parameter count {total:,} differs from the reference {REFERENCE_PARAM_COUNT:,} "
            "(conv-block widths of the ECD branches are not fixed by the reference design)",
            stacklevel=2,
        )
        return False
    return True
