"""Two-stream classification head over the decomposed channels.

The full-width standard network processes the low-frequency channel; a
quarter-width fusion network processes the high-frequency channel.  Both are
VGG-style stacks (blocks of 3x3 convolutions, a 2x2 max pool after each
block, global average pooling at the end).  One linear head scores the
pooled standard features; a second scores the concatenation of both pooled
feature vectors; the two score rows are averaged for prediction.

Single-stream operation (no fusion network, no combined head) backs the
plain low-resolution baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import (
    DEFAULT_DTYPE,
    ConvLayer,
    LinearLayer,
    global_avg_pool,
    global_avg_pool_grad,
    layer_backward,
    layer_forward,
    linear,
    linear_grad,
    make_conv_layer,
    make_linear_layer,
    maxpool2d,
    maxpool2d_grad,
    relu,
    relu_grad,
    softmax_cross_entropy,
)

# Desk-scale standard network for 32x32 inputs: three blocks of three 3x3
# convolutions with a 2x2 pool after each, then global average pooling.
MINIVGG_BLOCKS = ((32, 32, 32), (64, 64, 64), (128, 128, 128))


def fusion_blocks(standard: tuple[tuple[int, ...], ...]) -> tuple[tuple[int, ...], ...]:
    """Quarter every conv width (exact division when widths are multiples of 4)."""
    return tuple(tuple(math.ceil(w / 4) for w in block) for block in standard)


@dataclass
class ConvNetParams:
    """VGG-style backbone: conv blocks separated by 2x2 max pools, then GAP."""

    blocks: list[list[ConvLayer]]

    @property
    def in_channels(self) -> int:
        return self.blocks[0][0].spec.in_channels

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1][-1].spec.out_channels

    def named_layers(self, prefix: str):
        for b, block in enumerate(self.blocks):
            for i, layer in enumerate(block):
                yield f"{prefix}.block{b}.conv{i}", layer


@dataclass
class ClassifierParams:
    standard_net: ConvNetParams
    fusion_net: ConvNetParams | None
    head_low: LinearLayer
    head_combined: LinearLayer | None

    @property
    def class_count(self) -> int:
        return self.head_low.weight.shape[1]

    @property
    def two_stream(self) -> bool:
        return self.fusion_net is not None

    def named_layers(self, prefix: str = "cls"):
        yield from self.standard_net.named_layers(f"{prefix}.standard")
        if self.fusion_net is not None:
            yield from self.fusion_net.named_layers(f"{prefix}.fusion")

    def named_arrays(self, prefix: str = "cls"):
        for name, layer in self.named_layers(prefix):
            yield f"{name}.weight", layer.weight
            yield f"{name}.bias", layer.bias
        yield f"{prefix}.head_low.weight", self.head_low.weight
        yield f"{prefix}.head_low.bias", self.head_low.bias
        if self.head_combined is not None:
            yield f"{prefix}.head_combined.weight", self.head_combined.weight
            yield f"{prefix}.head_combined.bias", self.head_combined.bias


def _backbone(in_channels, blocks, rng, dtype) -> ConvNetParams:
    built, c = [], in_channels
    for widths in blocks:
        block = []
        for w in widths:
            block.append(make_conv_layer(c, w, 3, 1, 1, rng, dtype))
            c = w
        built.append(block)
    return ConvNetParams(blocks=built)


def init_classifier_params(
    image_channels: int,
    class_count: int,
    rng,
    blocks=MINIVGG_BLOCKS,
    two_stream: bool = True,
    fusion_in_channels: int | None = None,
    dtype=DEFAULT_DTYPE,
) -> ClassifierParams:
    """Standard stream plus (optionally) the quarter-width fusion stream.

    fusion_in_channels overrides the fusion input width for frontends whose
    high channel is not image-shaped (e.g. stacked wavelet detail bands).
    """
    standard = _backbone(image_channels, blocks, rng, dtype)
    head_low = make_linear_layer(standard.feature_dim, class_count, rng, dtype)
    if not two_stream:
        return ClassifierParams(standard, None, head_low, None)
    fusion = _backbone(
        fusion_in_channels or image_channels, fusion_blocks(blocks), rng, dtype
    )
    head_combined = make_linear_layer(
        standard.feature_dim + fusion.feature_dim, class_count, rng, dtype
    )
    return ClassifierParams(standard, fusion, head_low, head_combined)


def classifier_params_from_arrays(tensors: dict, prefix: str = "cls") -> ClassifierParams:
    """Rebuild classifier parameters from a checkpoint tensor map."""

    def read_net(net_prefix):
        blocks, b = [], 0
        while f"{net_prefix}.block{b}.conv0.weight" in tensors:
            block, i = [], 0
            while f"{net_prefix}.block{b}.conv{i}.weight" in tensors:
                name = f"{net_prefix}.block{b}.conv{i}"
                weight, bias = tensors[f"{name}.weight"], tensors[f"{name}.bias"]
                from .tensor_core import ConvSpec

                spec = ConvSpec(weight.shape[1], weight.shape[0],
                                weight.shape[2], weight.shape[3],
                                stride=1, padding=1)
                block.append(ConvLayer(weight, bias, spec))
                i += 1
            blocks.append(block)
            b += 1
        if not blocks:
            raise ValueError(
                f"checkpoint has no {net_prefix}.block0.conv0.weight entry"
            )
        return ConvNetParams(blocks=blocks)

    standard = read_net(f"{prefix}.standard")
    head_low = LinearLayer(
        tensors[f"{prefix}.head_low.weight"], tensors[f"{prefix}.head_low.bias"]
    )
    if f"{prefix}.fusion.block0.conv0.weight" not in tensors:
        return ClassifierParams(standard, None, head_low, None)
    fusion = read_net(f"{prefix}.fusion")
    head_combined = LinearLayer(
        tensors[f"{prefix}.head_combined.weight"],
        tensors[f"{prefix}.head_combined.bias"],
    )
    return ClassifierParams(standard, fusion, head_low, head_combined)


def backbone_forward(x: np.ndarray, net: ConvNetParams):
    """Run the conv blocks and pooling; returns (pooled features, cache)."""
    conv_in, conv_pre, pool_meta = [], [], []
    h = x
    for block in net.blocks:
        for layer in block:
            conv_in.append(h)
            pre = layer_forward(h, layer)
            conv_pre.append(pre)
            h = relu(pre)
        pooled, argmax = maxpool2d(h, 2, 2)
        pool_meta.append((argmax, h.shape))
        h = pooled
    features = global_avg_pool(h)
    cache = {
        "conv_in": conv_in,
        "conv_pre": conv_pre,
        "pool_meta": pool_meta,
        "gap_in_shape": h.shape,
    }
    return features, cache


def backbone_backward(cache, net: ConvNetParams, d_features):
    grads: dict[str, np.ndarray] = {}
    g = global_avg_pool_grad(d_features, cache["gap_in_shape"])
    idx = len(cache["conv_in"])
    for b in reversed(range(len(net.blocks))):
        argmax, in_shape = cache["pool_meta"][b]
        g = maxpool2d_grad(g, argmax, in_shape, 2, 2)
        for i in reversed(range(len(net.blocks[b]))):
            idx -= 1
            g = relu_grad(g, cache["conv_pre"][idx])
            g, gw, gb = layer_backward(g, cache["conv_in"][idx], net.blocks[b][i])
            grads[f"block{b}.conv{i}.weight"] = gw
            grads[f"block{b}.conv{i}.bias"] = gb
    return grads, g


def classify_with_cache(low, high, params: ClassifierParams):
    """Forward pass of both streams; the standard features are shared."""
    if params.two_stream:
        if high is None:
            raise ValueError("two-stream classifier requires a high channel")
        if low.shape[0] != high.shape[0]:
            raise ValueError(
                f"batch sizes differ: low {low.shape[0]} vs high {high.shape[0]}"
            )
    f_low, std_cache = backbone_forward(low, params.standard_net)
    s_low = linear(f_low, params.head_low.weight, params.head_low.bias)
    if not params.two_stream:
        return {
            "f_low": f_low,
            "std_cache": std_cache,
            "s_low": s_low,
            "s_combined": None,
            "s_avg": s_low,
        }
    f_high, fus_cache = backbone_forward(high, params.fusion_net)
    f_cat = np.concatenate([f_low, f_high], axis=1)
    s_combined = linear(f_cat, params.head_combined.weight, params.head_combined.bias)
    return {
        "f_low": f_low,
        "f_high": f_high,
        "f_cat": f_cat,
        "std_cache": std_cache,
        "fus_cache": fus_cache,
        "s_low": s_low,
        "s_combined": s_combined,
        "s_avg": (s_low + s_combined) / 2.0,
    }


def forward_classify(
    low: np.ndarray, high: np.ndarray | None, params: ClassifierParams
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Score a batch of channel pairs: returns (s_low, s_combined, averaged)."""
    out = classify_with_cache(low, high, params)
    return out["s_low"], out["s_combined"], out["s_avg"]


def classifier_backward(cache, params: ClassifierParams, d_s_low, d_s_combined):
    """Gradients for all classifier parameters plus the channel gradients."""
    grads: dict[str, np.ndarray] = {}
    d_f_low, gw, gb = linear_grad(d_s_low, cache["f_low"], params.head_low.weight)
    grads["head_low.weight"], grads["head_low.bias"] = gw, gb
    d_high = None
    if params.two_stream:
        d_cat, gw, gb = linear_grad(
            d_s_combined, cache["f_cat"], params.head_combined.weight
        )
        grads["head_combined.weight"], grads["head_combined.bias"] = gw, gb
        f_dim = cache["f_low"].shape[1]
        d_f_low = d_f_low + d_cat[:, :f_dim]
        fus_grads, d_high = backbone_backward(
            cache["fus_cache"], params.fusion_net, d_cat[:, f_dim:]
        )
        grads.update({f"fusion.{k}": v for k, v in fus_grads.items()})
    std_grads, d_low = backbone_backward(
        cache["std_cache"], params.standard_net, d_f_low
    )
    grads.update({f"standard.{k}": v for k, v in std_grads.items()})
    return grads, d_low, d_high


def classification_loss(s_low, s_combined, labels):
    """Summed cross-entropy of the two heads (one head when not fused).

    Returns (loss, grad for s_low, grad for s_combined or None).
    """
    loss_low, g_low = softmax_cross_entropy(s_low, labels)
    if s_combined is None:
        return loss_low, g_low, None
    loss_combined, g_combined = softmax_cross_entropy(s_combined, labels)
    return loss_low + loss_combined, g_low, g_combined


def predict_topk(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores per row, descending, ties to lower index."""
    c = scores.shape[1]
    if not 1 <= k <= c:
        raise ValueError(f"k={k} out of range [1, {c}]")
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


class TwoStreamPipeline:
    """A decomposition frontend feeding the classifier, trained with SGD.

    The frontend supplies (low, high) channels per batch and may itself be
    trainable (learned encoder) or fixed (wavelet transform, plain resize).
    Gradient keys align with named_params() so the optimizer can walk them.
    """

    def __init__(self, frontend, cls_params: ClassifierParams):
        if cls_params.two_stream != frontend.produces_high:
            raise ValueError(
                "classifier and frontend disagree about the high channel"
            )
        self.frontend = frontend
        self.cls = cls_params

    def named_params(self) -> dict[str, np.ndarray]:
        params = dict(self.cls.named_arrays("cls"))
        params.update(self.frontend.named_params())
        return params

    def batch_loss_and_grads(self, images, labels):
        low, high, fcache = self.frontend.forward(images)
        cache = classify_with_cache(low, high, self.cls)
        loss_c, g_low, g_combined = classification_loss(
            cache["s_low"], cache["s_combined"], labels
        )
        cls_grads, d_low, d_high = classifier_backward(
            cache, self.cls, g_low, g_combined
        )
        grads = {f"cls.{k}": v for k, v in cls_grads.items()}
        grads.update(self.frontend.backward(fcache, d_low, d_high))
        metrics = {"L_c": loss_c, "loss": loss_c + self.frontend.extra_loss(fcache)}
        metrics.update(self.frontend.loss_terms(fcache))
        return metrics, grads

    def scores(self, images, mode: str = "avg") -> np.ndarray:
        """Class scores for evaluation; mode 'low_only' ignores the fusion head."""
        low, high, _ = self.frontend.forward(images)
        s_low, _, s_avg = forward_classify(low, high, self.cls)
        if mode == "low_only":
            return s_low
        if mode != "avg":
            raise ValueError(f"unknown score mode {mode!r}")
        return s_avg
