"""Wavelet-like auto-encoder: learned two-channel image decomposition.

The encoder runs three stride-1 3x3 convolutions (16 channels) over the
image and then two stride-2 branch convolutions that emit the low-frequency
and high-frequency half-resolution channels.  The decoder has one branch per
channel (4x4 stride-2 transposed conv up to full resolution, then three 3x3
convolutions); the branch outputs are summed to synthesize the image.

The transform loss ties the two: a reconstruction term between input and
synthesis plus a weighted energy term on the high-frequency channel, which
pushes image content into the low channel.  Branch output layers are linear
(no activation) so the channels can carry signed residuals.

Parameters are immutable during forward/backward; only the optimizer mutates
them between steps, so frozen-parameter passes may run concurrently on
disjoint batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import (
    DEFAULT_DTYPE,
    ConvLayer,
    layer_backward,
    layer_forward,
    make_conv_layer,
    relu,
    relu_grad,
)

ENCODER_WIDTH = 16


@dataclass
class EncoderParams:
    """Trunk (stride-1 convs with ReLU) plus the two stride-2 branch convs."""

    trunk: list[ConvLayer]
    branch_low: ConvLayer
    branch_high: ConvLayer

    @property
    def image_channels(self) -> int:
        return self.trunk[0].spec.in_channels

    def named_layers(self, prefix: str = "encoder"):
        for i, layer in enumerate(self.trunk):
            yield f"{prefix}.trunk{i}", layer
        yield f"{prefix}.branch_low", self.branch_low
        yield f"{prefix}.branch_high", self.branch_high

    def named_arrays(self, prefix: str = "wae.encoder"):
        for name, layer in self.named_layers(prefix):
            yield f"{name}.weight", layer.weight
            yield f"{name}.bias", layer.bias


@dataclass
class DecoderBranch:
    """Upsampling deconv followed by refining convs; last layer linear."""

    layers: list[ConvLayer]

    def named_layers(self, prefix: str):
        for i, layer in enumerate(self.layers):
            yield f"{prefix}.layer{i}", layer


@dataclass
class WaeParams:
    encoder: EncoderParams
    decoder_low: DecoderBranch
    decoder_high: DecoderBranch

    @property
    def image_channels(self) -> int:
        return self.encoder.image_channels

    def named_layers(self, prefix: str = "wae"):
        yield from self.encoder.named_layers(f"{prefix}.encoder")
        yield from self.decoder_low.named_layers(f"{prefix}.decoder_low")
        yield from self.decoder_high.named_layers(f"{prefix}.decoder_high")

    def named_arrays(self, prefix: str = "wae"):
        for name, layer in self.named_layers(prefix):
            yield f"{name}.weight", layer.weight
            yield f"{name}.bias", layer.bias


def init_encoder_params(
    image_channels: int, rng, width: int = ENCODER_WIDTH, dtype=DEFAULT_DTYPE
) -> EncoderParams:
    """Three stride-1 trunk convs, then the two stride-2 branch convs."""
    trunk = [
        make_conv_layer(image_channels, width, 3, 1, 1, rng, dtype),
        make_conv_layer(width, width, 3, 1, 1, rng, dtype),
        make_conv_layer(width, width, 3, 1, 1, rng, dtype),
    ]
    return EncoderParams(
        trunk=trunk,
        branch_low=make_conv_layer(width, image_channels, 3, 2, 1, rng, dtype),
        branch_high=make_conv_layer(width, image_channels, 3, 2, 1, rng, dtype),
    )


def _decoder_branch(image_channels, width, rng, dtype) -> DecoderBranch:
    return DecoderBranch(layers=[
        make_conv_layer(image_channels, width, 4, 2, 1, rng, dtype, transposed=True),
        make_conv_layer(width, width, 3, 1, 1, rng, dtype),
        make_conv_layer(width, width, 3, 1, 1, rng, dtype),
        make_conv_layer(width, image_channels, 3, 1, 1, rng, dtype),
    ])


def init_wae_params(
    image_channels: int, rng, width: int = ENCODER_WIDTH, dtype=DEFAULT_DTYPE
) -> WaeParams:
    return WaeParams(
        encoder=init_encoder_params(image_channels, rng, width, dtype),
        decoder_low=_decoder_branch(image_channels, width, rng, dtype),
        decoder_high=_decoder_branch(image_channels, width, rng, dtype),
    )


def _conv_from_arrays(tensors, name, stride, padding=1, transposed=False) -> ConvLayer:
    try:
        weight, bias = tensors[f"{name}.weight"], tensors[f"{name}.bias"]
    except KeyError as exc:
        raise ValueError(f"checkpoint is missing tensor {exc.args[0]!r}") from None
    if transposed:
        c_in, c_out = weight.shape[0], weight.shape[1]
    else:
        c_out, c_in = weight.shape[0], weight.shape[1]
    from .tensor_core import ConvSpec

    spec = ConvSpec(c_in, c_out, weight.shape[2], weight.shape[3],
                    stride=stride, padding=padding, transposed=transposed)
    return ConvLayer(weight, bias, spec)


def _decoder_from_arrays(tensors, prefix) -> DecoderBranch:
    layers = [_conv_from_arrays(tensors, f"{prefix}.layer0", 2, 1, transposed=True)]
    i = 1
    while f"{prefix}.layer{i}.weight" in tensors:
        layers.append(_conv_from_arrays(tensors, f"{prefix}.layer{i}", 1, 1))
        i += 1
    return DecoderBranch(layers=layers)


def wae_params_from_arrays(tensors: dict, prefix: str = "wae"):
    """Rebuild parameters from a checkpoint tensor map.

    Returns EncoderParams when the map has no decoder entries (the
    unconstrained learned-decomposition baseline stores only the encoder).
    """
    enc_prefix = f"{prefix}.encoder"
    trunk = []
    i = 0
    while f"{enc_prefix}.trunk{i}.weight" in tensors:
        trunk.append(_conv_from_arrays(tensors, f"{enc_prefix}.trunk{i}", 1, 1))
        i += 1
    if not trunk:
        raise ValueError(f"checkpoint has no {enc_prefix}.trunk0.weight entry")
    encoder = EncoderParams(
        trunk=trunk,
        branch_low=_conv_from_arrays(tensors, f"{enc_prefix}.branch_low", 2, 1),
        branch_high=_conv_from_arrays(tensors, f"{enc_prefix}.branch_high", 2, 1),
    )
    if f"{prefix}.decoder_low.layer0.weight" not in tensors:
        return encoder
    return WaeParams(
        encoder=encoder,
        decoder_low=_decoder_from_arrays(tensors, f"{prefix}.decoder_low"),
        decoder_high=_decoder_from_arrays(tensors, f"{prefix}.decoder_high"),
    )


@dataclass
class TransformLossParts:
    """Reconstruction term, energy term, and their weighted sum."""

    l_r: float
    l_e: float
    l_t: float
    lam: float


def _check_image(image: np.ndarray, params) -> None:
    if image.ndim != 4:
        raise ValueError(f"image must be 4-D (N,C,H,W), got {image.ndim}-D")
    n, c, h, w = image.shape
    if c != params.image_channels:
        raise ValueError(
            f"image has {c} channels, encoder expects {params.image_channels}"
        )
    if h % 2 != 0 or w % 2 != 0:
        raise ValueError(
            f"spatial dims must be even, got {h}x{w}; resize upstream"
        )


def _encoder_of(params) -> EncoderParams:
    return params.encoder if isinstance(params, WaeParams) else params


def encode_with_cache(image: np.ndarray, params):
    """Forward encoder pass keeping pre-activations for the backward pass."""
    enc = _encoder_of(params)
    _check_image(image, enc)
    trunk_in, trunk_pre = [], []
    h = image
    for layer in enc.trunk:
        trunk_in.append(h)
        pre = layer_forward(h, layer)
        trunk_pre.append(pre)
        h = relu(pre)
    low = layer_forward(h, enc.branch_low)
    high = layer_forward(h, enc.branch_high)
    cache = {"trunk_in": trunk_in, "trunk_pre": trunk_pre, "trunk_out": h}
    return low, high, cache


def encode(image: np.ndarray, params) -> tuple[np.ndarray, np.ndarray]:
    """Decompose an image into (low, high) half-resolution channels."""
    low, high, _ = encode_with_cache(image, params)
    return low, high


def encode_backward(cache, params, d_low, d_high) -> dict[str, np.ndarray]:
    """Gradients of all encoder parameters given channel gradients."""
    enc = _encoder_of(params)
    grads: dict[str, np.ndarray] = {}
    h = cache["trunk_out"]
    gl, gw, gb = layer_backward(d_low, h, enc.branch_low)
    grads["branch_low.weight"], grads["branch_low.bias"] = gw, gb
    gh, gw, gb = layer_backward(d_high, h, enc.branch_high)
    grads["branch_high.weight"], grads["branch_high.bias"] = gw, gb
    g = gl + gh
    for i in reversed(range(len(enc.trunk))):
        g = relu_grad(g, cache["trunk_pre"][i])
        g, gw, gb = layer_backward(g, cache["trunk_in"][i], enc.trunk[i])
        grads[f"trunk{i}.weight"], grads[f"trunk{i}.bias"] = gw, gb
    return grads


def _branch_forward_with_cache(x: np.ndarray, branch: DecoderBranch):
    inputs, pres = [], []
    h = x
    last = len(branch.layers) - 1
    for i, layer in enumerate(branch.layers):
        inputs.append(h)
        pre = layer_forward(h, layer)
        pres.append(pre)
        h = pre if i == last else relu(pre)  # final layer stays linear
    return h, {"inputs": inputs, "pres": pres}


def _branch_backward(cache, branch: DecoderBranch, d_out):
    grads: dict[str, np.ndarray] = {}
    g = d_out
    last = len(branch.layers) - 1
    for i in reversed(range(len(branch.layers))):
        if i != last:
            g = relu_grad(g, cache["pres"][i])
        g, gw, gb = layer_backward(g, cache["inputs"][i], branch.layers[i])
        grads[f"layer{i}.weight"], grads[f"layer{i}.bias"] = gw, gb
    return grads, g


def decode_with_cache(low: np.ndarray, high: np.ndarray, params: WaeParams):
    if low.shape != high.shape:
        raise ValueError(
            f"channel shapes differ: low {low.shape} vs high {high.shape}"
        )
    up_low, cache_low = _branch_forward_with_cache(low, params.decoder_low)
    up_high, cache_high = _branch_forward_with_cache(high, params.decoder_high)
    recon = up_low + up_high
    return recon, up_low, up_high, {"low": cache_low, "high": cache_high}


def decode(
    low: np.ndarray, high: np.ndarray, params: WaeParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Synthesize the image: per-branch upsampling transforms, then a sum."""
    recon, up_low, up_high, _ = decode_with_cache(low, high, params)
    return recon, up_low, up_high


def decode_backward(cache, params: WaeParams, d_recon):
    """Backprop the synthesis; returns branch grads and channel gradients."""
    grads_low, d_low = _branch_backward(cache["low"], params.decoder_low, d_recon)
    grads_high, d_high = _branch_backward(cache["high"], params.decoder_high, d_recon)
    grads = {f"decoder_low.{k}": v for k, v in grads_low.items()}
    grads.update({f"decoder_high.{k}": v for k, v in grads_high.items()})
    return grads, d_low, d_high


def transform_loss(
    image: np.ndarray,
    recon: np.ndarray,
    high: np.ndarray,
    lam: float = 1.0,
    reduction: str = "mean",
) -> TransformLossParts:
    """Reconstruction error plus lam-weighted energy of the high channel.

    `reduction` selects per-element means (default; keeps lam balanced across
    resolutions) or raw sums of squares.
    """
    if image.shape != recon.shape:
        raise ValueError(
            f"image shape {image.shape} != reconstruction shape {recon.shape}"
        )
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    diff = recon.astype(np.float64) - image
    sq_err = diff * diff
    sq_high = high.astype(np.float64) ** 2
    if reduction == "mean":
        l_r = float(sq_err.mean())
        l_e = float(sq_high.mean())
    else:
        l_r = float(sq_err.sum())
        l_e = float(sq_high.sum())
    return TransformLossParts(l_r=l_r, l_e=l_e, l_t=l_r + lam * l_e, lam=lam)


def transform_loss_grads(
    image: np.ndarray,
    recon: np.ndarray,
    high: np.ndarray,
    lam: float,
    reduction: str = "mean",
) -> tuple[np.ndarray, np.ndarray]:
    """(d l_t / d recon, d l_t / d high) for the direct energy path."""
    scale_r = 2.0 / image.size if reduction == "mean" else 2.0
    scale_e = 2.0 / high.size if reduction == "mean" else 2.0
    d_recon = (scale_r * (recon - image)).astype(recon.dtype)
    d_high = (lam * scale_e * high).astype(high.dtype)
    return d_recon, d_high


def wae_forward(image: np.ndarray, params: WaeParams):
    """Full encode + decode pass; returns channels, synthesis, and caches."""
    low, high, enc_cache = encode_with_cache(image, params)
    recon, up_low, up_high, dec_cache = decode_with_cache(low, high, params)
    return {
        "low": low,
        "high": high,
        "recon": recon,
        "up_low": up_low,
        "up_high": up_high,
        "enc_cache": enc_cache,
        "dec_cache": dec_cache,
    }


def wae_backward(
    image: np.ndarray,
    params: WaeParams,
    lam: float = 1.0,
    reduction: str = "mean",
) -> tuple[dict[str, np.ndarray], TransformLossParts]:
    """Exact analytic gradient of the transform loss w.r.t. every parameter.

    Chains the decoder path and the direct energy path into the high branch.
    Gradient keys match WaeParams.named_arrays(prefix="wae").
    """
    state = wae_forward(image, params)
    parts = transform_loss(image, state["recon"], state["high"], lam, reduction)
    d_recon, d_high_energy = transform_loss_grads(
        image, state["recon"], state["high"], lam, reduction
    )
    dec_grads, d_low, d_high = decode_backward(state["dec_cache"], params, d_recon)
    enc_grads = encode_backward(
        state["enc_cache"], params, d_low, d_high + d_high_energy
    )
    grads = {f"wae.encoder.{k}": v for k, v in enc_grads.items()}
    grads.update({f"wae.{k}": v for k, v in dec_grads.items()})
    return grads, parts


class WaeFrontend:
    """Learned decomposition frontend for classification pipelines.

    trainable=False freezes the parameters (classifier-only training);
    transform_weight > 0 also decodes each batch and folds the weighted
    transform loss into the objective (joint fine-tuning).  Supports plain
    EncoderParams when no transform loss is requested, which backs the
    unconstrained learned-decomposition baseline.
    """

    produces_high = True

    def __init__(
        self,
        params,
        trainable: bool = False,
        transform_weight: float = 0.0,
        lam: float = 1.0,
        reduction: str = "mean",
    ):
        if transform_weight > 0 and not isinstance(params, WaeParams):
            raise ValueError("transform loss requires full WAE parameters")
        self.params = params
        self.trainable = trainable
        self.transform_weight = transform_weight
        self.lam = lam
        self.reduction = reduction

    def named_params(self) -> dict[str, np.ndarray]:
        if not self.trainable:
            return {}
        if isinstance(self.params, WaeParams):
            return dict(self.params.named_arrays("wae"))
        return dict(self.params.named_arrays())

    def forward(self, images):
        if self.transform_weight > 0:
            state = wae_forward(images, self.params)
            parts = transform_loss(
                images, state["recon"], state["high"], self.lam, self.reduction
            )
            return state["low"], state["high"], {
                "state": state,
                "parts": parts,
                "image": images,
            }
        low, high, enc_cache = encode_with_cache(images, self.params)
        return low, high, {"enc_cache": enc_cache}

    def loss_terms(self, cache) -> dict[str, float]:
        if "parts" not in cache:
            return {}
        parts = cache["parts"]
        return {"l_r": parts.l_r, "l_e": parts.l_e, "l_t": parts.l_t}

    def extra_loss(self, cache) -> float:
        if "parts" not in cache:
            return 0.0
        return self.transform_weight * cache["parts"].l_t

    def backward(self, cache, d_low, d_high) -> dict[str, np.ndarray]:
        if not self.trainable:
            return {}
        grads: dict[str, np.ndarray] = {}
        if self.transform_weight > 0:
            state = cache["state"]
            d_recon, d_high_energy = transform_loss_grads(
                cache["image"], state["recon"], state["high"], self.lam,
                self.reduction,
            )
            gamma = self.transform_weight
            dec_grads, d_low_t, d_high_t = decode_backward(
                state["dec_cache"], self.params, gamma * d_recon
            )
            d_low = d_low + d_low_t
            d_high = d_high + d_high_t + gamma * d_high_energy
            grads.update({f"wae.{k}": v for k, v in dec_grads.items()})
            enc_cache = state["enc_cache"]
        else:
            enc_cache = cache["enc_cache"]
        enc_grads = encode_backward(enc_cache, self.params, d_low, d_high)
        grads.update({f"wae.encoder.{k}": v for k, v in enc_grads.items()})
        return grads


def channel_view(channel: np.ndarray, kind: str) -> np.ndarray:
    """Map a channel to displayable [0,1] values (visualization only).

    Low/reconstruction images clamp; the signed high channel is re-centered
    through 0.5 + x/2 before clamping.
    """
    if kind == "high":
        channel = 0.5 + channel / 2.0
    elif kind not in ("low", "recon"):
        raise ValueError(f"unknown channel kind {kind!r}")
    return np.clip(channel, 0.0, 1.0)
