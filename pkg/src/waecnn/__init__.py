"""Two-channel wavelet-like auto-encoder CNN acceleration, desk scale.

A learned encoder splits an image into a low-frequency and a high-frequency
half-resolution channel; a dual-branch decoder enforces reconstructability;
a two-stream classifier (full-width net on the low channel, quarter-width
fusion net on the high channel) consumes the pair.  Reference baselines,
a three-stage training procedure, FLOP accounting, and a wall-clock
micro-benchmark round out the package.
"""

__version__ = "0.1.0"
