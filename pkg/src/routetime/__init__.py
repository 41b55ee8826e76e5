"""Courier route and delivery-time prediction.

A numpy-backed library around a small tape autodiff engine: a two-branch
Transformer encoder over completed and pending package sets, an attention
pattern memory for scarce pickup behaviour, and an LSTM pointer decoder
fused with courier mobility statistics that emits a package route and
per-step delivery-time estimates.
"""

__version__ = "0.1.0"
