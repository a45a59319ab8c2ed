"""Shared test utilities."""

import numpy as np


def auc_pairwise_oracle(scores, labels):
    """O(n^2) pairwise counting with ties worth one half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (pos.size * neg.size)

from tcflow.conditioners import EncoderConfig, build_encoder
from tcflow.flow import ConditionerConfig, FlowConfig, FlowModel


def small_flow(dim=2, n_layers=2, context_dim=0, seed=0, multiplier=2,
               cond_layers=3, dropout=0.1, funnel=1.5, encoder=None):
    cfg = FlowConfig(n_layers, ConditionerConfig(multiplier, cond_layers, dropout, funnel))
    if encoder is None and context_dim > 0:
        encoder = _FixedDimEncoder(context_dim)
    return FlowModel(dim, cfg, encoder, np.random.default_rng(seed))


class _FixedDimEncoder:
    """Bare encoder stub exposing only a context dimension."""

    def __init__(self, context_dim):
        self.context_dim = context_dim

    def parameters(self):
        return []


def build_model_with_encoder(dim, n_layers, encoder_cfg: EncoderConfig, seed=0,
                             multiplier=2, cond_layers=3):
    rng = np.random.default_rng(seed)
    encoder = build_encoder(encoder_cfg, dim, rng)
    cfg = FlowConfig(n_layers, ConditionerConfig(multiplier, cond_layers, 0.1, 1.5))
    model = FlowModel(dim, cfg, encoder, rng)
    model.encoder_cfg = encoder_cfg
    return model


def randomize_model(model, rng, scale=0.4):
    """Overwrite every parameter (including heads and caps) with noise, so the
    flow is far from the identity."""
    for p in model.parameters():
        p.value = rng.normal(0.0, scale, p.value.shape)


def force_affine(layer, log_scale, shift):
    """Pin a coupling layer to constant (log_scale, shift) regardless of input."""
    half = layer.dim - layer.split
    for w, b in layer.hidden:
        w.value[:] = 0.0
        b.value[:] = 0.0
    layer.head_w.value[:] = 0.0
    layer.head_b.value[:half] = 1.0
    layer.head_b.value[half:] = np.asarray(shift, dtype=float)
    layer.scale_cap.value[:] = np.asarray(log_scale, dtype=float) / np.tanh(1.0)
