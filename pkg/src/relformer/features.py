"""Tracklet feature initialization and the encoder-input pooling.

Per-frame features are [MLP_v(appearance); MLP_s(spatial)] with each half of
width d/2; the spatial feature stacks the raw boxes with their frame-to-frame
deltas (final delta row zero-padded so the row count stays l_i). The encoder
input pools the per-frame feature to a fixed number of rows, flattens, and
projects back to width d.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .nn import MlpSpec, ParamStore, init_mlp, mlp_forward


def delta_boxes(boxes: np.ndarray) -> np.ndarray:
    """Row j is boxes[j+1] - boxes[j]; the final row is zero-padded."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if len(boxes) < 2:
        raise DataError(f"delta_boxes needs at least 2 frames, got {len(boxes)}")
    out = np.zeros_like(boxes)
    out[:-1] = boxes[1:] - boxes[:-1]
    return out


def spatial_feature(boxes: np.ndarray) -> np.ndarray:
    """(l_i, 8): boxes concatenated with their deltas along the feature axis."""
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([boxes, delta_boxes(boxes)], axis=1)


def feature_specs(d_a: int, d: int, hidden: int) -> tuple[MlpSpec, MlpSpec]:
    if d % 2 != 0:
        raise ConfigError(f"model.d must be even to split per-frame halves, got {d}")
    return MlpSpec(d_a, hidden, d // 2), MlpSpec(8, hidden, d // 2)


def init_feature_params(store: ParamStore, d_a: int, d: int, hidden: int, l_pool: int,
                        rng: np.random.Generator) -> None:
    appearance_spec, spatial_spec = feature_specs(d_a, d, hidden)
    init_mlp(store, "feat.appearance_mlp", appearance_spec, rng)
    init_mlp(store, "feat.spatial_mlp", spatial_spec, rng)
    init_mlp(store, "feat.pool_mlp", MlpSpec(l_pool * d, hidden, d), rng)


def init_tracklet_feature(store: ParamStore, appearance: Tensor, spatial: Tensor,
                          d_a: int, d: int, hidden: int) -> Tensor:
    """Per-frame feature (l_i, d) from appearance (l_i, d_a) and spatial (l_i, 8)."""
    appearance_spec, spatial_spec = feature_specs(d_a, d, hidden)
    visual = mlp_forward(store, "feat.appearance_mlp", appearance_spec, appearance)
    spat = mlp_forward(store, "feat.spatial_mlp", spatial_spec, spatial)
    return ad.concat([visual, spat], axis=1)


def pool_matrix(l_i: int, l_pool: int) -> np.ndarray:
    """(l_pool, l_i) row-stochastic adaptive average-pooling weights.

    Bin j averages frames [floor(j*l_i/l), floor((j+1)*l_i/l)), widened to at
    least one frame; for l_i < l_pool the bins overlap.
    """
    w = np.zeros((l_pool, l_i))
    for j in range(l_pool):
        a = min(j * l_i // l_pool, l_i - 1)
        b = min(max((j + 1) * l_i // l_pool, a + 1), l_i)
        w[j, a:b] = 1.0 / (b - a)
    return w


def pool_to_encoder_input(store: ParamStore, per_frame: Tensor, d: int, hidden: int,
                          l_pool: int) -> Tensor:
    """(d,) encoder input: adaptive average-pool to l rows, flatten, project."""
    l_i = per_frame.shape[0]
    pooled = ad.matmul(ad.constant(pool_matrix(l_i, l_pool)), per_frame)
    flat = ad.reshape(pooled, (1, l_pool * d))
    out = mlp_forward(store, "feat.pool_mlp", MlpSpec(l_pool * d, hidden, d), flat)
    return ad.reshape(out, (d,))
