"""Variable-feature self-attention over three-mode tensors.

Projections act on the third mode only, so one parameter set serves inputs
whose first two mode sizes differ call to call. Attention is computed between
first-mode slices; permuting slices along the first or second mode permutes
the output identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidShapeError


@dataclass
class VsaParams:
    """One attention head. Weight shapes depend only on the third-mode size
    and the two hidden widths, never on the first two mode sizes."""

    w_query: Tensor  # (h_key, d3)
    w_key: Tensor    # (h_key, d3)
    w_value: Tensor  # (h_value, d3)

    @property
    def d3(self) -> int:
        return self.w_query.shape[1]

    @property
    def h_key(self) -> int:
        return self.w_query.shape[0]

    @property
    def h_value(self) -> int:
        return self.w_value.shape[0]


@dataclass
class MvsaParams:
    """R independent heads plus the third-mode output projection."""

    heads: list  # list[VsaParams], all with identical (h_key, h_value)
    w_out: Tensor  # (h, r * h_value)

    @property
    def r(self) -> int:
        return len(self.heads)

    @property
    def d3(self) -> int:
        return self.heads[0].d3

    @property
    def h(self) -> int:
        return self.w_out.shape[0]


def _fan_in_uniform(rng: np.random.Generator, shape, dtype) -> Tensor:
    # variance-preserving fan-in scaling: Var(w) = 1/fan_in
    bound = math.sqrt(3.0 / shape[-1])
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def init_vsa_params(d3: int, h_key: int, h_value: int,
                    rng: np.random.Generator, dtype=np.float32) -> VsaParams:
    return VsaParams(
        w_query=_fan_in_uniform(rng, (h_key, d3), dtype),
        w_key=_fan_in_uniform(rng, (h_key, d3), dtype),
        w_value=_fan_in_uniform(rng, (h_value, d3), dtype),
    )


def init_mvsa_params(d3: int, r: int, h_key: int, h_value: int, h: int,
                     rng: np.random.Generator, dtype=np.float32) -> MvsaParams:
    heads = [init_vsa_params(d3, h_key, h_value, rng, dtype) for _ in range(r)]
    return MvsaParams(heads=heads, w_out=_fan_in_uniform(rng, (h, r * h_value), dtype))


def vsa_forward(z: Tensor, params: VsaParams):
    """Single-head variable-feature self-attention.

    Returns ``(o, attn)`` where ``o`` has shape (d1, d2, h_value) and ``attn``
    is the (d1, d1) attention matrix, detached so gradients never flow through
    the diagnostic copy.
    """
    if z.ndim != 3:
        raise InvalidShapeError(f"vsa_forward expects three modes, got shape {z.shape}")
    if z.shape[2] != params.d3:
        raise InvalidShapeError(
            f"vsa_forward: input third mode {z.shape} does not match "
            f"parameter d3={params.d3}"
        )
    d2 = z.shape[1]
    q = ad.mode3_product(z, params.w_query)
    k = ad.mode3_product(z, params.w_key)
    v = ad.mode3_product(z, params.w_value)
    scores = ad.matmul(ad.matricize_mode1(q), ad.transpose2d(ad.matricize_mode1(k)))
    scale = 1.0 / math.sqrt(d2 * params.h_key)
    attn = ad.softmax_rows(ad.mul(scores, scale))
    o = ad.mode1_product(v, attn)
    return o, attn.detach()


def mvsa_forward(z: Tensor, params: MvsaParams) -> Tensor:
    """Multi-head composition: heads run independently, their outputs are
    concatenated on the third mode and projected by ``w_out``."""
    outs = [vsa_forward(z, head)[0] for head in params.heads]
    stacked = outs[0] if len(outs) == 1 else ad.concat(outs, axis=2)
    return ad.mode3_product(stacked, params.w_out)


def vsa_flop_estimate(d1: int, d2: int, d3: int, h_key: int, h_value: int,
                      h: int) -> int:
    """Closed-form operation count for one VSA layer:
    d1^2 * d2 * (h_key + h) + d1 * d2 * d3 * (h_key + h_value)."""
    for name, v in (("d1", d1), ("d2", d2), ("d3", d3),
                    ("h_key", h_key), ("h_value", h_value), ("h", h)):
        if v <= 0:
            raise InvalidShapeError(f"vsa_flop_estimate: {name} must be positive")
    return d1 * d1 * d2 * (h_key + h) + d1 * d2 * d3 * (h_key + h_value)
