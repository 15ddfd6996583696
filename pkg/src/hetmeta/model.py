"""Episode embedding model.

An episode's labeled/unlabeled examples are packed into a three-mode tensor
of four slices (values plus three binary indicators). Blocks alternate
attention across examples and attention across attributes+labels; each block
is ``residual-projection + FF(LN(MVSA(.)))``. Per-example embeddings are the
concatenated attribute fibers of the final block output, so their dimension
is ``n_attributes * h_out`` and varies across tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import MvsaParams, init_mvsa_params, mvsa_forward
from .autodiff import Tensor
from .errors import InvalidConfigError, InvalidEpisodeError, InvalidShapeError

CLASSIFICATION = "classification"
REGRESSION = "regression"

INPUT_SLICES = 4  # values, observed indicator, attribute indicator, label indicator


@dataclass
class Episode:
    """One task instance: labeled support set, unlabeled queries, and (during
    training/evaluation) the held-out labels of the queries."""

    x_labeled: np.ndarray          # (n_labeled, n_attributes)
    y_labeled: np.ndarray          # (n_labeled, n_classes) one-hot, or real targets
    x_unlabeled: np.ndarray        # (n_unlabeled, n_attributes)
    y_unlabeled: np.ndarray | None = None  # held-out labels; never model input
    kind: str = CLASSIFICATION

    def __post_init__(self):
        self.x_labeled = np.atleast_2d(np.asarray(self.x_labeled, dtype=np.float64))
        self.y_labeled = np.atleast_2d(np.asarray(self.y_labeled, dtype=np.float64))
        self.x_unlabeled = np.atleast_2d(np.asarray(self.x_unlabeled, dtype=np.float64))
        if self.y_unlabeled is not None:
            self.y_unlabeled = np.atleast_2d(np.asarray(self.y_unlabeled, dtype=np.float64))
        if self.kind not in (CLASSIFICATION, REGRESSION):
            raise InvalidEpisodeError(f"unknown episode kind {self.kind!r}")
        if self.n_labeled < 1 or self.n_unlabeled < 1:
            raise InvalidEpisodeError("episodes need at least one labeled and one unlabeled example")
        if self.n_attributes < 1 or self.n_classes < 1:
            raise InvalidEpisodeError("episodes need at least one attribute and one label column")
        if self.x_unlabeled.shape[1] != self.n_attributes:
            raise InvalidEpisodeError(
                f"labeled/unlabeled attribute counts differ: "
                f"{self.n_attributes} vs {self.x_unlabeled.shape[1]}"
            )
        for name, arr in (("x_labeled", self.x_labeled), ("y_labeled", self.y_labeled),
                          ("x_unlabeled", self.x_unlabeled), ("y_unlabeled", self.y_unlabeled)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise InvalidEpisodeError(f"{name} contains non-finite values")
        if self.y_unlabeled is not None:
            if self.y_unlabeled.shape != (self.n_unlabeled, self.n_classes):
                raise InvalidEpisodeError(
                    f"y_unlabeled shape {self.y_unlabeled.shape} does not match "
                    f"({self.n_unlabeled}, {self.n_classes})"
                )
        if self.kind == CLASSIFICATION:
            # class coverage (>=1 labeled example per class) is enforced where
            # it is needed, at the prototype head; episodes themselves may
            # legitimately miss classes (e.g. diagnostic inputs).
            for name, y in (("y_labeled", self.y_labeled), ("y_unlabeled", self.y_unlabeled)):
                if y is None:
                    continue
                ok = np.all(np.isin(y, (0.0, 1.0))) and np.all(y.sum(axis=1) == 1.0)
                if not ok:
                    raise InvalidEpisodeError(f"{name} rows must be one-hot")

    @property
    def n_labeled(self) -> int:
        return self.x_labeled.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.x_unlabeled.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.x_labeled.shape[1]

    @property
    def n_classes(self) -> int:
        return self.y_labeled.shape[1]


@dataclass
class ModelConfig:
    """Architecture hyperparameters and ablation switches."""

    blocks: int = 3
    heads: int = 4
    h_key: int = 32
    h_value: int = 32
    h: int = 32          # attention output / inter-block fiber size
    h_out: int = 1       # fiber size emitted by the last block
    ff_depth: int = 3
    ff_width: int = 32
    example_attn_only: bool = False
    attribute_attn_only: bool = False
    drop_observed_indicator: bool = False
    drop_attlab_indicators: bool = False
    drop_residual: bool = False
    drop_layernorm: bool = False

    def __post_init__(self):
        for name in ("blocks", "heads", "h_key", "h_value", "h", "h_out",
                     "ff_depth", "ff_width"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"ModelConfig.{name} must be >= 1")
        if self.example_attn_only and self.attribute_attn_only:
            raise InvalidConfigError("example_attn_only and attribute_attn_only are exclusive")
        if not self.block_parities():
            raise InvalidConfigError("ablation switches removed every block")

    def block_parities(self) -> list[str]:
        """Attention axis per block, after ablation filtering. The base stack
        alternates example-wise, attribute-wise, example-wise, ..."""
        base = ["example" if i % 2 == 0 else "attribute" for i in range(self.blocks)]
        if self.example_attn_only:
            return [p for p in base if p == "example"]
        if self.attribute_attn_only:
            return [p for p in base if p == "attribute"]
        return base

    def block_sizes(self) -> list[tuple[int, int]]:
        """(fiber-in, fiber-out) per kept block; the chain starts at the four
        input slices and ends at ``h_out``."""
        n = len(self.block_parities())
        sizes = []
        h_in = INPUT_SLICES
        for i in range(n):
            h_out = self.h_out if i == n - 1 else self.h
            sizes.append((h_in, h_out))
            h_in = h_out
        return sizes


@dataclass
class BlockParams:
    """Trainable weights of one block. ``w_res`` / layer-norm entries are
    absent when the matching ablation switch removed them."""

    mvsa: MvsaParams
    w_res: Tensor | None           # (fiber-in, fiber-out)
    ff_weights: list = field(default_factory=list)  # each (out, in)
    ff_biases: list = field(default_factory=list)   # each (out,)
    ln_gain: Tensor | None = None  # (h,)
    ln_bias: Tensor | None = None  # (h,)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    # variance-preserving fan-in scaling: Var(w) = 1/fan_in
    bound = math.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_block_params(cfg: ModelConfig, h_in: int, h_out: int,
                      rng: np.random.Generator, dtype=np.float32) -> BlockParams:
    mvsa = init_mvsa_params(h_in, cfg.heads, cfg.h_key, cfg.h_value, cfg.h, rng, dtype)
    w_res = None if cfg.drop_residual else _uniform(rng, (h_in, h_out), h_in, dtype)
    ff_ins = [cfg.h] + [cfg.ff_width] * (cfg.ff_depth - 1)
    ff_outs = [cfg.ff_width] * (cfg.ff_depth - 1) + [h_out]
    ff_weights = [_uniform(rng, (o, i), i, dtype) for i, o in zip(ff_ins, ff_outs)]
    ff_biases = [Tensor(np.zeros(o, dtype=dtype), requires_grad=True) for o in ff_outs]
    if cfg.drop_layernorm:
        ln_gain = ln_bias = None
    else:
        ln_gain = Tensor(np.ones(cfg.h, dtype=dtype), requires_grad=True)
        ln_bias = Tensor(np.zeros(cfg.h, dtype=dtype), requires_grad=True)
    return BlockParams(mvsa=mvsa, w_res=w_res, ff_weights=ff_weights,
                       ff_biases=ff_biases, ln_gain=ln_gain, ln_bias=ln_bias)


def init_model_params(cfg: ModelConfig, rng: np.random.Generator,
                      dtype=np.float32) -> list[BlockParams]:
    return [init_block_params(cfg, h_in, h_out, rng, dtype)
            for h_in, h_out in cfg.block_sizes()]


def named_parameters(blocks: list[BlockParams], gp_head=None):
    """Flat (name, Tensor) view of every trainable leaf, in a stable order."""
    out = []
    for i, blk in enumerate(blocks):
        for j, head in enumerate(blk.mvsa.heads):
            out.append((f"block{i}.head{j}.w_query", head.w_query))
            out.append((f"block{i}.head{j}.w_key", head.w_key))
            out.append((f"block{i}.head{j}.w_value", head.w_value))
        out.append((f"block{i}.mvsa.w_out", blk.mvsa.w_out))
        if blk.w_res is not None:
            out.append((f"block{i}.w_res", blk.w_res))
        for k, (w, b) in enumerate(zip(blk.ff_weights, blk.ff_biases)):
            out.append((f"block{i}.ff{k}.weight", w))
            out.append((f"block{i}.ff{k}.bias", b))
        if blk.ln_gain is not None:
            out.append((f"block{i}.ln.gain", blk.ln_gain))
            out.append((f"block{i}.ln.bias", blk.ln_bias))
    if gp_head is not None:
        out.append(("gp.log_lengthscale", gp_head.log_lengthscale))
        out.append(("gp.log_noise", gp_head.log_noise))
    return out


def build_input_tensor(ep: Episode, *, drop_observed_indicator: bool = False,
                       drop_attlab_indicators: bool = False,
                       dtype=np.float32) -> Tensor:
    """Pack an episode into the (n_labeled+n_unlabeled, M+C, 4) input tensor.

    Slice 1 holds attribute values and labels with zeros padded for the
    unlabeled labels; slice 2 marks observed entries; slices 3 and 4 mark
    attribute and label columns. Ablation switches zero out slice 2 or
    slices 3+4 while keeping the third-mode size fixed at four.
    """
    nl, nu = ep.n_labeled, ep.n_unlabeled
    m, c = ep.n_attributes, ep.n_classes
    n, cols = nl + nu, m + c
    z = np.zeros((n, cols, INPUT_SLICES), dtype=dtype)
    z[:nl, :m, 0] = ep.x_labeled
    z[:nl, m:, 0] = ep.y_labeled
    z[nl:, :m, 0] = ep.x_unlabeled
    if not drop_observed_indicator:
        z[:, :, 1] = 1.0
        z[nl:, m:, 1] = 0.0
    if not drop_attlab_indicators:
        z[:, :m, 2] = 1.0
        z[:, m:, 3] = 1.0
    return Tensor(z)


def _feed_forward(x: Tensor, weights, biases) -> Tensor:
    for i, (w, b) in enumerate(zip(weights, biases)):
        x = ad.add(ad.mode3_product(x, w), b)
        if i < len(weights) - 1:
            x = ad.relu(x)
    return x


def apply_block(z: Tensor, blk: BlockParams, cfg: ModelConfig) -> Tensor:
    """One block: residual third-mode projection plus FF(LN(MVSA(z)))."""
    a = mvsa_forward(z, blk.mvsa)
    if not cfg.drop_layernorm:
        a = ad.layer_norm(a, blk.ln_gain, blk.ln_bias)
    out = _feed_forward(a, blk.ff_weights, blk.ff_biases)
    if not cfg.drop_residual:
        out = ad.add(out, ad.mode3_product(z, ad.transpose2d(blk.w_res)))
    return out


def run_blocks(z: Tensor, cfg: ModelConfig, blocks: list[BlockParams]) -> Tensor:
    """Apply the alternating stack; attribute-wise blocks transpose the first
    two modes before and after the block."""
    parities = cfg.block_parities()
    if len(blocks) != len(parities):
        raise InvalidConfigError(
            f"{len(blocks)} parameter blocks for {len(parities)} configured blocks"
        )
    for parity, blk in zip(parities, blocks):
        if parity == "attribute":
            z = ad.transpose12(apply_block(ad.transpose12(z), blk, cfg))
        else:
            z = apply_block(z, blk, cfg)
    return z


def forward_embed(ep: Episode, cfg: ModelConfig, blocks: list[BlockParams]):
    """Embed an episode. Returns ``(z_labeled, z_unlabeled)`` with shapes
    (n_labeled, M*h_out) and (n_unlabeled, M*h_out): the class columns of the
    final tensor are discarded and the M attribute fibers concatenated."""
    dtype = blocks[0].mvsa.w_out.dtype
    z = build_input_tensor(
        ep,
        drop_observed_indicator=cfg.drop_observed_indicator,
        drop_attlab_indicators=cfg.drop_attlab_indicators,
        dtype=dtype,
    )
    out = run_blocks(z, cfg, blocks)
    m = ep.n_attributes
    n = ep.n_labeled + ep.n_unlabeled
    emb = ad.reshape(out[:, :m, :], (n, m * out.shape[2]))
    return emb[: ep.n_labeled], emb[ep.n_labeled :]


# -- literal-loop reference path ------------------------------------------


def _softmax_row(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    e = np.exp(shifted)
    return e / e.sum()


def _expanded_block(x: np.ndarray, blk: BlockParams, cfg: ModelConfig) -> np.ndarray:
    """Per-fiber expansion of one block with attention along the first axis,
    written as explicit sums over fibers."""
    head = blk.mvsa.heads[0]
    wq = head.w_query.data.astype(np.float64)
    wk = head.w_key.data.astype(np.float64)
    wv = head.w_value.data.astype(np.float64)
    wo = blk.mvsa.w_out.data.astype(np.float64)
    d1, d2 = x.shape[0], x.shape[1]
    scale = 1.0 / math.sqrt(d2 * head.h_key)

    scores = np.zeros((d1, d1))
    for i in range(d1):
        for j in range(d1):
            s = 0.0
            for m in range(d2):
                s += float((wq @ x[i, m]) @ (wk @ x[j, m]))
            scores[i, j] = s * scale
    attn = np.stack([_softmax_row(scores[i]) for i in range(d1)])

    fiber_out = blk.ff_weights[-1].shape[0]
    out = np.zeros((d1, d2, fiber_out))
    for i in range(d1):
        for m in range(d2):
            agg = np.zeros(wv.shape[0])
            for j in range(d1):
                agg += attn[i, j] * (wv @ x[j, m])
            fiber = wo @ agg
            if not cfg.drop_layernorm:
                mu = fiber.mean()
                var = ((fiber - mu) ** 2).mean()
                fiber = (fiber - mu) / math.sqrt(var + 1e-5)
                fiber = fiber * blk.ln_gain.data + blk.ln_bias.data
            for k, (w, b) in enumerate(zip(blk.ff_weights, blk.ff_biases)):
                fiber = w.data.astype(np.float64) @ fiber + b.data
                if k < len(blk.ff_weights) - 1:
                    fiber = np.maximum(fiber, 0.0)
            if not cfg.drop_residual:
                fiber = fiber + blk.w_res.data.astype(np.float64).T @ x[i, m]
            out[i, m] = fiber
    return out


def forward_embed_expanded_oracle(ep: Episode, cfg: ModelConfig,
                                  blocks: list[BlockParams]):
    """Reference embeddings computed fiber by fiber with literal sums,
    restricted to single-head configurations. Returns plain numpy arrays
    ``(z_labeled, z_unlabeled)``."""
    if cfg.heads != 1 or any(blk.mvsa.r != 1 for blk in blocks):
        raise InvalidConfigError("the expanded reference path requires single-head blocks")
    parities = cfg.block_parities()
    if len(blocks) != len(parities):
        raise InvalidConfigError(
            f"{len(blocks)} parameter blocks for {len(parities)} configured blocks"
        )

    nl, nu = ep.n_labeled, ep.n_unlabeled
    m, c = ep.n_attributes, ep.n_classes
    x = np.zeros((nl + nu, m + c, INPUT_SLICES))
    for i in range(nl):
        for j in range(m):
            x[i, j, 0] = ep.x_labeled[i, j]
        for j in range(c):
            x[i, m + j, 0] = ep.y_labeled[i, j]
    for i in range(nu):
        for j in range(m):
            x[nl + i, j, 0] = ep.x_unlabeled[i, j]
    if not cfg.drop_observed_indicator:
        x[:, :, 1] = 1.0
        x[nl:, m:, 1] = 0.0
    if not cfg.drop_attlab_indicators:
        x[:, :m, 2] = 1.0
        x[:, m:, 3] = 1.0

    for parity, blk in zip(parities, blocks):
        if parity == "attribute":
            x = _expanded_block(x.transpose(1, 0, 2), blk, cfg).transpose(1, 0, 2)
        else:
            x = _expanded_block(x, blk, cfg)
    emb = x[:, :m, :].reshape(nl + nu, -1)
    return emb[:nl], emb[nl:]
