"""Executable verification suites: attention-layer equivariance trials, the
standard-attention reduction, full-model episode equivariances with their
non-equivariance witnesses, end-to-end gradient fidelity against finite
differences, the literal-loop embedding oracle, and the GP brute-force
oracle. The CLI ``selftest`` command runs everything and reports per
property; the acceptance test suite asserts the same numbers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import init_mvsa_params, init_vsa_params, mvsa_forward, vsa_forward
from .autodiff import Tape, Tensor, numeric_gradient
from .heads import (
    class_posterior,
    classification_loss,
    compute_prototypes,
    gp_predict,
    init_gp_head,
)
from .model import (
    Episode,
    ModelConfig,
    build_input_tensor,
    forward_embed,
    forward_embed_expanded_oracle,
    init_model_params,
    named_parameters,
    run_blocks,
)


@dataclass
class PropertyResult:
    name: str
    passed: bool
    value: float
    threshold: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (threshold {self.threshold:.0e})"


def _onehot(labels, n_classes):
    y = np.zeros((len(labels), n_classes))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def _random_episode(rng, n_labeled, n_unlabeled, m, c):
    labels = np.concatenate([np.arange(c), rng.integers(0, c, size=n_labeled - c)])
    return Episode(
        x_labeled=rng.standard_normal((n_labeled, m)),
        y_labeled=_onehot(labels, c),
        x_unlabeled=rng.standard_normal((n_unlabeled, m)),
        y_unlabeled=_onehot(rng.integers(0, c, size=n_unlabeled), c),
    )


# -- criterion 1: attention-layer equivariance --------------------------------


def attention_equivariance_discrepancy(layer: str, mode: int, trials: int,
                                       dtype, seed: int) -> float:
    """Max |permute-then-apply - apply-then-permute| over random trials with
    shapes d1, d2 in [1, 6] and d3 in [1, 4]."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d1, d2 = (int(v) for v in rng.integers(1, 7, size=2))
        d3 = int(rng.integers(1, 5))
        z = rng.standard_normal((d1, d2, d3)).astype(dtype)
        if layer == "vsa":
            params = init_vsa_params(d3, 3, 3, rng, dtype=dtype)
            apply = lambda t: vsa_forward(t, params)[0].data
        else:
            params = init_mvsa_params(d3, 3, 3, 2, 4, rng, dtype=dtype)
            apply = lambda t: mvsa_forward(t, params).data
        base = apply(Tensor(z))
        if mode == 1:
            sigma = rng.permutation(d1)
            permuted = apply(Tensor(z[sigma]))
            worst = max(worst, float(np.abs(permuted - base[sigma]).max()))
        else:
            sigma = rng.permutation(d2)
            permuted = apply(Tensor(z[:, sigma]))
            worst = max(worst, float(np.abs(permuted - base[:, sigma]).max()))
    return worst


# -- criterion 4: standard-attention reduction ----------------------------------


def standard_attention_discrepancy(cases: int, seed: int) -> float:
    """VSA on (d1, 1, d3) inputs against an independently written
    scaled-dot-product attention over the d1 x d3 matrix."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        d1 = int(rng.integers(1, 8))
        d3 = int(rng.integers(1, 5))
        params = init_vsa_params(d3, 4, 5, rng, dtype=np.float64)
        x = rng.standard_normal((d1, d3))
        out, _ = vsa_forward(Tensor(x[:, None, :]), params)

        q = x @ params.w_query.data.T
        k = x @ params.w_key.data.T
        v = x @ params.w_value.data.T
        scores = q @ k.T / np.sqrt(params.h_key)
        scores -= scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        worst = max(worst, float(np.abs(out.data[:, 0, :] - weights @ v).max()))
    return worst


# -- criterion 2: full-model equivariances and witnesses --------------------------


def episode_equivariance_discrepancy(episodes: int, seed: int) -> float:
    """Labeled/unlabeled/attribute/class permutation equivariances of the full
    embedding model (composed with the prototype head for the class case)."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(blocks=3, heads=2, h_key=4, h_value=4, h=6, h_out=2,
                      ff_depth=2, ff_width=5)
    blocks = init_model_params(cfg, rng, dtype=np.float32)
    worst = 0.0
    for _ in range(episodes):
        c = int(rng.integers(2, 4))
        nl = int(rng.integers(c, 5))
        nu = int(rng.integers(1, 5))
        m = int(rng.integers(1, 4))
        ep = _random_episode(rng, nl, nu, m, c)
        z_l, z_u = forward_embed(ep, cfg, blocks)

        pl = rng.permutation(nl)
        zlp, zup = forward_embed(
            Episode(ep.x_labeled[pl], ep.y_labeled[pl], ep.x_unlabeled, ep.y_unlabeled),
            cfg, blocks)
        worst = max(worst, float(np.abs(zlp.data - z_l.data[pl]).max()),
                    float(np.abs(zup.data - z_u.data).max()))

        pu = rng.permutation(nu)
        zlp, zup = forward_embed(
            Episode(ep.x_labeled, ep.y_labeled, ep.x_unlabeled[pu], ep.y_unlabeled[pu]),
            cfg, blocks)
        worst = max(worst, float(np.abs(zup.data - z_u.data[pu]).max()),
                    float(np.abs(zlp.data - z_l.data).max()))

        pa = rng.permutation(m)
        zlp, zup = forward_embed(
            Episode(ep.x_labeled[:, pa], ep.y_labeled, ep.x_unlabeled[:, pa], ep.y_unlabeled),
            cfg, blocks)
        for orig, perm in ((z_l, zlp), (z_u, zup)):
            seg = orig.data.reshape(orig.shape[0], m, cfg.h_out)
            seg_p = perm.data.reshape(perm.shape[0], m, cfg.h_out)
            worst = max(worst, float(np.abs(seg_p - seg[:, pa]).max()))

        pc = rng.permutation(c)
        zlp, zup = forward_embed(
            Episode(ep.x_labeled, ep.y_labeled[:, pc], ep.x_unlabeled, ep.y_unlabeled[:, pc]),
            cfg, blocks)
        worst = max(worst, float(np.abs(zlp.data - z_l.data).max()),
                    float(np.abs(zup.data - z_u.data).max()))
        post = class_posterior(z_u, compute_prototypes(z_l, ep.y_labeled)).data
        post_p = class_posterior(zup, compute_prototypes(zlp, ep.y_labeled[:, pc])).data
        worst = max(worst, float(np.abs(post_p - post[:, pc]).max()))
    return worst


def non_equivariance_witnesses(seed: int) -> tuple[float, float]:
    """Two constructed witnesses that must CHANGE the outputs: moving an
    example across the labeled/unlabeled boundary, and swapping an attribute
    value column with a class value column (indicators held fixed). Returns
    the two observed deviations (both should be clearly nonzero)."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(blocks=2, heads=2, h_key=4, h_value=4, h=6, h_out=2,
                      ff_depth=2, ff_width=5)
    blocks = init_model_params(cfg, rng, dtype=np.float32)

    x = rng.standard_normal((5, 2))
    y = _onehot([0, 1, 0, 1, 0], 2)
    stay = Episode(x[:4], y[:4], x[4:], y[4:])
    moved = Episode(x[:3], y[:3], x[3:], y[3:])
    z_l, _ = forward_embed(stay, cfg, blocks)
    _, z_u = forward_embed(moved, cfg, blocks)
    boundary = float(np.abs(z_l.data[3] - z_u.data[0]).max())

    ep = _random_episode(rng, 3, 3, 2, 2)
    z = build_input_tensor(ep, dtype=np.float32)
    out = run_blocks(z, cfg, blocks).data
    swapped = z.data.copy()
    swapped[:, [1, 2], 0] = swapped[:, [2, 1], 0]
    out_swapped = run_blocks(Tensor(swapped), cfg, blocks).data
    predicted = out.copy()
    predicted[:, [1, 2], :] = predicted[:, [2, 1], :]
    column = float(np.abs(out_swapped - predicted).max())
    return boundary, column


# -- criterion 3: end-to-end gradient fidelity --------------------------------------


def gradient_fidelity_error(seed: int, step: float = 1e-5) -> float:
    """Worst elementwise error of reverse-mode vs central finite differences
    through the full pipeline on a two-class episode (double precision),
    normalized by the spec tolerance (<= 1 passes): |a-f| <= 1e-7 + 1e-4 |f|."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(blocks=2, heads=2, h_key=4, h_value=4, h=4, h_out=2,
                      ff_depth=2, ff_width=4)
    blocks = init_model_params(cfg, rng, dtype=np.float64)
    ep = _random_episode(rng, 3, 3, 2, 2)
    params = named_parameters(blocks)

    def build():
        z_l, z_u = forward_embed(ep, cfg, blocks)
        post = class_posterior(z_u, compute_prototypes(z_l, ep.y_labeled))
        return classification_loss(post, ep.y_unlabeled)

    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in params}
    for _, p in params:
        p.grad = None

    worst = 0.0
    for name, p in params:
        numeric = numeric_gradient(lambda: float(build().data), [p.data], step=step)[0]
        err = np.abs(analytic[name] - numeric) / (1e-7 + 1e-4 * np.abs(numeric))
        worst = max(worst, float(err.max()))
    return worst


# -- criterion 5: expanded-formula oracle ----------------------------------------------


def expanded_oracle_discrepancy(episodes: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(episodes):
        cfg = ModelConfig(blocks=int(rng.integers(1, 4)), heads=1, h_key=3,
                          h_value=3, h=4, h_out=2, ff_depth=2, ff_width=4)
        blocks = init_model_params(cfg, rng, dtype=np.float32)
        ep = _random_episode(rng, 2, 2, 2, 2)
        z_l, z_u = forward_embed(ep, cfg, blocks)
        o_l, o_u = forward_embed_expanded_oracle(ep, cfg, blocks)
        worst = max(worst, float(np.abs(z_l.data - o_l).max()),
                    float(np.abs(z_u.data - o_u).max()))
    return worst


# -- criterion 6: GP against a dense brute-force posterior ---------------------------------


def gp_oracle_discrepancy(seed: int) -> tuple[float, float, float]:
    """Returns (posterior deviation vs explicit-inverse oracle over n_l <= 8,
    interpolation mean error, interpolation variance bound) at double
    precision."""
    rng = np.random.default_rng(seed)
    head = init_gp_head(lengthscale=0.9, noise_variance=0.01, dtype=np.float64)
    worst = 0.0
    for n_l in range(1, 9):
        z_l = rng.standard_normal((n_l, 3))
        z_u = rng.standard_normal((4, 3))
        y_l = rng.standard_normal((n_l, 2))
        mean, var = gp_predict(Tensor(z_u), Tensor(z_l), y_l, head)

        d2_ll = ((z_l[:, None, :] - z_l[None, :, :]) ** 2).sum(-1)
        d2_lu = ((z_l[:, None, :] - z_u[None, :, :]) ** 2).sum(-1)
        kmat = np.exp(-d2_ll / (2 * 0.9**2)) + (0.01 + head.jitter) * np.eye(n_l)
        k_lu = np.exp(-d2_lu / (2 * 0.9**2))
        kinv = np.linalg.inv(kmat)
        want_mean = k_lu.T @ kinv @ y_l
        want_var = 1.0 - np.einsum("ij,ij->j", k_lu, kinv @ k_lu)
        worst = max(worst, float(np.abs(mean.data - want_mean).max()),
                    float(np.abs(var.data - np.maximum(want_var, 0.0)).max()))

    sharp = init_gp_head(lengthscale=1.0, noise_variance=1e-12, dtype=np.float64)
    z = rng.standard_normal((5, 2))
    y = rng.standard_normal((5, 1))
    mean, var = gp_predict(Tensor(z), Tensor(z), y, sharp)
    interp_mean = float(np.abs(mean.data - y).max())
    interp_var = float(var.data.max())
    return worst, interp_mean, interp_var


# -- full run ---------------------------------------------------------------------------------


def run_all(trials: int = 100, double: bool = False, seed: int = 0) -> list:
    dtype = np.float64 if double else np.float32
    tol = 1e-10 if double else 1e-5
    results = []
    for layer in ("vsa", "mvsa"):
        for mode in (1, 2):
            value = attention_equivariance_discrepancy(layer, mode, trials, dtype,
                                                       seed + mode + (layer == "mvsa") * 10)
            results.append(PropertyResult(
                f"{layer}-mode{mode}-equivariance", value <= tol, value, tol))

    value = standard_attention_discrepancy(max(10, trials // 2), seed + 20)
    results.append(PropertyResult("standard-attention-reduction", value <= 1e-6, value, 1e-6))

    value = episode_equivariance_discrepancy(max(10, trials // 2), seed + 30)
    results.append(PropertyResult("episode-equivariances", value <= 1e-5, value, 1e-5))

    boundary, column = non_equivariance_witnesses(seed + 40)
    results.append(PropertyResult("witness-labeled-unlabeled", boundary > 1e-4,
                                  boundary, 1e-4))
    results.append(PropertyResult("witness-attribute-class", column > 1e-4,
                                  column, 1e-4))

    value = gradient_fidelity_error(seed + 50)
    results.append(PropertyResult("gradient-fidelity", value <= 1.0, value, 1.0))

    value = expanded_oracle_discrepancy(20, seed + 60)
    results.append(PropertyResult("expanded-formula-agreement", value <= 1e-5, value, 1e-5))

    gp_dev, interp_mean, interp_var = gp_oracle_discrepancy(seed + 70)
    results.append(PropertyResult("gp-brute-force-agreement", gp_dev <= 1e-8, gp_dev, 1e-8))
    results.append(PropertyResult("gp-interpolation-mean", interp_mean <= 1e-6,
                                  interp_mean, 1e-6))
    results.append(PropertyResult("gp-interpolation-variance", interp_var <= 1e-6,
                                  interp_var, 1e-6))
    return results
