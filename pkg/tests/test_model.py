import numpy as np
import pytest

from hetmeta import autodiff as ad
from hetmeta.autodiff import Tape, Tensor, check_gradients
from hetmeta.errors import InvalidConfigError, InvalidEpisodeError
from hetmeta.heads import class_posterior, classification_loss, compute_prototypes
from hetmeta.model import (
    Episode,
    ModelConfig,
    build_input_tensor,
    forward_embed,
    forward_embed_expanded_oracle,
    init_model_params,
    named_parameters,
    run_blocks,
)

TINY = ModelConfig(blocks=3, heads=2, h_key=4, h_value=4, h=6, h_out=2,
                   ff_depth=2, ff_width=5)


def onehot(labels, n_classes):
    y = np.zeros((len(labels), n_classes))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def random_episode(rng, n_labeled=3, n_unlabeled=4, m=2, c=2):
    labels = np.concatenate([np.arange(c), rng.integers(0, c, size=n_labeled - c)]) \
        if n_labeled >= c else np.arange(n_labeled)
    return Episode(
        x_labeled=rng.standard_normal((n_labeled, m)),
        y_labeled=onehot(labels, c),
        x_unlabeled=rng.standard_normal((n_unlabeled, m)),
        y_unlabeled=onehot(rng.integers(0, c, size=n_unlabeled), c),
    )


def tiny_model(rng, cfg=TINY, dtype=np.float64):
    return init_model_params(cfg, rng, dtype=dtype)


# -- episode validation --------------------------------------------------------


def test_episode_rejects_bad_labels():
    with pytest.raises(InvalidEpisodeError, match="one-hot"):
        Episode([[0.1]], [[0.5, 0.5]], [[0.2]])
    with pytest.raises(InvalidEpisodeError, match="non-finite"):
        Episode([[np.nan]], [[1.0]], [[0.2]], kind="regression")
    with pytest.raises(InvalidEpisodeError, match="unlabeled"):
        Episode(np.zeros((0, 1)), np.zeros((0, 2)), [[0.2]])


# -- input tensor construction ---------------------------------------------------


def test_build_input_tensor_forced_layout():
    ep = Episode(x_labeled=[[0.5]], y_labeled=[[1.0, 0.0]],
                 x_unlabeled=[[0.7]], y_unlabeled=[[0.0, 1.0]])
    z = build_input_tensor(ep, dtype=np.float64).data
    assert z.shape == (2, 3, 4)
    np.testing.assert_array_equal(z[:, :, 0], [[0.5, 1, 0], [0.7, 0, 0]])
    np.testing.assert_array_equal(z[:, :, 1], [[1, 1, 1], [1, 0, 0]])
    np.testing.assert_array_equal(z[:, :, 2], [[1, 0, 0], [1, 0, 0]])
    np.testing.assert_array_equal(z[:, :, 3], [[0, 1, 1], [0, 1, 1]])


def test_indicators_independent_of_values():
    ep = Episode(x_labeled=[[0.0, 0.0]], y_labeled=[[1.0]],
                 x_unlabeled=[[0.0, 0.0]])
    z = build_input_tensor(ep, dtype=np.float64).data
    np.testing.assert_array_equal(z[:, :2, 2], np.ones((2, 2)))
    np.testing.assert_array_equal(z[0, :, 1], np.ones(3))


def test_row_swap_is_local_to_mode1_slices():
    rng = np.random.default_rng(0)
    ep = random_episode(rng, n_unlabeled=3)
    swapped = Episode(ep.x_labeled, ep.y_labeled,
                      ep.x_unlabeled[[1, 0, 2]], ep.y_unlabeled[[1, 0, 2]])
    a = build_input_tensor(ep, dtype=np.float64).data
    b = build_input_tensor(swapped, dtype=np.float64).data
    perm = [0, 1, 2, 4, 3, 5]
    np.testing.assert_array_equal(b, a[perm])


def test_ablation_switches_zero_indicator_slices():
    rng = np.random.default_rng(1)
    ep = random_episode(rng)
    no_obs = build_input_tensor(ep, drop_observed_indicator=True, dtype=np.float64).data
    assert np.all(no_obs[:, :, 1] == 0)
    no_al = build_input_tensor(ep, drop_attlab_indicators=True, dtype=np.float64).data
    assert np.all(no_al[:, :, 2] == 0) and np.all(no_al[:, :, 3] == 0)
    assert no_al.shape[2] == 4  # third mode size is fixed


# -- forward_embed -----------------------------------------------------------------


def test_embedding_shapes_follow_extraction_rule():
    rng = np.random.default_rng(2)
    blocks = tiny_model(rng)
    for m, c in [(1, 2), (3, 2), (2, 5)]:
        ep = random_episode(rng, n_labeled=max(2, c), n_unlabeled=3, m=m, c=c)
        z_l, z_u = forward_embed(ep, TINY, blocks)
        assert z_l.shape == (ep.n_labeled, m * TINY.h_out)
        assert z_u.shape == (ep.n_unlabeled, m * TINY.h_out)


def test_block_count_mismatch_is_rejected():
    rng = np.random.default_rng(3)
    blocks = tiny_model(rng)
    ep = random_episode(rng)
    with pytest.raises(InvalidConfigError):
        forward_embed(ep, TINY, blocks[:-1])


def permute_episode_labeled(ep, perm):
    return Episode(ep.x_labeled[perm], ep.y_labeled[perm],
                   ep.x_unlabeled, ep.y_unlabeled)


def test_labeled_permutation_equivariance():
    rng = np.random.default_rng(4)
    blocks = tiny_model(rng)
    ep = random_episode(rng, n_labeled=4, n_unlabeled=3, m=3, c=2)
    z_l, z_u = forward_embed(ep, TINY, blocks)
    perm = rng.permutation(4)
    z_l_p, z_u_p = forward_embed(permute_episode_labeled(ep, perm), TINY, blocks)
    np.testing.assert_allclose(z_l_p.data, z_l.data[perm], atol=1e-10)
    np.testing.assert_allclose(z_u_p.data, z_u.data, atol=1e-10)


def test_full_model_equivariance_suite():
    """(a) labeled and (b) unlabeled example permutations permute the matching
    embeddings; (c) attribute permutations permute embedding segments; (d)
    class permutations leave embeddings unchanged and permute posteriors."""
    rng = np.random.default_rng(5)
    cfg = ModelConfig(blocks=2, heads=2, h_key=3, h_value=3, h=4, h_out=2,
                      ff_depth=2, ff_width=4)
    blocks = init_model_params(cfg, rng, dtype=np.float32)
    worst = 0.0
    for _ in range(50):
        nl = int(rng.integers(2, 5))
        nu = int(rng.integers(1, 5))
        m = int(rng.integers(1, 4))
        c = int(rng.integers(2, 4))
        if nl < c:
            nl = c
        ep = random_episode(rng, n_labeled=nl, n_unlabeled=nu, m=m, c=c)
        z_l, z_u = forward_embed(ep, cfg, blocks)

        pl = rng.permutation(nl)
        zlp, zup = forward_embed(permute_episode_labeled(ep, pl), cfg, blocks)
        worst = max(worst, np.abs(zlp.data - z_l.data[pl]).max(),
                    np.abs(zup.data - z_u.data).max())

        pu = rng.permutation(nu)
        ep_u = Episode(ep.x_labeled, ep.y_labeled, ep.x_unlabeled[pu], ep.y_unlabeled[pu])
        zlp, zup = forward_embed(ep_u, cfg, blocks)
        worst = max(worst, np.abs(zup.data - z_u.data[pu]).max(),
                    np.abs(zlp.data - z_l.data).max())

        pa = rng.permutation(m)
        ep_a = Episode(ep.x_labeled[:, pa], ep.y_labeled, ep.x_unlabeled[:, pa], ep.y_unlabeled)
        zlp, zup = forward_embed(ep_a, cfg, blocks)
        seg = lambda z: z.reshape(z.shape[0], m, cfg.h_out)
        worst = max(worst, np.abs(seg(zlp.data) - seg(z_l.data)[:, pa]).max(),
                    np.abs(seg(zup.data) - seg(z_u.data)[:, pa]).max())

        pc = rng.permutation(c)
        ep_c = Episode(ep.x_labeled, ep.y_labeled[:, pc], ep.x_unlabeled, ep.y_unlabeled[:, pc])
        zlp, zup = forward_embed(ep_c, cfg, blocks)
        worst = max(worst, np.abs(zlp.data - z_l.data).max(),
                    np.abs(zup.data - z_u.data).max())
        post = class_posterior(z_u, compute_prototypes(z_l, ep.y_labeled)).data
        post_c = class_posterior(zup, compute_prototypes(zlp, ep_c.y_labeled)).data
        worst = max(worst, np.abs(post_c - post[:, pc]).max())
    assert worst <= 1e-5, f"episode-level equivariance violated: {worst}"


def test_non_equivariance_witnesses():
    """Moving an example across the labeled/unlabeled boundary changes its
    embedding; swapping an attribute column with a class column in the value
    slice is not an output permutation."""
    rng = np.random.default_rng(6)
    cfg = ModelConfig(blocks=2, heads=2, h_key=3, h_value=3, h=4, h_out=2,
                      ff_depth=2, ff_width=4)
    blocks = init_model_params(cfg, rng, dtype=np.float32)

    x = rng.standard_normal((4, 2))
    y = onehot([0, 1, 0, 1], 2)
    as_labeled = Episode(x[:3], y[:3], x[3:], y[3:])
    moved = Episode(x[:2], y[:2], x[2:], y[2:])  # example 2: labeled -> unlabeled
    z_l, _ = forward_embed(as_labeled, cfg, blocks)
    _, z_u = forward_embed(moved, cfg, blocks)
    delta = np.abs(z_l.data[2] - z_u.data[0]).max()
    assert delta > 1e-4, "labeled/unlabeled move left the embedding unchanged"

    ep = random_episode(rng, n_labeled=3, n_unlabeled=3, m=2, c=2)
    z = build_input_tensor(ep, dtype=np.float32)
    out = run_blocks(z, cfg, blocks).data
    swapped = z.data.copy()
    swapped[:, [1, 2], 0] = swapped[:, [2, 1], 0]  # swap values only, not indicators
    out_swapped = run_blocks(Tensor(swapped), cfg, blocks).data
    predicted = out.copy()
    predicted[:, [1, 2], :] = predicted[:, [2, 1], :]
    assert np.abs(out_swapped - predicted).max() > 1e-4
    assert np.abs(out_swapped - out).max() > 1e-4


# -- expanded reference path ---------------------------------------------------------


def single_head_cfg(blocks=2):
    return ModelConfig(blocks=blocks, heads=1, h_key=3, h_value=3, h=4, h_out=2,
                       ff_depth=2, ff_width=4)


def test_expanded_oracle_agrees_with_forward():
    rng = np.random.default_rng(7)
    for trial in range(20):
        cfg = single_head_cfg(blocks=int(rng.integers(1, 4)))
        blocks = init_model_params(cfg, rng, dtype=np.float32)
        ep = random_episode(rng, n_labeled=2, n_unlabeled=2, m=2, c=2)
        z_l, z_u = forward_embed(ep, cfg, blocks)
        o_l, o_u = forward_embed_expanded_oracle(ep, cfg, blocks)
        np.testing.assert_allclose(z_l.data, o_l, atol=1e-5)
        np.testing.assert_allclose(z_u.data, o_u, atol=1e-5)


def test_expanded_oracle_rejects_multi_head():
    rng = np.random.default_rng(8)
    blocks = tiny_model(rng)
    ep = random_episode(rng)
    with pytest.raises(InvalidConfigError):
        forward_embed_expanded_oracle(ep, TINY, blocks)


def test_expanded_oracle_degenerate_weights_reduce_to_residual_chain():
    rng = np.random.default_rng(9)
    cfg = single_head_cfg(blocks=1)
    blocks = init_model_params(cfg, rng, dtype=np.float64)
    blk = blocks[0]
    blk.mvsa.heads[0].w_value.data = np.zeros_like(blk.mvsa.heads[0].w_value.data)
    for w in blk.ff_weights:
        w.data = np.zeros_like(w.data)
    for b in blk.ff_biases:
        b.data = np.zeros_like(b.data)
    ep = random_episode(rng, n_labeled=2, n_unlabeled=2, m=2, c=2)
    o_l, o_u = forward_embed_expanded_oracle(ep, cfg, blocks)
    z = build_input_tensor(ep, dtype=np.float64).data
    want = np.einsum("nmk,ko->nmo", z, blk.w_res.data)[:, :2, :].reshape(4, -1)
    np.testing.assert_allclose(np.vstack([o_l, o_u]), want, atol=1e-10)


def test_expanded_oracle_is_equivariant_too():
    rng = np.random.default_rng(10)
    cfg = single_head_cfg()
    blocks = init_model_params(cfg, rng, dtype=np.float64)
    ep = random_episode(rng, n_labeled=3, n_unlabeled=2, m=2, c=2)
    o_l, _ = forward_embed_expanded_oracle(ep, cfg, blocks)
    perm = [2, 0, 1]
    o_l_p, _ = forward_embed_expanded_oracle(permute_episode_labeled(ep, perm), cfg, blocks)
    np.testing.assert_allclose(o_l_p, o_l[perm], atol=1e-10)


# -- ablation switches -----------------------------------------------------------


def test_attention_axis_ablations_skip_blocks():
    base = ModelConfig(blocks=3)
    assert base.block_parities() == ["example", "attribute", "example"]
    ex_only = ModelConfig(blocks=3, example_attn_only=True)
    assert ex_only.block_parities() == ["example", "example"]
    at_only = ModelConfig(blocks=3, attribute_attn_only=True)
    assert at_only.block_parities() == ["attribute"]
    with pytest.raises(InvalidConfigError):
        ModelConfig(blocks=1, attribute_attn_only=True)
    with pytest.raises(InvalidConfigError):
        ModelConfig(example_attn_only=True, attribute_attn_only=True)


def test_residual_and_layernorm_ablations_change_parameters_and_path():
    rng = np.random.default_rng(11)
    cfg = ModelConfig(blocks=2, heads=1, h_key=3, h_value=3, h=4, h_out=2,
                      ff_depth=2, ff_width=4, drop_residual=True, drop_layernorm=True)
    blocks = init_model_params(cfg, rng, dtype=np.float64)
    names = [n for n, _ in named_parameters(blocks)]
    assert not any("w_res" in n for n in names)
    assert not any("ln." in n for n in names)
    ep = random_episode(rng)
    z_l, z_u = forward_embed(ep, cfg, blocks)
    o_l, o_u = forward_embed_expanded_oracle(ep, cfg, blocks)
    np.testing.assert_allclose(z_l.data, o_l, atol=1e-8)
    np.testing.assert_allclose(z_u.data, o_u, atol=1e-8)


# -- end-to-end gradients ----------------------------------------------------------


def test_end_to_end_gradients_match_finite_differences():
    rng = np.random.default_rng(12)
    cfg = ModelConfig(blocks=2, heads=2, h_key=4, h_value=4, h=4, h_out=2,
                      ff_depth=2, ff_width=4)
    blocks = init_model_params(cfg, rng, dtype=np.float64)
    ep = random_episode(rng, n_labeled=2, n_unlabeled=3, m=2, c=2)
    params = named_parameters(blocks)

    def build():
        z_l, z_u = forward_embed(ep, cfg, blocks)
        post = class_posterior(z_u, compute_prototypes(z_l, ep.y_labeled))
        return classification_loss(post, ep.y_unlabeled)

    worst = check_gradients(build, [p for _, p in params], rtol=1e-4, atol=1e-7)
    assert worst <= 1.0
