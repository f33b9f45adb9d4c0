import numpy as np
import pytest

from salt import models as M
from salt import tensor as T
from salt.data import grid_positions
from salt.errors import ConfigError, ContractError

from conftest import grad_check, jitter, model_gradient_errors, small_config

# published encoder sizes and the shared predictor size
PAPER_COUNTS = {"vit-b": 86e6, "vit-l": 303e6, "vit-h": 632e6, "vit-g": 1.012e9, "vit-G": 1.843e9}


@pytest.mark.parametrize("name", sorted(PAPER_COUNTS))
def test_paper_parameter_counts(name):
    counts = M.parameter_breakdown(M.get_config(name))
    assert counts["encoder"] == pytest.approx(PAPER_COUNTS[name], rel=0.02)
    assert counts["predictor"] == pytest.approx(22e6, rel=0.02)


def test_closed_form_count_matches_instantiated_parameters():
    cfg = small_config()
    rng = np.random.default_rng(0)
    assert M.init_encoder(cfg, rng).num_parameters() == M.parameter_count(cfg, "encoder")
    assert M.init_predictor(cfg, rng).num_parameters() == M.parameter_count(cfg, "predictor")
    assert M.init_decoder(cfg, rng).num_parameters() == M.parameter_count(cfg, "decoder")


def test_registry_and_validation():
    with pytest.raises(ConfigError):
        M.get_config("vit-z")
    with pytest.raises(ConfigError):
        M.get_config("tiny-L", width=64).validate()  # head dim 16 is not a multiple of 6
    M.get_config("vit-l").validate(rope=False)
    cfg = M.get_config("tiny-H")
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_rope_scores_depend_only_on_relative_offset(f64):
    rng = np.random.default_rng(1)
    q, k = rng.standard_normal(12), rng.standard_normal(12)

    def score(pq, pk):
        cq, sq = M.rope_angles(np.array([pq]), 12, dtype=np.float64)
        ck, sk = M.rope_angles(np.array([pk]), 12, dtype=np.float64)
        rq = T.rotate_pairs(T.tensor(q[None]), cq, sq).data[0]
        rk = T.rotate_pairs(T.tensor(k[None]), ck, sk).data[0]
        return rq @ rk

    base = score((1, 2, 3), (4, 0, 5))
    for shift in [(2, 1, 0), (0, 5, 7), (3, 3, 3)]:
        s = np.array(shift)
        assert score(tuple(np.add((1, 2, 3), s)), tuple(np.add((4, 0, 5), s))) == pytest.approx(base, rel=1e-10)
    assert score((1, 2, 3), (4, 1, 5)) != pytest.approx(base)


def test_rope_is_an_isometry_and_identity_at_origin(f64):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 18))
    pos = np.array([[0, 0, 0], [1, 5, 2], [7, 3, 3]])
    cos, sin = M.rope_angles(pos, 18, dtype=np.float64)
    y = T.rotate_pairs(T.tensor(x), cos, sin).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), np.linalg.norm(x, axis=1))
    np.testing.assert_allclose(y[0], x[0])
    with pytest.raises(ConfigError):
        M.rope_angles(pos, 16)


def test_encoder_is_permutation_equivariant_with_positions(f64):
    # attention + RoPE: permuting tokens together with their positions permutes outputs
    cfg = small_config()
    rng = np.random.default_rng(3)
    enc = M.init_encoder(cfg, rng)
    jitter(enc, rng)
    tokens = rng.random((cfg.num_tokens, cfg.token_dim))
    pos = grid_positions(cfg.grid)
    perm = rng.permutation(cfg.num_tokens)
    with T.no_grad():
        out = M.encoder_forward(enc, cfg, M.tubelet_embed(enc, tokens), pos).data
        out_p = M.encoder_forward(enc, cfg, M.tubelet_embed(enc, tokens[perm]), pos[perm]).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_visible_encoding_ignores_padding_and_hidden_tokens(f64):
    cfg = small_config()
    rng = np.random.default_rng(4)
    enc = M.init_encoder(cfg, rng)
    jitter(enc, rng)
    tokens = rng.random((2, cfg.num_tokens, cfg.token_dim))
    masked = np.zeros((2, cfg.num_tokens), bool)
    masked[0, :20] = True
    masked[1, 5:10] = True
    vb = M.VisibleBatch.from_masks(masked, cfg.grid)
    with T.no_grad():
        out = M.encode_visible(enc, cfg, tokens, np.arange(2), vb).data
        tampered = tokens.copy()
        tampered[0, :20] = 99.0
        out2 = M.encode_visible(enc, cfg, tampered, np.arange(2), vb).data
        # clip 0 alone, no padding involved
        solo = M.VisibleBatch.from_masks(masked[:1], cfg.grid)
        ref = M.encode_visible(enc, cfg, tokens[:1], np.arange(1), solo).data
    assert vb.valid.sum(axis=1).tolist() == [12, 27]
    np.testing.assert_allclose(out2[0, :12], out[0, :12])
    np.testing.assert_allclose(out[0, :12], ref[0], atol=1e-12)


def test_predictor_and_decoder_output_shapes():
    cfg = small_config(teacher_width=36)
    rng = np.random.default_rng(5)
    enc, pred, dec = M.init_encoder(cfg, rng), M.init_predictor(cfg, rng), M.init_decoder(cfg, rng)
    masked = np.zeros((3, cfg.num_tokens), bool)
    masked[:, ::2] = True
    vb = M.VisibleBatch.from_masks(masked, cfg.grid)
    ctx = M.encode_visible(enc, cfg, rng.random((3, cfg.num_tokens, cfg.token_dim)), np.arange(3), vb)
    assert M.predictor_forward(pred, cfg, ctx, vb).shape == (3, cfg.num_tokens, 36)
    assert M.decoder_forward(dec, cfg, ctx, vb).shape == (3, cfg.num_tokens, cfg.token_dim)
    with pytest.raises(ContractError):
        M.VisibleBatch.from_masks(np.ones((1, 4), bool), (1, 2, 2))


@pytest.mark.parametrize("stage,pixel_loss", [("stage1", "mse"), ("stage1", "l1"), ("stage2", "mse")])
def test_full_model_gradients_match_finite_differences(stage, pixel_loss):
    assert max(model_gradient_errors(stage, seed=11, pixel_loss=pixel_loss)) < 1e-4


def test_probe_gradients_and_detached_backbone(f64):
    rng = np.random.default_rng(6)
    probe = M.init_probe(12, 2, 4, rng, blocks=1)
    jitter(probe, rng)
    latents = T.tensor(rng.standard_normal((3, 5, 12)), requires_grad=True)
    params = list(probe.values())
    assert grad_check(lambda *ps: T.cross_entropy(M.attentive_probe_forward(
        dict(zip(probe, ps)), latents, 2), [0, 3, 1]), params, samples=2) < 1e-5
    assert latents.grad is None


def test_frozen_paramset_rejects_training():
    ps = M.init_encoder(small_config(), np.random.default_rng(0)).freeze()
    assert all(not t.requires_grad for t in ps.values())
    with pytest.raises(ContractError):
        ps.trainable()
    with pytest.raises(ValueError):
        next(iter(ps.values())).data[...] = 0.0
