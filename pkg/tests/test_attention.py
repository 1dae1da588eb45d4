import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewshot_ce import attention as at
from fewshot_ce import autodiff as ad
from fewshot_ce.config import ModelConfig
from fewshot_ce.gradcheck import max_relative_error
from fewshot_ce.models import init_params

N_INSTANCES = 100


def _cosine_loops(P, Q):
    m, c = P.shape
    w = Q.shape[0]
    R = np.zeros((m, w))
    for i in range(m):
        for j in range(w):
            dot = sum(P[i, k] * Q[j, k] for k in range(c))
            npi = math.sqrt(sum(P[i, k] ** 2 for k in range(c)))
            nqj = math.sqrt(sum(Q[j, k] ** 2 for k in range(c)))
            R[i, j] = dot / (npi * nqj)
    return R


def _fusion_loops(R, W1, W2, tau):
    m, k = R.shape
    g = [sum(R[i][j] for i in range(m)) / m for j in range(k)]
    hidden = [max(0.0, sum(W1[a][j] * g[j] for j in range(k))) for a in range(W1.shape[0])]
    kernel = [sum(W2[j][a] * hidden[a] for a in range(len(hidden))) for j in range(k)]
    logits = [sum(kernel[j] * R[i][j] for j in range(k)) / tau for i in range(m)]
    top = max(logits)
    e = [math.exp(v - top) for v in logits]
    s = sum(e)
    return np.array([v / s for v in e])


def _tiny_cfg():
    return ModelConfig(w=8, feature_channels=3, extractor_hidden=3, cam_reduction=2, cin_hidden=2,
                       tam_hidden=2, backbone_hidden_layers=1, backbone_channels=4, backbone_kernel=3)


# ---------------------------------------------------------------------------
# correlation
# ---------------------------------------------------------------------------

def test_correlation_matches_double_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        P, Q = rng.normal(size=(2, 4, 3)), rng.normal(size=(4, 3))
        R_p, R_q = at.correlation_maps(P, Q)
        np.testing.assert_allclose(R_p.data, _cosine_loops(P.reshape(8, 3), Q), atol=1e-12)
        np.testing.assert_array_equal(R_q.data, R_p.data.T)


def test_correlation_self_and_orthogonal():
    Q = np.random.default_rng(1).normal(size=(5, 4))
    R_p, _ = at.correlation_maps(Q[None], Q)
    np.testing.assert_allclose(np.diag(R_p.data), 1.0, atol=1e-12)
    P = np.array([[[1.0, 0.0]]])
    R_p, _ = at.correlation_maps(P, np.array([[0.0, 2.0]]))
    assert R_p.data[0, 0] == 0.0


def test_correlation_rejects_bad_inputs():
    with pytest.raises(ad.ShapeError):
        at.correlation_maps(np.zeros((1, 3, 0)), np.zeros((3, 0)))
    with pytest.raises(ValueError):
        at.correlation_maps(np.full((1, 3, 2), np.nan), np.ones((3, 2)))


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def test_fusion_matches_scalar_loop_transcription():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m, k, r = 6, 4, 2
        R = rng.uniform(-1, 1, size=(m, k))
        W1, W2 = rng.normal(size=(k // r, k)), rng.normal(size=(k, k // r))
        tau = rng.uniform(0.05, 2.0)
        A = at.fusion_attention(R, W1, W2, tau).data
        np.testing.assert_allclose(A, _fusion_loops(R, W1, W2, tau), atol=1e-10)


def test_block_shared_kernel_matches_tiled_oracle():
    """With ``block`` set, the kernel comes from the block-averaged mean row and is tiled."""
    rng = np.random.default_rng(3)
    w, n, tau = 4, 3, 0.3
    R = rng.uniform(-1, 1, size=(w, n * w))
    W1, W2 = rng.normal(size=(2, w)), rng.normal(size=(w, 2))
    g = R.mean(axis=0).reshape(n, w).mean(axis=0)
    kernel = np.tile(W2 @ np.maximum(W1 @ g, 0), n)
    logits = R @ kernel / tau
    expected = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
    np.testing.assert_allclose(at.fusion_attention(R, W1, W2, tau, block=w).data, expected, atol=1e-12)


def test_identical_rows_give_uniform_attention():
    rng = np.random.default_rng(4)
    R = np.tile(rng.uniform(-1, 1, size=(1, 4)), (5, 1))
    A = at.fusion_attention(R, rng.normal(size=(2, 4)), rng.normal(size=(4, 2)), 0.05).data
    np.testing.assert_allclose(A, 0.2, atol=1e-12)


def test_large_temperature_gives_uniform_attention():
    rng = np.random.default_rng(5)
    R = rng.uniform(-1, 1, size=(6, 4))
    A = at.fusion_attention(R, rng.normal(size=(2, 4)), rng.normal(size=(4, 2)), 1e6).data
    np.testing.assert_allclose(A, 1 / 6, atol=1e-4)


def test_fusion_rejects_non_positive_tau():
    with pytest.raises(ValueError):
        at.fusion_attention(np.ones((2, 2)), np.ones((1, 2)), np.ones((2, 1)), 0.0)


def test_per_block_variant_sums_to_one_per_block():
    rng = np.random.default_rng(6)
    n, w = 3, 4
    A = at.fusion_attention_per_block(rng.uniform(-1, 1, (n * w, w)), rng.normal(size=(2, w)),
                                      rng.normal(size=(w, 2)), 0.1, n).data
    np.testing.assert_allclose(A.reshape(n, w).sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# weighting and CAM
# ---------------------------------------------------------------------------

def test_zero_attention_is_identity():
    rng = np.random.default_rng(7)
    P, Q = rng.normal(size=(2, 4, 3)), rng.normal(size=(4, 3))
    out = at.apply_cross_attention(P, Q, np.zeros(8), np.zeros(4))
    np.testing.assert_array_equal(out.weighted_P.data, P)
    np.testing.assert_array_equal(out.weighted_Q_pairs.data, np.stack([Q, Q]))


def test_uniform_attention_scales_by_one_plus_inverse_m():
    rng = np.random.default_rng(8)
    P, Q = rng.normal(size=(2, 4, 3)), rng.normal(size=(4, 3))
    out = at.apply_cross_attention(P, Q, np.full(8, 1 / 8), np.full(4, 1 / 4))
    np.testing.assert_allclose(out.weighted_P.data, P * (1 + 1 / 8), atol=1e-15)
    np.testing.assert_allclose(out.weighted_Q_pairs.data, np.stack([Q, Q]) * 1.25, atol=1e-15)


def test_apply_rejects_length_mismatch():
    with pytest.raises(ad.ShapeError):
        at.apply_cross_attention(np.ones((2, 4, 3)), np.ones((4, 3)), np.ones(7), np.ones(4))


def test_attention_invariants_on_random_instances():
    cfg = _tiny_cfg()
    rng = np.random.default_rng(9)
    for _ in range(N_INSTANCES):
        params = init_params("fsl_full", cfg, rng)
        n = int(rng.integers(1, 5))
        S, Q = rng.normal(size=(n, cfg.w, 2)), rng.normal(size=(cfg.w, 2))
        F, out = at.cam_forward(S, Q, params, cfg.cam_tau, return_attention=True)
        assert abs(out.A_p.data.sum() - 1) < 1e-9 and abs(out.A_q.data.sum() - 1) < 1e-9
        assert np.all(out.A_p.data > 0) and np.all(out.A_q.data > 0)
        P = at.extract_features(S, params)
        R_p, _ = at.correlation_maps(P.data, at.extract_features(Q[None], params).data[0])
        assert np.all(np.abs(R_p.data) <= 1 + 1e-9)
        for i in range(cfg.backbone_hidden_layers + 1):
            a1 = at.tam_forward(S, params, i).data
            assert np.all((a1 > 0) & (a1 < 1))


def test_cam_output_shapes():
    cfg = ModelConfig()
    params = init_params("fsl_full", cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    F = at.cam_forward(rng.normal(size=(16, 72, 2)), rng.normal(size=(72, 2)), params)
    assert F.shape == (32, 72, 16)
    F1 = at.cam_forward(rng.normal(size=(1, 72, 2)), rng.normal(size=(72, 2)), params)
    assert F1.shape == (2, 72, 16)
    with pytest.raises(ValueError):
        at.cam_forward(np.zeros((0, 72, 2)), np.zeros((72, 2)), params)


def test_pairs_are_interleaved():
    cfg = _tiny_cfg()
    params = init_params("fsl_full", cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    S, Q = rng.normal(size=(3, 8, 2)), rng.normal(size=(8, 2))
    F, out = at.cam_forward(S, Q, params, return_attention=True)
    np.testing.assert_array_equal(F.data[0::2], out.weighted_P.data)
    np.testing.assert_array_equal(F.data[1::2], out.weighted_Q_pairs.data)


def test_support_permutation_permutes_pairs():
    cfg = _tiny_cfg()
    params = init_params("fsl_full", cfg, np.random.default_rng(0))
    rng = np.random.default_rng(2)
    S, Q = rng.normal(size=(4, 8, 2)), rng.normal(size=(8, 2))
    perm = np.array([2, 0, 3, 1])
    F = at.cam_forward(S, Q, params).data.reshape(4, 2, 8, -1)
    Fp = at.cam_forward(S[perm], Q, params).data.reshape(4, 2, 8, -1)
    np.testing.assert_allclose(Fp, F[perm], atol=1e-12)


def test_cam_gradient_matches_finite_differences():
    cfg = _tiny_cfg()
    rng = np.random.default_rng(3)
    params = init_params("fsl_full", cfg, rng)
    names = ["cam.ext0.w", "cam.ext1.w", "cam.p.W1", "cam.p.W2", "cam.q.W1", "cam.q.W2"]
    S, Q = rng.normal(size=(2, 8, 2)), rng.normal(size=(8, 2))
    probe = rng.normal(size=(4, 8, cfg.feature_channels))

    def fn(*ts):
        p = dict(params, **dict(zip(names, ts)))
        return ad.sum_all(ad.mul(at.cam_forward(S, Q, p, tau=0.5), probe))

    assert max_relative_error(fn, [params[k] for k in names]) < 1e-3


# ---------------------------------------------------------------------------
# task attention
# ---------------------------------------------------------------------------

def test_tam_zero_weights_give_one_half():
    cfg = _tiny_cfg()
    params = {k: np.zeros_like(v) for k, v in init_params("fsl_full", cfg, np.random.default_rng(0)).items()}
    a = at.tam_forward(np.random.default_rng(1).normal(size=(3, 8, 2)), params, 0).data
    np.testing.assert_array_equal(a, 0.5)
    assert a.shape == (cfg.backbone_channels,)


def test_tam_head_count_and_range_check():
    cfg = _tiny_cfg()
    params = init_params("fsl_full", cfg, np.random.default_rng(0))
    assert at.num_tam_heads(params) == cfg.backbone_hidden_layers + 1
    with pytest.raises(IndexError):
        at.tam_forward(np.zeros((2, 8, 2)), params, cfg.backbone_hidden_layers + 1)


def test_tam_printed_form_has_no_bias_and_flipped_sign():
    cfg = _tiny_cfg()
    params = init_params("fsl_full", cfg, np.random.default_rng(0))
    S = np.random.default_rng(1).normal(size=(2, 8, 2))
    f = at.tam_features(S, params).data
    W = params["tam.head0.w"]
    expected = 1 / (1 + np.exp(W @ f))
    np.testing.assert_allclose(at.tam_forward(S, params, 0, printed_form=True).data, expected, atol=1e-12)


def test_tam_gradient_matches_finite_differences():
    cfg = _tiny_cfg()
    rng = np.random.default_rng(4)
    params = init_params("fsl_full", cfg, rng)
    names = ["tam.conv0.w", "tam.conv1.w", "tam.head0.w", "tam.head0.b"]
    S = rng.normal(size=(3, 8, 2))
    probe = rng.normal(size=cfg.backbone_channels)

    def fn(*ts):
        p = dict(params, **dict(zip(names, ts)))
        return ad.sum_all(ad.mul(at.tam_forward(S, p, 0), probe))

    assert max_relative_error(fn, [params[k] for k in names]) < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_tam_is_query_independent(seed, n):
    """Gates recorded inside the full forward do not move when only the query changes."""
    from fewshot_ce import models
    cfg = _tiny_cfg()
    rng = np.random.default_rng(seed)
    params = init_params("fsl_full", cfg, rng)
    S = rng.normal(size=(1, n, 8, 2))
    seen = []
    original = models.tam_gates

    def recording(*args, **kwargs):
        gates = original(*args, **kwargs)
        seen.append([g.data.copy() for g in gates])
        return gates

    models.tam_gates = recording
    try:
        h1 = models.fsl_forward(params, cfg, S, rng.normal(size=(1, 8, 2))).h_est.data
        h2 = models.fsl_forward(params, cfg, S, rng.normal(size=(1, 8, 2))).h_est.data
    finally:
        models.tam_gates = original
    assert not np.allclose(h1, h2)
    for a, b in zip(*seen):
        np.testing.assert_array_equal(a, b)
