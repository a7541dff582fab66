import numpy as np
import pytest
from scipy import integrate

from navkit import codec as C
from navkit import tensor as T
from navkit import world as W
from navkit import checkpoint as ckpt
from navkit.policy import (BetaPolicy, PolicyConfig, pack_observations,
                           beta_entropy, beta_entropy_np, beta_log_prob, beta_log_prob_np,
                           beta_mean)


def tiny_config(dim=2):
    return PolicyConfig(dim=dim, embed=16, heads=2, layers=1, ff=32,
                        token_hidden=32, head_hidden=(32, 32), cnn_channels=(2, 4, 4))


def zero_packed(e=3, dim=2, cfg=None):
    cfg = cfg or PolicyConfig(dim=dim)
    return {
        "static": np.zeros((e, 36, 4)),
        "dyn": np.zeros((e, cfg.n_slots, cfg.history, C.DYN_FEATURES)),
        "dyn_mask": np.zeros((e, cfg.n_slots, cfg.history)),
        "internal": np.zeros((e, cfg.history, 2 * dim + 1)),
    }


def random_packed(rng, e=4, dim=2, cfg=None):
    cfg = cfg or PolicyConfig(dim=dim)
    return {
        "static": rng.uniform(0, 1, size=(e, 36, 4)),
        "dyn": rng.normal(0, 1, size=(e, cfg.n_slots, cfg.history, C.DYN_FEATURES)),
        "dyn_mask": (rng.random((e, cfg.n_slots, cfg.history)) < 0.7).astype(float),
        "internal": rng.normal(0, 1, size=(e, cfg.history, 2 * dim + 1)),
    }


def test_zero_observation_gives_valid_outputs():
    pol = BetaPolicy(PolicyConfig(dim=2), seed=3)
    alpha, beta, value = pol.forward(zero_packed())
    assert np.all(np.isfinite(alpha.data)) and np.all(alpha.data >= 1.0)
    assert np.all(np.isfinite(beta.data)) and np.all(beta.data >= 1.0)
    assert np.all(np.isfinite(value.data))


def test_eval_mode_is_deterministic():
    pol = BetaPolicy(PolicyConfig(dim=2), seed=1)
    packed = random_packed(np.random.default_rng(0))
    a1, b1, v1 = pol.forward(packed, train=False)
    a2, b2, v2 = pol.forward(packed, train=False)
    assert np.array_equal(a1.data, a2.data)
    assert np.array_equal(b1.data, b2.data)
    assert np.array_equal(v1.data, v2.data)


def test_train_mode_dropout_changes_outputs():
    pol = BetaPolicy(PolicyConfig(dim=2), seed=1)
    packed = random_packed(np.random.default_rng(0))
    rng = np.random.default_rng(5)
    a1, _, _ = pol.forward(packed, train=True, rng=rng)
    a2, _, _ = pol.forward(packed, train=True, rng=rng)
    assert not np.array_equal(a1.data, a2.data)


@pytest.mark.parametrize("dim", [2, 3])
def test_parameter_count_within_band(dim):
    pol = BetaPolicy(PolicyConfig(dim=dim), seed=0)
    assert 250_000 <= pol.parameter_count() <= 370_000


def test_token_sequence_length_is_twelve():
    pol = BetaPolicy(PolicyConfig(dim=2), seed=0)
    seq = pol.tokens(zero_packed())
    assert seq.shape[1] == 12


def test_positional_encodings_are_live():
    pol = BetaPolicy(PolicyConfig(dim=2), seed=2)
    rng = np.random.default_rng(1)
    packed = random_packed(rng, e=1)
    swapped = {k: v.copy() for k, v in packed.items()}
    # swap the contents of two dynamic-history timestamps, keep positions fixed
    swapped["dyn"][:, :, [1, 2]] = swapped["dyn"][:, :, [2, 1]]
    swapped["internal"][:, [1, 2]] = swapped["internal"][:, [2, 1]]
    a1, _, v1 = pol.forward(packed)
    a2, _, v2 = pol.forward(swapped)
    assert not np.allclose(a1.data, a2.data)


def test_mean_action_maps_into_velocity_box():
    pol = BetaPolicy(PolicyConfig(dim=2, v_max=2.0), seed=4)
    packed = random_packed(np.random.default_rng(2), e=16)
    alpha, beta, _ = pol.forward(packed)
    vel = pol.executable_velocity(beta_mean(alpha.data, beta.data))
    assert np.all(vel >= -2.0) and np.all(vel <= 2.0)


def test_sampled_actions_in_unit_interval():
    pol = BetaPolicy(tiny_config(), seed=4)
    packed = random_packed(np.random.default_rng(3), e=8, cfg=tiny_config())
    v_hat, logp, value = pol.act(packed, np.random.default_rng(0))
    assert np.all((v_hat > 0) & (v_hat < 1))
    assert np.all(np.isfinite(logp))


def test_shape_mismatch_raises_typed_error():
    pol = BetaPolicy(PolicyConfig(dim=2), seed=0)
    bad = zero_packed()
    bad["static"] = np.zeros((3, 18, 4))
    with pytest.raises(T.ShapeError):
        pol.forward(bad)


class TestBetaDistribution:
    def test_uniform_case_exact(self):
        a = np.ones((1, 1))
        for x in (0.1, 0.5, 0.9):
            assert beta_log_prob_np(a, a, np.full((1, 1), x))[0] == 0.0
        assert beta_entropy_np(a, a)[0] == 0.0

    def test_symmetric_two_two(self):
        a = np.full((1, 1), 2.0)
        pdf = np.exp(beta_log_prob_np(a, a, np.full((1, 1), 0.5))[0])
        assert abs(pdf - 1.5) < 1e-12  # Gamma(4)/Gamma(2)^2 * 0.25 = 6/4
        assert abs(beta_entropy_np(a, a)[0] - (-0.125)) < 1e-3

    def test_pdf_integrates_to_one(self):
        rng = np.random.default_rng(10)
        for _ in range(25):
            a, b = rng.uniform(1, 5, size=2)
            total, _ = integrate.quad(
                lambda x: np.exp(beta_log_prob_np(np.array([[a]]), np.array([[b]]),
                                                  np.array([[x]]))[0]), 0.0, 1.0)
            assert abs(total - 1.0) < 1e-6

    def test_entropy_matches_quadrature(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a, b = rng.uniform(1, 5, size=2)

            def neg_plogp(x):
                lp = beta_log_prob_np(np.array([[a]]), np.array([[b]]), np.array([[x]]))[0]
                return -np.exp(lp) * lp

            h, _ = integrate.quad(neg_plogp, 0.0, 1.0, epsabs=1e-12, epsrel=1e-12)
            assert abs(h - beta_entropy_np(np.array([[a]]), np.array([[b]]))[0]) < 1e-8

    def test_entropy_monotone_in_concentration(self):
        values = [beta_entropy_np(np.array([[c]]), np.array([[c]]))[0]
                  for c in np.linspace(1, 50, 25)]
        assert all(h2 < h1 for h1, h2 in zip(values, values[1:]))

    def test_log_prob_clamps_out_of_range_actions(self):
        a = np.full((1, 1), 2.0)
        hi = beta_log_prob_np(a, a, np.array([[1.5]]))
        edge = beta_log_prob_np(a, a, np.array([[1.0 - 1e-6]]))
        assert hi[0] == edge[0]

    def test_tensor_and_numpy_paths_agree(self):
        rng = np.random.default_rng(12)
        a = rng.uniform(1, 5, size=(6, 2))
        b = rng.uniform(1, 5, size=(6, 2))
        x = rng.uniform(0.05, 0.95, size=(6, 2))
        lp_t = beta_log_prob(T.Tensor(a), T.Tensor(b), x)
        h_t = beta_entropy(T.Tensor(a), T.Tensor(b))
        assert np.allclose(lp_t.data, beta_log_prob_np(a, b, x), atol=1e-14)
        assert np.allclose(h_t.data, beta_entropy_np(a, b), atol=1e-14)


def test_checkpoint_roundtrip_reproduces_outputs(tmp_path):
    cfg = tiny_config()
    pol = BetaPolicy(cfg, seed=7)
    packed = random_packed(np.random.default_rng(4), cfg=cfg)
    path = tmp_path / "pol.nvkt"
    ckpt.save_checkpoint(path, pol.named_parameters(), meta={"note": "test"})
    params, adam, meta = ckpt.load_checkpoint(path)
    assert adam is None and meta["note"] == "test"

    fresh = BetaPolicy(cfg, seed=99)
    ckpt.restore_into(fresh.named_parameters(), params)
    # float32 payloads: restored weights equal the rounded originals exactly
    a0, _, v0 = pol.forward(packed)
    a1, _, v1 = fresh.forward(packed)
    assert np.allclose(a0.data, a1.data, rtol=1e-5, atol=1e-6)
    ckpt.save_checkpoint(tmp_path / "again.nvkt", fresh.named_parameters())
    params2, _, _ = ckpt.load_checkpoint(tmp_path / "again.nvkt")
    for name in params:
        assert np.array_equal(params[name], params2[name])


def test_checkpoint_bad_magic_raises(tmp_path):
    path = tmp_path / "junk.nvkt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_checkpoint(path)
