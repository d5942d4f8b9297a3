import math

import numpy as np
import pytest
import torch

from molsteer.autoencoder import zero_prior
from molsteer.diffusion import (
    PRECISION_FLOOR,
    RATIO_FLOOR,
    TERMINAL_ALPHA_BAR,
    ConditionalDenoiser,
    DiffusionError,
    NoiseSchedule,
    SampleNoise,
    build_condition,
    denoise_step,
    diffusion_loss,
    draw_sample_noise,
    final_decode,
    make_schedule,
    onehot_level_probability,
    q_sample,
    raw_schedule_ramp,
    sample,
)
from molsteer.egnn import EgnnConfig, project_zero_cog
from molsteer.geometry import DEFAULT_ALPHABET, FeatureScaler, random_rotation


def _denoiser(seed: int = 0, layers: int = 2, dtype=torch.float64) -> ConditionalDenoiser:
    torch.manual_seed(seed)
    config = EgnnConfig(num_layers=layers, hidden_dim=16)
    return ConditionalDenoiser(config, feature_dim=6, prior_feat_dim=1).to(dtype)


def _random_prior(rng, n=3, k=1, dtype=torch.float64):
    coords = project_zero_cog(torch.as_tensor(rng.standard_normal((n, 3)), dtype=dtype))
    feats = torch.as_tensor(rng.standard_normal((n, k)), dtype=dtype)
    from molsteer.autoencoder import LatentPrior

    return LatentPrior(coords=coords, feats=feats)


class TestSchedule:
    def test_polynomial_midpoint_value(self):
        schedule = make_schedule(1000, "polynomial")
        # Raw ramp value (1 - (500/1000)^2)^2 = 0.5625; the stored value only
        # carries the precision-floor squeeze (1 - 2e-4) * raw + 1e-4.
        assert float(raw_schedule_ramp(1000, "polynomial")[500]) == 0.5625
        squeezed = (1.0 - 2.0 * PRECISION_FLOOR) * 0.5625 + PRECISION_FLOOR
        assert float(schedule.alpha_bar[500]) == pytest.approx(squeezed, abs=1e-15)
        assert float(schedule.alpha_bar[500]) == pytest.approx(0.5625, abs=2e-4)

    def test_two_step_polynomial_exact(self):
        schedule = make_schedule(2, "polynomial")
        squeeze = 1.0 - 2.0 * PRECISION_FLOOR
        np.testing.assert_allclose(
            schedule.alpha_bar,
            [
                squeeze + PRECISION_FLOOR,
                squeeze * 0.5625 + PRECISION_FLOOR,
                TERMINAL_ALPHA_BAR,
            ],
            atol=1e-15,
        )

    @pytest.mark.parametrize("kind", ["polynomial", "cosine"])
    @pytest.mark.parametrize("steps", [2, 5, 10, 50, 100, 1000])
    def test_monotone_and_endpoints(self, kind, steps):
        schedule = make_schedule(steps, kind)
        bar = schedule.alpha_bar
        assert bar.shape == (steps + 1,)
        assert bar[0] >= 0.999
        assert bar[-1] <= TERMINAL_ALPHA_BAR
        assert np.all(np.diff(bar) < 0.0)
        assert np.all(bar > 0.0) and np.all(bar <= 1.0)

    def test_ratio_floor_respected(self):
        schedule = make_schedule(50, "polynomial")
        ratios = schedule.alpha_bar[1:] / schedule.alpha_bar[:-1]
        # The terminal cap may push the last ratio below the floor.
        assert np.all(ratios[:-1] >= RATIO_FLOOR - 1e-12)

    def test_identities(self):
        schedule = make_schedule(100, "cosine")
        for t in (1, 37, 100):
            ab = float(schedule.alpha_bar[t])
            prev = float(schedule.alpha_bar[t - 1])
            assert schedule.beta(t) == pytest.approx(1.0 - ab / prev, abs=1e-14)
            assert schedule.sigma(t) == pytest.approx(math.sqrt(1.0 - ab), abs=1e-14)
            assert schedule.signal(t) == pytest.approx(math.sqrt(ab), abs=1e-14)
            assert schedule.step_signal(t) == pytest.approx(math.sqrt(ab / prev), abs=1e-14)
        for t in (1, 50):
            rho = schedule.posterior_noise_scale(t)
            beta = schedule.beta(t)
            expected = math.sqrt(
                beta
                * (1.0 - float(schedule.alpha_bar[t - 1]))
                / (1.0 - float(schedule.alpha_bar[t]))
            )
            assert rho == pytest.approx(expected, abs=1e-14)
        # The precision floor keeps alpha_bar[0] just below 1, so the final
        # reverse step injects a small but nonzero posterior noise.
        assert 0.0 < schedule.posterior_noise_scale(1) < 0.05

    def test_validation_rejects_bad_schedules(self):
        with pytest.raises(DiffusionError):
            make_schedule(1, "polynomial")
        with pytest.raises(DiffusionError):
            make_schedule(10, "linear")
        increasing = NoiseSchedule(
            kind="polynomial", steps=2, alpha_bar=np.array([1.0, 0.5, 0.6])
        )
        with pytest.raises(DiffusionError):
            increasing.validate()
        weak_start = NoiseSchedule(
            kind="polynomial", steps=2, alpha_bar=np.array([0.9, 0.5, 1e-5])
        )
        with pytest.raises(DiffusionError):
            weak_start.validate()

    def test_step_range_checked(self):
        schedule = make_schedule(10, "polynomial")
        with pytest.raises(DiffusionError):
            schedule.beta(0)
        with pytest.raises(DiffusionError):
            schedule.sigma(11)


class TestQSample:
    def test_projection_invariance(self, rng):
        schedule = make_schedule(100, "polynomial")
        coords = torch.as_tensor(rng.standard_normal((5, 3)))
        feats = torch.as_tensor(rng.standard_normal((5, 6)))
        eps_c = torch.as_tensor(rng.standard_normal((5, 3)))
        eps_f = torch.as_tensor(rng.standard_normal((5, 6)))
        shifted = coords + torch.tensor([3.0, -1.0, 2.0])
        out_a = q_sample(coords, feats, 40, schedule, eps_c, eps_f)
        out_b = q_sample(shifted, feats, 40, schedule, eps_c, eps_f)
        assert (out_a[0] - out_b[0]).abs().max() < 1e-12
        assert out_a[0].mean(dim=0).abs().max() < 1e-12

    def test_small_t_stays_near_clean(self, rng):
        schedule = make_schedule(100, "polynomial")
        coords = torch.as_tensor(rng.standard_normal((4, 3)))
        feats = torch.as_tensor(rng.standard_normal((4, 6)))
        eps_c = torch.as_tensor(rng.standard_normal((4, 3)))
        eps_f = torch.as_tensor(rng.standard_normal((4, 6)))
        out_coords, out_feats = q_sample(coords, feats, 1, schedule, eps_c, eps_f)
        # alpha_bar[1] ~ 1, so the state moves by at most a few sigma(1).
        slack = 4.0 * schedule.sigma(1) + 1e-4
        assert (out_coords - project_zero_cog(coords)).abs().max() < slack
        assert (out_feats - feats).abs().max() < slack
        with pytest.raises(DiffusionError):
            q_sample(coords, feats, 0, schedule, eps_c, eps_f)

    def test_shape_mismatch_rejected(self, rng):
        schedule = make_schedule(10, "polynomial")
        with pytest.raises(DiffusionError):
            q_sample(
                torch.zeros(3, 3),
                torch.zeros(3, 6),
                5,
                schedule,
                torch.zeros(4, 3),
                torch.zeros(3, 6),
            )

    def test_moments_at_midpoint(self, rng):
        # Empirical mean/variance of one feature entry over many draws.
        schedule = make_schedule(100, "polynomial")
        t = 50
        draws = 40_000
        g = torch.Generator().manual_seed(9)
        clean_f = torch.full((draws, 1), 0.8, dtype=torch.float64)
        clean_c = torch.zeros(draws, 3, dtype=torch.float64)
        eps_f = torch.randn(draws, 1, dtype=torch.float64, generator=g)
        eps_c = torch.zeros(draws, 3, dtype=torch.float64)
        # Treat the batch as independent single-atom feature draws; the
        # coordinate block is a dummy (single atom projects to zero anyway).
        _, noisy = q_sample(clean_c, clean_f, t, schedule, eps_c, eps_f)
        expected_mean = schedule.signal(t) * 0.8
        expected_var = schedule.sigma(t) ** 2
        se_mean = math.sqrt(expected_var / draws)
        assert abs(float(noisy.mean()) - expected_mean) < 4 * se_mean
        se_var = expected_var * math.sqrt(2.0 / (draws - 1))
        assert abs(float(noisy.var(unbiased=True)) - expected_var) < 4 * se_var


class TestDenoiser:
    def test_conditioning_width_contract(self, rng):
        denoiser = _denoiser()
        schedule = make_schedule(50, "polynomial")
        prior = _random_prior(rng, n=3)
        coords = project_zero_cog(torch.as_tensor(rng.standard_normal((5, 3))))
        feats = torch.as_tensor(rng.standard_normal((5, 6)))
        condition = build_condition(coords, feats, 25, prior, schedule)
        assert condition.concatenated_features().shape == (5, 6 + 3 + 1 + 1)
        eps_c, eps_f = denoiser.predict(condition)
        assert eps_c.shape == (5, 3)
        assert eps_f.shape == (5, 6)
        assert eps_c.mean(dim=0).abs().max() < 1e-12

    def test_prior_larger_than_state_rejected(self, rng):
        schedule = make_schedule(50, "polynomial")
        prior = _random_prior(rng, n=6)
        with pytest.raises(DiffusionError):
            build_condition(
                torch.zeros(4, 3, dtype=torch.float64),
                torch.zeros(4, 6, dtype=torch.float64),
                10,
                prior,
                schedule,
            )

    def test_rotation_equivariance_including_prior(self, rng):
        denoiser = _denoiser(seed=3)
        schedule = make_schedule(50, "polynomial")
        prior = _random_prior(rng, n=3)
        coords = project_zero_cog(torch.as_tensor(rng.standard_normal((5, 3))))
        feats = torch.as_tensor(rng.standard_normal((5, 6)))
        base_c, base_f = denoiser.predict(build_condition(coords, feats, 20, prior, schedule))
        from molsteer.autoencoder import LatentPrior

        for _ in range(10):
            r = torch.as_tensor(random_rotation(rng))
            moved_prior = LatentPrior(coords=prior.coords @ r.T, feats=prior.feats)
            out_c, out_f = denoiser.predict(
                build_condition(coords @ r.T, feats, 20, moved_prior, schedule)
            )
            assert (out_c - base_c @ r.T).abs().max() < 1e-10
            assert (out_f - base_f).abs().max() < 1e-10


class _StubDenoiser:
    """Predicts a constant offset from the true noise it is told.

    Honors the denoiser output contract: coordinate predictions live in the
    zero-CoG subspace, so a constant coordinate offset projects away.
    """

    def __init__(self, eps_coords, eps_feats, offset=0.0):
        self.feature_dim = eps_feats.shape[1]
        self._coords = eps_coords
        self._feats = eps_feats
        self._offset = offset

    def predict(self, condition):
        return project_zero_cog(self._coords + self._offset), self._feats + self._offset


class TestDiffusionLoss:
    def test_zero_for_perfect_prediction(self, rng):
        schedule = make_schedule(50, "polynomial")
        prior = _random_prior(rng, n=2)
        coords = torch.as_tensor(rng.standard_normal((4, 3)))
        feats = torch.as_tensor(rng.standard_normal((4, 6)))
        eps_c = project_zero_cog(torch.as_tensor(rng.standard_normal((4, 3))))
        eps_f = torch.as_tensor(rng.standard_normal((4, 6)))
        stub = _StubDenoiser(eps_c, eps_f)
        loss, t = diffusion_loss(
            coords, feats, prior, schedule, stub, t=17, eps_coords=eps_c, eps_feats=eps_f
        )
        assert t == 17
        assert float(loss) < 1e-24

    def test_constant_offset_counts_all_entries(self, rng):
        # A constant shift c on every predicted entry gives c^2 per feature
        # entry, while the coordinate stream's zero-CoG projection kills the
        # constant vector entirely, so only features contribute.
        schedule = make_schedule(50, "polynomial")
        prior = _random_prior(rng, n=2)
        n, d, c = 4, 6, 0.5
        coords = torch.as_tensor(rng.standard_normal((n, 3)))
        feats = torch.as_tensor(rng.standard_normal((n, d)))
        eps_c = project_zero_cog(torch.as_tensor(rng.standard_normal((n, 3))))
        eps_f = torch.as_tensor(rng.standard_normal((n, d)))
        stub = _StubDenoiser(eps_c, eps_f, offset=c)
        loss, _ = diffusion_loss(
            coords, feats, prior, schedule, stub, t=9, eps_coords=eps_c, eps_feats=eps_f
        )
        assert float(loss) == pytest.approx(c * c * n * d, rel=1e-12)


class TestDenoiseStep:
    def test_hand_formula(self, rng):
        schedule = make_schedule(50, "polynomial")
        prior = _random_prior(rng, n=2)
        coords = project_zero_cog(torch.as_tensor(rng.standard_normal((3, 3))))
        feats = torch.as_tensor(rng.standard_normal((3, 6)))
        eps_c = project_zero_cog(torch.as_tensor(rng.standard_normal((3, 3))))
        eps_f = torch.as_tensor(rng.standard_normal((3, 6)))
        stub = _StubDenoiser(eps_c, eps_f)
        noise_c = torch.as_tensor(rng.standard_normal((3, 3)))
        noise_f = torch.as_tensor(rng.standard_normal((3, 6)))
        t = 20
        out_c, out_f = denoise_step(coords, feats, t, prior, schedule, stub, noise_c, noise_f)
        beta = schedule.beta(t)
        rho = schedule.posterior_noise_scale(t)
        scale = 1.0 / math.sqrt(1.0 - beta)
        want_c = project_zero_cog(
            scale * (coords - beta / schedule.sigma(t) * eps_c) + rho * project_zero_cog(noise_c)
        )
        want_f = scale * (feats - beta / schedule.sigma(t) * eps_f) + rho * noise_f
        assert (out_c - want_c).abs().max() < 1e-12
        assert (out_f - want_f).abs().max() < 1e-12

    def test_zero_beta_is_identity(self, rng):
        # A flat segment (beta = 0) must pass the state through unchanged;
        # built directly since make_schedule never emits flat segments.
        bar = np.array([1.0, 0.5, 0.5 - 1e-15, 1e-5])
        schedule = NoiseSchedule(kind="polynomial", steps=3, alpha_bar=bar)
        prior = _random_prior(rng, n=2)
        coords = project_zero_cog(torch.as_tensor(rng.standard_normal((3, 3))))
        feats = torch.as_tensor(rng.standard_normal((3, 6)))
        zeros_c = torch.zeros(3, 3, dtype=torch.float64)
        zeros_f = torch.zeros(3, 6, dtype=torch.float64)
        stub = _StubDenoiser(zeros_c, zeros_f)
        out_c, out_f = denoise_step(
            coords, feats, 2, prior, schedule, stub, zeros_c, zeros_f
        )
        assert (out_c - coords).abs().max() < 1e-7
        assert (out_f - feats).abs().max() < 1e-7


class TestFinalDecode:
    def test_interval_probability_matches_quadrature(self):
        integrate = pytest.importorskip("scipy.integrate")
        stats = pytest.importorskip("scipy.stats")
        mus = torch.tensor([0.0, 0.4, 1.0, 1.6, -2.0], dtype=torch.float64)
        for sigma in (0.05, 0.3, 1.0):
            ours = onehot_level_probability(mus, sigma)
            for mu, value in zip(mus.tolist(), ours.tolist()):
                oracle = stats.norm.cdf(1.5, mu, sigma) - stats.norm.cdf(0.5, mu, sigma)
                assert value == pytest.approx(oracle, abs=1e-12)

    def test_type_and_charge_readout(self, rng):
        # A stub that predicts zero noise makes the decoded mean equal to
        # state / signal; build the state so the unscaled mean lands exactly
        # on a chosen one-hot row and charge.
        schedule = make_schedule(100, "polynomial")
        scaler = FeatureScaler()
        prior = _random_prior(rng, n=2)
        signal = schedule.signal(1)
        target_types = [1, 3, 0, 4]
        target_charges = [0, 1, -1, 0]
        feats = torch.zeros(4, 6, dtype=torch.float64)
        for row, (tt, cc) in enumerate(zip(target_types, target_charges)):
            feats[row, tt] = scaler.onehot_weight
            feats[row, -1] = cc * scaler.charge_weight
        coords = project_zero_cog(torch.as_tensor(rng.standard_normal((4, 3))))
        stub = _StubDenoiser(torch.zeros(4, 3, dtype=torch.float64), torch.zeros(4, 6, dtype=torch.float64))
        mol = final_decode(
            coords * signal, feats * signal, prior, schedule, stub, scaler, DEFAULT_ALPHABET
        )
        assert [DEFAULT_ALPHABET.index(s) for s in mol.symbols()] == target_types
        assert mol.charges().tolist() == target_charges
        np.testing.assert_allclose(mol.coords, coords.numpy(), atol=1e-12)

    def test_underflow_falls_back_to_distance_score(self, rng):
        # Means far outside the unit interval underflow every class integral
        # to zero; the readout must still pick the class nearest the hot
        # level rather than defaulting to column 0.
        schedule = make_schedule(100, "polynomial")
        scaler = FeatureScaler(onehot_weight=1.0)
        prior = _random_prior(rng, n=1)
        signal = schedule.signal(1)
        feats = torch.full((1, 6), -80.0, dtype=torch.float64)
        feats[0, 2] = -40.0
        stub = _StubDenoiser(torch.zeros(1, 3, dtype=torch.float64), torch.zeros(1, 6, dtype=torch.float64))
        mol = final_decode(
            project_zero_cog(torch.zeros(1, 3, dtype=torch.float64)),
            feats * signal,
            prior,
            schedule,
            stub,
            scaler,
            DEFAULT_ALPHABET,
        )
        assert mol.symbols() == ("N",)


class TestSample:
    def test_atom_count_below_prior_rejected(self, rng):
        schedule = make_schedule(10, "polynomial")
        denoiser = _denoiser()
        prior = _random_prior(rng, n=5)
        with pytest.raises(DiffusionError):
            sample(prior, 4, schedule, denoiser, FeatureScaler(), DEFAULT_ALPHABET)

    def test_deterministic_given_generator(self, rng):
        schedule = make_schedule(20, "polynomial")
        denoiser = _denoiser(seed=5)
        prior = _random_prior(rng, n=2)
        a = sample(
            prior, 4, schedule, denoiser, FeatureScaler(), DEFAULT_ALPHABET,
            generator=torch.Generator().manual_seed(3),
        )
        b = sample(
            prior, 4, schedule, denoiser, FeatureScaler(), DEFAULT_ALPHABET,
            generator=torch.Generator().manual_seed(3),
        )
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_array_equal(a.features, b.features)

    def test_noise_draw_order_stable(self):
        schedule = make_schedule(5, "polynomial")
        a = draw_sample_noise(3, 6, schedule, torch.Generator().manual_seed(1))
        b = draw_sample_noise(3, 6, schedule, torch.Generator().manual_seed(1))
        assert (a.initial_coords - b.initial_coords).abs().max() == 0.0
        assert sorted(a.step_coords) == [2, 3, 4, 5]
        for t in a.step_coords:
            assert (a.step_coords[t] - b.step_coords[t]).abs().max() == 0.0

    def test_on_state_sees_every_step(self, rng):
        schedule = make_schedule(12, "polynomial")
        denoiser = _denoiser(seed=2)
        prior = _random_prior(rng, n=2)
        seen = []
        sample(
            prior, 3, schedule, denoiser, FeatureScaler(), DEFAULT_ALPHABET,
            generator=torch.Generator().manual_seed(0), on_state=lambda t, c, f: seen.append(t),
        )
        assert seen == list(range(12, 0, -1))

    def test_trajectory_equivariance_single(self, rng):
        schedule = make_schedule(30, "polynomial")
        denoiser = _denoiser(seed=8)
        prior = _random_prior(rng, n=2)
        noise = draw_sample_noise(
            4, 6, schedule, torch.Generator().manual_seed(4), dtype=torch.float64
        )
        base = sample(
            prior, 4, schedule, denoiser, FeatureScaler(), DEFAULT_ALPHABET, noise=noise
        )
        r = random_rotation(rng)
        rt = torch.as_tensor(r)
        from molsteer.autoencoder import LatentPrior

        moved_prior = LatentPrior(coords=prior.coords @ rt.T, feats=prior.feats)
        moved_noise = SampleNoise(
            initial_coords=noise.initial_coords @ rt.T,
            initial_feats=noise.initial_feats,
            step_coords={t: v @ rt.T for t, v in noise.step_coords.items()},
            step_feats=dict(noise.step_feats),
        )
        moved = sample(
            moved_prior, 4, schedule, denoiser, FeatureScaler(), DEFAULT_ALPHABET, noise=moved_noise
        )
        assert np.abs(moved.coords - base.coords @ r.T).max() < 1e-9
        np.testing.assert_array_equal(moved.features, base.features)
