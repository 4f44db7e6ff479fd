import math

import numpy as np
import pytest
import torch

from protodist.errors import ConfigError, ShapeError
from protodist.gradcheck import (
    autograd_gradient,
    fd_gradient,
    max_relative_error,
    probe_indices,
)
from protodist.model import (
    LatentDistribution,
    ModelConfig,
    class_logits,
    class_probabilities,
    init_model,
    prototype_distances,
    reparameterize,
    sample_latent,
    similarity_logits,
)

from util import small_config, small_model


class TestInit:
    def test_same_seed_bitwise_identical(self):
        a = small_model(dtype=torch.float32)
        b = small_model(dtype=torch.float32)
        for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb), na

    def test_different_seeds_differ(self):
        a = small_model(dtype=torch.float32, seed=1)
        b = small_model(dtype=torch.float32, seed=2)
        assert not torch.equal(a.prototypes, b.prototypes)

    def test_prototype_shape_default_config(self):
        model = init_model(ModelConfig())
        assert tuple(model.prototypes.shape) == (10, 1, 32)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(beta=1.5).validate()
        with pytest.raises(ConfigError):
            ModelConfig(alpha=0.0).validate()
        with pytest.raises(ConfigError):
            ModelConfig(class_count=1).validate()
        with pytest.raises(ConfigError):
            ModelConfig(head="linear").validate()

    def test_config_round_trip(self):
        cfg = small_config(head="similarity")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestEncode:
    def test_output_shapes(self):
        model = small_model()
        x = torch.rand(8, 1, 16, 16, dtype=torch.float64)
        dist = model.encode(x)
        assert dist.mu.shape == (8, 4)
        assert dist.log_var.shape == (8, 4)

    def test_duplicated_rows_identical_outputs(self):
        model = small_model()
        x = torch.rand(1, 1, 16, 16, dtype=torch.float64).repeat(5, 1, 1, 1)
        dist = model.encode(x)
        for i in range(1, 5):
            assert torch.equal(dist.mu[i], dist.mu[0])

    def test_shape_mismatch_raises(self):
        model = small_model()
        with pytest.raises(ShapeError):
            model.encode(torch.rand(2, 1, 8, 8, dtype=torch.float64))
        with pytest.raises(ShapeError):
            model.decode(torch.rand(2, 9, dtype=torch.float64))

    def test_gradient_matches_finite_differences(self):
        model = small_model()
        x = torch.rand(2, 1, 16, 16, dtype=torch.float64,
                       generator=torch.Generator().manual_seed(0))
        weight = model.fc_latent.weight
        idx = probe_indices(weight, 5, seed=1)

        def output_sum() -> float:
            with torch.no_grad():
                return float(model.encode(x).mu.sum())

        numeric = fd_gradient(output_sum, weight, idx)
        analytic = autograd_gradient(model.encode(x).mu.sum(), weight, idx)
        assert max_relative_error(analytic, numeric) < 1e-4


class TestSampleLatent:
    def test_zero_variance_limit(self):
        mu = torch.randn(4, 6, dtype=torch.float64)
        dist = LatentDistribution(mu=mu, log_var=torch.full((4, 6), -50.0, dtype=torch.float64))
        z = sample_latent(dist, torch.Generator().manual_seed(0))
        assert (z - mu).abs().max() < 1e-10

    def test_monte_carlo_mean(self):
        # oracle: CLT bound, 4 sigma over 1e5 draws per coordinate
        n = 100_000
        mu = torch.tensor([[0.7, -1.2]], dtype=torch.float64)
        log_var = torch.tensor([[math.log(0.25), math.log(2.0)]], dtype=torch.float64)
        dist = LatentDistribution(
            mu=mu.expand(n, 2).contiguous(), log_var=log_var.expand(n, 2).contiguous()
        )
        z = sample_latent(dist, torch.Generator().manual_seed(123))
        sigma = torch.exp(0.5 * log_var)[0]
        bound = 4.0 * sigma / math.sqrt(n)
        assert ((z.mean(dim=0) - mu[0]).abs() <= bound).all()

    def test_reproducible_with_seed(self):
        dist = LatentDistribution(
            mu=torch.zeros(3, 2, dtype=torch.float64),
            log_var=torch.zeros(3, 2, dtype=torch.float64),
        )
        z1 = sample_latent(dist, torch.Generator().manual_seed(7))
        z2 = sample_latent(dist, torch.Generator().manual_seed(7))
        assert torch.equal(z1, z2)

    def test_gradients_flow_through_reparameterization(self):
        mu = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
        log_var = torch.zeros(2, 3, dtype=torch.float64, requires_grad=True)
        eps = torch.randn(2, 3, dtype=torch.float64)
        z = reparameterize(LatentDistribution(mu, log_var), eps)
        z.sum().backward()
        assert mu.grad is not None and log_var.grad is not None
        assert torch.equal(mu.grad, torch.ones_like(mu))


class TestDecode:
    def test_shape_and_range(self):
        model = small_model()
        z = torch.randn(4, 4, dtype=torch.float64)
        out = model.decode(z)
        assert out.shape == (4, 1, 16, 16)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_gradient_matches_finite_differences(self):
        model = small_model()
        z = torch.randn(2, 4, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(3))
        weight = model.fc_decode.weight
        idx = probe_indices(weight, 5, seed=2)

        def output_sum() -> float:
            with torch.no_grad():
                return float(model.decode(z).sum())

        # h balances truncation against roundoff: the probed value is a sum
        # over ~256 outputs, so roundoff at h=1e-6 would eat the tolerance
        numeric = fd_gradient(output_sum, weight, idx, h=1e-5)
        analytic = autograd_gradient(model.decode(z).sum(), weight, idx)
        assert max_relative_error(analytic, numeric) < 1e-4

    def test_28x28_shape(self):
        cfg = ModelConfig(
            class_count=2, latent_dim=8, image_shape=(1, 28, 28),
            encoder_widths=(4, 4, 8, 8, 8),
        )
        model = init_model(cfg)
        assert model.decode(torch.randn(3, 8)).shape == (3, 1, 28, 28)


class TestPrototypeDistances:
    def test_zero_at_prototype(self):
        protos = torch.randn(2, 2, 5, dtype=torch.float64)
        z = protos[1, 0].unsqueeze(0)
        table = prototype_distances(z, protos)
        assert table.distances[0, 1, 0] == 0.0
        assert table.j_star[0, 1] == 0

    def test_unit_offset(self):
        protos = torch.zeros(1, 1, 4, dtype=torch.float64)
        z = torch.zeros(1, 4, dtype=torch.float64)
        z[0, 0] = 1.0
        table = prototype_distances(z, protos)
        assert table.distances[0, 0, 0] == pytest.approx(1.0, abs=1e-12)

    def test_brute_force_oracle(self):
        # oracle: elementwise sqrt-of-sum-of-squares loops
        rng = np.random.default_rng(5)
        z = rng.normal(size=(6, 3))
        protos = rng.normal(size=(2, 2, 3))
        table = prototype_distances(
            torch.from_numpy(z), torch.from_numpy(protos)
        )
        for n in range(6):
            for k in range(2):
                for j in range(2):
                    expected = math.sqrt(sum((z[n, l] - protos[k, j, l]) ** 2 for l in range(3)))
                    assert abs(table.distances[n, k, j].item() - expected) < 1e-12

    def test_d_star_and_j_star_consistent(self):
        rng = np.random.default_rng(8)
        z = torch.from_numpy(rng.normal(size=(5, 4)))
        protos = torch.from_numpy(rng.normal(size=(3, 4, 4)))
        table = prototype_distances(z, protos)
        d = table.distances.numpy()
        np.testing.assert_array_equal(table.j_star.numpy(), d.argmin(axis=2))
        np.testing.assert_allclose(table.d_star.numpy(), d.min(axis=2), atol=0)

    def test_tie_breaks_to_lowest_index(self):
        protos = torch.zeros(1, 3, 2, dtype=torch.float64)
        protos[0, 0] = torch.tensor([1.0, 0.0])
        protos[0, 2] = torch.tensor([1.0, 0.0])  # same distance as j=0
        protos[0, 1] = torch.tensor([5.0, 5.0])
        z = torch.zeros(1, 2, dtype=torch.float64)
        table = prototype_distances(z, protos)
        assert table.j_star[0, 0].item() == 0


class TestHeads:
    def test_zero_distance_zero_logit(self):
        assert class_logits(np.array([0.0]), 2.0, 2.0)[0] == 0.0

    def test_paper_constants_alpha_beta_two(self):
        assert class_logits(np.array([2.0]), 2.0, 2.0)[0] == pytest.approx(-1.0)

    def test_hand_evaluated_pair(self):
        logits = class_logits(np.array([1.0, 2.0]), 2.0, 2.0)
        np.testing.assert_allclose(logits, [-0.25, -1.0], atol=1e-12)

    def test_logits_nonpositive_zero_iff_zero(self):
        d = np.linspace(0, 5, 40)
        logits = class_logits(d, 1.7, 3.0)
        assert (logits <= 0).all()
        assert (logits == 0).sum() == 1

    def test_probabilities_uniform(self):
        probs = class_probabilities(np.zeros((3, 10)))
        np.testing.assert_allclose(probs, 0.1, atol=1e-12)

    def test_probabilities_hand_evaluated(self):
        probs = class_probabilities(np.array([[-0.25, -1.0]]))
        np.testing.assert_allclose(probs, [[0.6792, 0.3208]], atol=1e-4)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 6))
        p1 = class_probabilities(logits)
        p2 = class_probabilities(logits + 123.456)
        np.testing.assert_allclose(p1, p2, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        probs = class_probabilities(rng.normal(size=(50, 7)) * 10)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert (probs > 0).all() and (probs < 1).all()

    def test_enclosing_gradient_zero_at_prototype(self):
        # |dl/dd| at d=0 via central differences; -(d/2)^2 is even, so the
        # difference quotient vanishes identically for beta=2
        h = 1e-6
        plus = class_logits(np.array([h]), 2.0, 2.0)[0]
        minus = class_logits(np.array([-h]), 2.0, 2.0)[0]
        assert abs((plus - minus) / (2 * h)) == 0.0

    def test_enclosing_gradient_increases_with_distance(self):
        h = 1e-6
        mags = []
        for d in (0.0, 0.1, 1.0):
            plus = class_logits(np.array([d + h]), 2.0, 2.0)[0]
            minus = class_logits(np.array([abs(d - h)]), 2.0, 2.0)[0]
            mags.append(abs((plus - minus) / (2 * h)))
        assert mags[0] < mags[1] < mags[2]
        assert mags[0] == pytest.approx(0.0, abs=1e-9)

    def test_similarity_head_steep_near_prototype(self):
        h = 1e-4
        d = 0.01
        sim = abs(
            (similarity_logits(np.array([d + h])) - similarity_logits(np.array([d - h])))
            / (2 * h)
        )[0]
        enc = abs(
            (class_logits(np.array([d + h]), 2.0, 2.0)
             - class_logits(np.array([d - h]), 2.0, 2.0)) / (2 * h)
        )[0]
        assert sim > 100 * enc

    def test_logits_strictly_decreasing_in_distance(self):
        d = np.arange(0.0, 3.01, 0.1)
        enc = class_logits(d, 2.0, 2.0)
        sim = similarity_logits(d)
        assert (np.diff(enc) < 0).all()
        assert (np.diff(sim) < 0).all()


class TestPredict:
    def test_dominant_prototype_wins(self):
        model = small_model(class_count=4, prototypes_per_class=1)
        x = torch.rand(1, 1, 16, 16, dtype=torch.float64,
                       generator=torch.Generator().manual_seed(4))
        mu = model.encode(x).mu.detach()
        with torch.no_grad():
            for k in range(4):
                model.prototypes[k, 0] = mu[0] + 10.0
            model.prototypes[3, 0] = mu[0]
        pred = model.predict(x)
        assert pred.classes[0].item() == 3

    def test_batch_order_invariance(self):
        model = small_model(dtype=torch.float32)
        x = torch.rand(7, 1, 16, 16, generator=torch.Generator().manual_seed(5))
        perm = torch.randperm(7, generator=torch.Generator().manual_seed(6))
        p_full = model.predict(x)
        p_perm = model.predict(x[perm])
        assert torch.equal(p_full.probs[perm], p_perm.probs)
        assert torch.equal(p_full.classes[perm], p_perm.classes)

    def test_argmax_prob_equals_argmin_distance(self):
        model = small_model(class_count=3, prototypes_per_class=2)
        x = torch.rand(16, 1, 16, 16, dtype=torch.float64,
                       generator=torch.Generator().manual_seed(8))
        pred = model.predict(x)
        np.testing.assert_array_equal(
            pred.classes.numpy(), pred.distances.d_star.numpy().argmin(axis=1)
        )

    def test_predict_uses_mean_latent(self):
        model = small_model()
        x = torch.rand(3, 1, 16, 16, dtype=torch.float64)
        p1 = model.predict(x)
        p2 = model.predict(x)
        assert torch.equal(p1.probs, p2.probs)

    def test_similarity_head_predicts_nearest_class_too(self):
        model = small_model(class_count=3, head="similarity")
        x = torch.rand(10, 1, 16, 16, dtype=torch.float64)
        pred = model.predict(x)
        np.testing.assert_array_equal(
            pred.classes.numpy(), pred.distances.d_star.numpy().argmin(axis=1)
        )
