"""Composite model: variants, combined objective, training, prediction."""

import copy

import numpy as np
import pytest
import torch

from deepbgp import dbgp, gp
from deepbgp.encoder import records_to_batch
from deepbgp.errors import ConfigurationError
from tests.conftest import small_encoder_config, small_head_config


def build(vocabulary, name, seed=3, **head_overrides):
    variant = dbgp.ModelVariant.from_name(name)
    pool = 12 if variant.gp_head else 24
    return dbgp.DbgpModel(
        vocabulary,
        variant,
        small_encoder_config(pool_size=pool),
        small_head_config(grid_points_per_dim=8, **head_overrides),
        seed=seed,
    )


def zero_noise_for(model):
    return {
        name: torch.zeros(mf.shape, dtype=torch.float64)
        for name, mf in model.stochastic_blocks().items()
    }


def collapse_scales(model, rho=-80.0):
    with torch.no_grad():
        for mf in model.stochastic_blocks().values():
            mf.rho.fill_(rho)


class TestVariants:
    def test_six_variants_have_expected_flags(self):
        flags = {
            "DBGP": (True, False, "kiss_gp"),
            "BE": (True, False, "dense"),
            "BO": (False, True, "bayes_dense"),
            "BE_BO": (True, True, "bayes_dense"),
            "WHITENED_GP": (False, False, "whitened_gp"),
            "KISS_GP": (False, False, "kiss_gp"),
        }
        for name, (emb, out, head) in flags.items():
            v = dbgp.ModelVariant.from_name(name)
            assert (v.embedding_stochastic, v.output_stochastic, v.head) == (emb, out, head)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ConfigurationError):
            dbgp.ModelVariant.from_name("FULL_BAYES")

    def test_inconsistent_flags_rejected(self):
        with pytest.raises(ConfigurationError):
            dbgp.ModelVariant("DBGP", False, False, "kiss_gp")
        with pytest.raises(ConfigurationError):
            dbgp.ModelVariant("X", False, True, "dense")


class TestCompositeForward:
    def test_collapsed_dbgp_equals_deterministic_kiss_gp(self, tiny_cohort):
        """All variational scales at zero: the DBGP forward equals the
        KISS-GP forward run with the mean weights."""
        _, vocabulary, records = tiny_cohort
        stochastic = build(vocabulary, "DBGP")
        deterministic = build(vocabulary, "KISS_GP")
        with torch.no_grad():
            for name, table in stochastic.encoder_model.embedding.tables.items():
                deterministic.encoder_model.embedding.tables[name].weight.copy_(table.mu)
            deterministic.encoder_model.encoder.load_state_dict(
                stochastic.encoder_model.encoder.state_dict()
            )
            deterministic.encoder_model.pooler.load_state_dict(
                stochastic.encoder_model.pooler.state_dict()
            )
            deterministic.head.load_state_dict(stochastic.head.state_dict())
        batch = records_to_batch(records[:6])
        out_s = stochastic(batch, noise=zero_noise_for(stochastic))
        out_d = deterministic(batch)
        assert torch.allclose(out_s.latent_mean, out_d.latent_mean, atol=1e-14)
        assert torch.allclose(out_s.latent_var, out_d.latent_var, atol=1e-14)

    def test_be_and_bebo_agree_with_shared_realization(self, tiny_cohort):
        """Same embedding realization plus a zero-variance output layer:
        BE and BE_BO produce identical logits."""
        _, vocabulary, records = tiny_cohort
        be = build(vocabulary, "BE")
        bebo = build(vocabulary, "BE_BO")
        with torch.no_grad():
            for name, table in be.encoder_model.embedding.tables.items():
                bebo.encoder_model.embedding.tables[name].mu.copy_(table.mu)
                bebo.encoder_model.embedding.tables[name].rho.copy_(table.rho)
            bebo.encoder_model.encoder.load_state_dict(be.encoder_model.encoder.state_dict())
            bebo.encoder_model.pooler.load_state_dict(be.encoder_model.pooler.state_dict())
            bebo.head.weight.mu.copy_(be.head.weight[:, None])
            bebo.head.bias.mu.copy_(be.head.bias.reshape(1))
        gen = torch.Generator().manual_seed(17)
        shared_eps = {
            name: mf.draw_eps(gen) for name, mf in be.stochastic_blocks().items()
        }
        noise_bebo = dict(shared_eps)
        noise_bebo["head.weight"] = torch.zeros_like(bebo.head.weight.mu)
        noise_bebo["head.bias"] = torch.zeros_like(bebo.head.bias.mu)
        with torch.no_grad():
            bebo.head.weight.rho.fill_(-80.0)
            bebo.head.bias.rho.fill_(-80.0)
        batch = records_to_batch(records[:5])
        out_be = be(batch, noise=shared_eps)
        out_bebo = bebo(batch, noise=noise_bebo)
        assert torch.allclose(out_be.logits, out_bebo.logits, atol=1e-12)

    def test_batch_invariance_against_single_example(self, tiny_cohort):
        _, vocabulary, records = tiny_cohort
        model = build(vocabulary, "DBGP")
        noise = model.draw_noise(torch.Generator().manual_seed(2))
        single = records_to_batch([records[0]], pad_to=32)
        batch8 = records_to_batch(records[:8], pad_to=32)
        out_single = model(single, noise=noise)
        out_batch = model(batch8, noise=noise)
        assert torch.allclose(out_single.latent_mean[0], out_batch.latent_mean[0], atol=1e-12)
        assert torch.allclose(out_single.latent_var[0], out_batch.latent_var[0], atol=1e-12)


class TestDbgpElbo:
    def test_deterministic_variant_reduces_to_gp_objective(self, tiny_cohort):
        """No stochastic weight blocks: the combined objective IS the GP
        head objective, to machine precision."""
        _, vocabulary, records = tiny_cohort
        model = build(vocabulary, "KISS_GP")
        batch = records_to_batch(records[:16])
        combined = dbgp.dbgp_elbo(batch, model)
        with torch.no_grad():
            pooled = model.encoder_model.forward_pooled(batch)
            x = model.head.project(pooled)
            head_only = gp.classification_elbo(
                batch.labels, x, model.head.inducing, model.head.params, model.head.state
            )
        assert combined.item() == head_only.item()

    def test_kl_limits_for_degenerate_scales(self, tiny_cohort):
        """mu=0, prior 1: KL -> 0 only at s=1; as s -> 0 the KL term
        diverges instead of silently clipping."""
        _, vocabulary, records = tiny_cohort
        model = build(vocabulary, "BO")
        batch = records_to_batch(records[:4])
        with torch.no_grad():
            model.head.weight.mu.zero_()
            model.head.bias.mu.zero_()
        values = []
        for rho in (-2.0, -6.0, -12.0):
            with torch.no_grad():
                model.head.weight.rho.fill_(rho)
                model.head.bias.rho.fill_(rho)
            noise = zero_noise_for(model)
            with torch.no_grad():
                values.append(float(dbgp.dbgp_elbo(batch, model, noise=noise)))
        assert values[0] > values[1] > values[2]  # KL grows without bound
        with torch.no_grad():
            from deepbgp.bayeslayers import softplus_inverse

            model.head.weight.rho.fill_(softplus_inverse(1.0))
            model.head.bias.rho.fill_(softplus_inverse(1.0))
        kl = sum(mf.kl() for mf in model.stochastic_blocks().values())
        assert kl.item() == pytest.approx(0.0, abs=1e-12)

    def test_minibatch_objectives_sum_to_full_batch(self, tiny_cohort):
        """With a pinned weight realization, the epoch sum of minibatch
        objectives equals the full-batch objective for every partition."""
        _, vocabulary, records = tiny_cohort
        subset = records[:64]
        model = build(vocabulary, "BE")
        noise = model.draw_noise(torch.Generator().manual_seed(4))
        full_batch = records_to_batch(subset)
        with torch.no_grad():
            full = float(dbgp.dbgp_elbo(full_batch, model, n_train=64, noise=noise))
            rng = np.random.default_rng(0)
            for batch_size in (8, 16, 32):
                order = rng.permutation(64)
                total = 0.0
                for start in range(0, 64, batch_size):
                    chunk = [subset[i] for i in order[start : start + batch_size]]
                    total += float(
                        dbgp.dbgp_elbo(records_to_batch(chunk), model, n_train=64, noise=noise)
                    )
                assert total == pytest.approx(full, abs=1e-9)

    def test_objective_finite_at_initialization_for_all_variants(self, tiny_cohort):
        _, vocabulary, records = tiny_cohort
        batch = records_to_batch(records[:12])
        for name in dbgp.VARIANT_NAMES:
            model = build(vocabulary, name)
            value = dbgp.dbgp_elbo(batch, model, generator=torch.Generator().manual_seed(0))
            assert torch.isfinite(value), name

    def test_kl_penalty_monotone_in_prior_std_when_scale_dominates(self):
        """Closed form: KL decreases in prior_std exactly when
        prior_std^2 < mu^2 + s^2 (pointwise)."""
        mu, s = 0.8, 0.3
        import math

        def kl(prior):
            return math.log(prior / s) + (s**2 + mu**2) / (2 * prior**2) - 0.5

        threshold = math.sqrt(mu**2 + s**2)
        below = np.linspace(0.2, threshold - 1e-3, 50)
        above = np.linspace(threshold + 1e-3, 3.0, 50)
        assert all(kl(a) > kl(b) for a, b in zip(below, below[1:]))  # decreasing
        assert all(kl(a) < kl(b) for a, b in zip(above, above[1:]))  # increasing


class TestTraining:
    def test_zero_epochs_returns_initial_state(self, tiny_cohort):
        _, vocabulary, records = tiny_cohort
        config = dbgp.TrainConfig(epochs=0, seed=1)
        model, metrics = dbgp.train(
            vocabulary, records, "BE", config,
            small_encoder_config(pool_size=24), small_head_config(),
        )
        assert metrics == []
        fresh = dbgp.DbgpModel(
            vocabulary,
            dbgp.ModelVariant.from_name("BE"),
            small_encoder_config(pool_size=24),
            small_head_config(),
            seed=1,
        )
        for (name_a, a), (name_b, b) in zip(
            model.state_dict().items(), fresh.state_dict().items()
        ):
            assert name_a == name_b
            assert torch.equal(a, b), name_a

    def test_same_seed_same_metrics(self, tiny_cohort):
        _, vocabulary, records = tiny_cohort
        config = dbgp.TrainConfig(epochs=2, batch_size=64, seed=9)
        args = (vocabulary, records, "BO", config, small_encoder_config(pool_size=24), small_head_config())
        _, metrics_a = dbgp.train(*args)
        _, metrics_b = dbgp.train(*args)
        assert metrics_a == metrics_b

    def test_divergence_aborts_with_last_good_state(self, tiny_cohort, monkeypatch):
        """A non-finite objective mid-epoch restores the last completed
        epoch's weights and stops with an abort marker."""
        _, vocabulary, records = tiny_cohort
        real_elbo = dbgp.dbgp_elbo
        calls = {"n": 0}

        def sabotaged(batch, model, **kwargs):
            calls["n"] += 1
            value = real_elbo(batch, model, **kwargs)
            if calls["n"] > 4:
                return value * float("nan")
            return value

        monkeypatch.setattr(dbgp, "dbgp_elbo", sabotaged)
        config = dbgp.TrainConfig(epochs=5, batch_size=64, seed=2)
        model, metrics = dbgp.train(
            vocabulary, records, "BE", config,
            small_encoder_config(pool_size=24), small_head_config(),
        )
        assert any(m.get("aborted") for m in metrics)
        assert len(metrics) < 5
        for param in model.parameters():
            assert torch.isfinite(param).all()

    def test_separable_cohort_reaches_high_auroc(self):
        """noise_rate=0 cohort: validation AUROC >= 0.95 within 20 epochs."""
        from deepbgp import synthdata

        config = synthdata.CohortConfig(
            n_patients=1500, positive_rate=0.3, n_codes=50, n_risk_codes=3,
            noise_rate=0.0, seed=9,
        )
        vocabulary, records = synthdata.generate_cohort(config)
        train_config = dbgp.TrainConfig(epochs=8, batch_size=128, learning_rate=3e-3, seed=11, patience=8)
        model, metrics = dbgp.train(
            vocabulary, records, "BE", train_config,
            small_encoder_config(pool_size=24), small_head_config(),
        )
        assert max(m["val_auroc"] for m in metrics) >= 0.95
        assert len(metrics) <= 20


class TestMcPredict:
    def test_deterministic_dense_path_has_zero_std(self, tiny_cohort):
        _, vocabulary, records = tiny_cohort
        variant = dbgp.ModelVariant("DET_DENSE", False, False, "dense")
        model = dbgp.DbgpModel(
            vocabulary, variant, small_encoder_config(pool_size=24), small_head_config(), seed=2
        )
        samples = dbgp.mc_predict(model, records[:20], n_samples=6, seed=0)
        assert np.all(samples.std == 0.0)
        assert np.all((samples.probs >= 0) & (samples.probs <= 1))

    def test_degenerate_dbgp_with_zero_latent_variance_has_zero_std(
        self, tiny_cohort, monkeypatch
    ):
        _, vocabulary, records = tiny_cohort
        model = build(vocabulary, "DBGP")
        collapse_scales(model)
        original = dbgp.GpHead.forward

        def clamped(self, pooled):
            mean, var = original(self, pooled)
            return mean, torch.zeros_like(var)

        monkeypatch.setattr(dbgp.GpHead, "forward", clamped)
        samples = dbgp.mc_predict(model, records[:15], n_samples=5, seed=3)
        assert np.all(samples.std == 0.0)

    def test_row_order_invariance(self, tiny_cohort):
        _, vocabulary, records = tiny_cohort
        model = build(vocabulary, "DBGP")
        subset = records[:24]
        shuffled = list(reversed(subset))
        a = dbgp.mc_predict(model, subset, n_samples=4, seed=5)
        b = dbgp.mc_predict(model, shuffled, n_samples=4, seed=5)
        by_id_a = dict(zip(a.patient_ids, a.probs))
        by_id_b = dict(zip(b.patient_ids, b.probs))
        for pid in by_id_a:
            assert np.array_equal(by_id_a[pid], by_id_b[pid])

    def test_gp_head_varies_across_draws_even_when_deterministic(self, tiny_cohort):
        _, vocabulary, records = tiny_cohort
        model = build(vocabulary, "KISS_GP")
        samples = dbgp.mc_predict(model, records[:10], n_samples=8, seed=1)
        assert np.all(samples.std > 0)


class TestGradCheck:
    @pytest.mark.parametrize("name", ["KISS_GP", "DBGP", "BO"])
    def test_variants_pass_quick_grad_check(self, tiny_cohort, name):
        _, vocabulary, records = tiny_cohort
        model = build(vocabulary, name)
        batch = records_to_batch(records[:8])
        worst = dbgp.finite_difference_grad_check(model, batch, coords_per_block=2, seed=0)
        assert worst < 1e-4

    def test_quadratic_objective_is_exact(self, tiny_cohort):
        """Central differences are exact for quadratics: substituting a
        quadratic for the model objective drives the error to ~1e-10."""
        theta = torch.nn.Parameter(torch.tensor([0.7, -1.2], dtype=torch.float64))
        coeff = torch.tensor([2.0, 0.5], dtype=torch.float64)

        def quadratic():
            return (coeff * theta * theta).sum()

        quadratic().backward()
        step = 1e-4
        worst = 0.0
        for c in range(2):
            original = float(theta.data[c])
            with torch.no_grad():
                theta.data[c] = original + step
                plus = float(quadratic())
                theta.data[c] = original - step
                minus = float(quadratic())
                theta.data[c] = original
            fd = (plus - minus) / (2 * step)
            ad = float(theta.grad[c])
            worst = max(worst, abs(fd - ad) / max(abs(fd), abs(ad)))
        assert worst < 1e-10


class TestCheckpoint:
    def test_round_trip_preserves_predictions(self, tiny_cohort, tmp_path):
        _, vocabulary, records = tiny_cohort
        model = build(vocabulary, "DBGP")
        path = str(tmp_path / "model.pt")
        dbgp.save_model_checkpoint(model, path)
        loaded = dbgp.load_model_checkpoint(path)
        a = dbgp.mc_predict(model, records[:8], n_samples=3, seed=0)
        b = dbgp.mc_predict(loaded, records[:8], n_samples=3, seed=0)
        assert np.array_equal(a.probs, b.probs)

    def test_variant_tag_preserved(self, tiny_cohort, tmp_path):
        _, vocabulary, _ = tiny_cohort
        model = build(vocabulary, "WHITENED_GP")
        path = str(tmp_path / "model.pt")
        dbgp.save_model_checkpoint(model, path)
        assert dbgp.load_model_checkpoint(path).variant.name == "WHITENED_GP"
