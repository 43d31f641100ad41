import json
import math

import numpy as np
import pytest
import torch

from apovae import geometry as geo
from apovae import metrics
from apovae.corpus import BOS, EOS, Sentence
from apovae.errors import UnsupportedModeError
from apovae.models import ModelConfig, build_model

SENTS = [Sentence([BOS, 4, 5, EOS], 0), Sentence([BOS, 6, EOS], 1), Sentence([BOS, 4, 6, 5, EOS], 2)]


def model(**kw):
    cfg = dict(vocab_size=7, emb_dim=4, hidden=6, latent_dim=2, n_gyroplanes=4, c=0.7)
    cfg.update(kw)
    return build_model(ModelConfig(**cfg), seed=0)


def brute_spearman(x, y):
    def ranks(v):
        v = np.asarray(v)
        out = np.empty(len(v))
        for i, a in enumerate(v):
            out[i] = (v < a).sum() + ((v == a).sum() + 1) / 2
        return out

    rx, ry = ranks(x), ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float((rx * ry).sum() / math.sqrt((rx**2).sum() * (ry**2).sum()))


def test_token_counts_exclude_begin_marker():
    assert metrics.token_counts(SENTS).tolist() == [3, 2, 4]


def test_perfect_reconstruction_gives_unit_perplexity(monkeypatch):
    m = model()
    monkeypatch.setattr(m.decoder, "log_prob", lambda z, ids, lengths: torch.zeros(ids.shape[0], dtype=torch.float64))
    neg_elbo, ppl = metrics.elbo_estimate(m, SENTS, samples=2, generator=torch.Generator().manual_seed(0))
    assert neg_elbo.tolist() == [0.0, 0.0, 0.0] and ppl == 1.0


def test_uniform_decoder_perplexity_is_vocab_size():
    m = model()
    with torch.no_grad():
        m.decoder.out.weight.zero_()
        m.decoder.out.bias.zero_()
    neg_elbo, ppl = metrics.elbo_estimate(m, SENTS, samples=2, generator=torch.Generator().manual_seed(0))
    assert ppl == pytest.approx(7.0, rel=1e-12)
    np.testing.assert_allclose(neg_elbo, metrics.token_counts(SENTS) * math.log(7), rtol=1e-12)


def test_explicit_elbo_below_importance_sampled_likelihood():
    m = model(posterior="explicit")
    gen = torch.Generator().manual_seed(1)
    neg_elbo, _ = metrics.elbo_estimate(m, SENTS, samples=2000, generator=gen)
    log_px = metrics.importance_log_likelihood(m, SENTS, samples=10_000, generator=gen)
    assert np.all(-neg_elbo <= log_px + 1e-3)


def test_importance_sampling_needs_explicit_mode():
    with pytest.raises(UnsupportedModeError):
        metrics.importance_log_likelihood(model(), SENTS, samples=10)


def test_mi_zero_for_shared_posterior():
    cfg = geo.BallConfig(c=1.0)
    mu = torch.tensor([[0.1, -0.2]] * 50, dtype=torch.float64)
    sigma = torch.full((50, 2), 0.3, dtype=torch.float64)
    mi = metrics.mutual_information_from_params(mu, sigma, cfg, generator=torch.Generator().manual_seed(0))
    assert abs(mi) <= 0.02


def test_mi_two_separated_posteriors_is_log_two():
    cfg = geo.BallConfig(c=1.0)
    mu = torch.tensor([[0.5, 0.0], [-0.5, 0.0]], dtype=torch.float64)
    sigma = torch.full((2, 2), 0.01, dtype=torch.float64)
    mi = metrics.mutual_information_from_params(mu, sigma, cfg, samples=64, generator=torch.Generator().manual_seed(0))
    assert mi == pytest.approx(math.log(2), abs=0.05)


def test_mi_invariant_to_duplication():
    cfg = geo.BallConfig(c=0.7)
    rng = np.random.default_rng(0)
    mu = geo.exp_map0(torch.tensor(rng.normal(size=(6, 2)) * 0.5), cfg)
    sigma = torch.tensor(rng.uniform(0.2, 0.6, (6, 2)))
    one = metrics.mutual_information_from_params(mu, sigma, cfg, samples=2000, generator=torch.Generator().manual_seed(0))
    two = metrics.mutual_information_from_params(
        mu.repeat(2, 1), sigma.repeat(2, 1), cfg, samples=1000, generator=torch.Generator().manual_seed(1)
    )
    assert one == pytest.approx(two, abs=0.02)


def test_mi_requires_explicit_mode():
    with pytest.raises(UnsupportedModeError):
        metrics.mutual_information(model(), SENTS)
    assert metrics.mutual_information(model(posterior="explicit"), SENTS) > -0.05


def test_active_units_examples():
    assert metrics.active_units_from_means(np.ones((20, 3))) == 0
    rng = np.random.default_rng(0)
    col = rng.normal(size=2000)
    col = (col - col.mean()) / col.std() * math.sqrt(0.5)
    means = np.stack([col, np.full(2000, 3.0)], axis=1)
    assert metrics.active_units_from_means(means) == 1


def test_active_units_monotone_in_scale():
    rng = np.random.default_rng(1)
    means = rng.normal(size=(500, 6)) * np.array([0.01, 0.05, 0.09, 0.2, 0.5, 1.0])
    counts = [metrics.active_units_from_means(means * s) for s in (1.0, 2.0, 4.0, 16.0)]
    assert counts == sorted(counts) and counts[-1] == 6
    assert metrics.active_units_from_means(means, threshold=1e9) == 0


def test_active_units_range_on_model():
    au = metrics.active_units(model(), SENTS * 4, generator=torch.Generator().manual_seed(0))
    assert 0 <= au <= 2


def test_spearman_matches_brute_force_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = rng.integers(0, 5, 40)
        y = rng.normal(size=40)
        assert metrics.spearman(x, y) == pytest.approx(brute_spearman(x, y), abs=1e-12)


def test_norm_depth_correlation_examples():
    assert metrics.norm_depth_correlation_from_norms([0.1, 0.2, 0.5, 0.9], [0, 1, 2, 3]) == pytest.approx(1.0)
    assert metrics.norm_depth_correlation_from_norms([0.1, 0.2], [1, 1]) is None
    rng = np.random.default_rng(3)
    depths = rng.integers(0, 5, 2000)
    rho = metrics.norm_depth_correlation_from_norms(rng.permutation(np.arange(2000.0)), depths)
    assert abs(rho) <= 0.1


def test_norm_depth_correlation_needs_labels():
    assert metrics.norm_depth_correlation(model(), [Sentence([BOS, 4, EOS])] * 3) is None


def test_hyperbolic_norms_are_distances_from_origin():
    m = model()
    gen = torch.Generator().manual_seed(4)
    norms = metrics.hyperbolic_norms(m, SENTS, generator=gen)
    means = metrics.posterior_tangent_means(m, SENTS, generator=torch.Generator().manual_seed(4))
    # d(0, exp_0(v)) = 2 |v|
    np.testing.assert_allclose(norms, 2 * means.norm(dim=-1).numpy(), rtol=1e-9)


def test_evaluate_report_consistency():
    m = model()
    report = metrics.evaluate(m, SENTS, samples=4, seed=0)
    tokens = metrics.token_counts(SENTS).sum()
    assert report.tokens == tokens
    assert report.ppl == pytest.approx(math.exp(report.neg_elbo * len(SENTS) / tokens), rel=1e-12)
    assert report.mi is None and report.kl_est == 0.0 and 0 <= report.au <= 2
    line = report.to_json()
    assert "\n" not in line
    assert set(json.loads(line)) == {"neg_elbo", "ppl", "kl_est", "mi", "au", "spearman_depth_norm", "tokens"}
    assert metrics.evaluate(m, SENTS, samples=4, seed=0) == report


def test_evaluate_explicit_reports_mi():
    report = metrics.evaluate(model(posterior="explicit"), SENTS, samples=4, seed=0)
    assert report.mi is not None
