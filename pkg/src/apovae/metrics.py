"""Evaluation metrics: ELBO/perplexity, dual KL, mutual information, active units,
and the rank correlation between tree depth and hyperbolic norm.

Monte Carlo metrics draw ``samples`` posterior samples per sentence (16 by default).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from scipy import stats

from . import geometry as geo
from .corpus import Sentence, batch_iter
from .distributions import (
    PriorSpec,
    WrappedNormalParams,
    log_prob_prior,
    log_prob_wrapped_normal,
    sample_wrapped_normal,
)
from .errors import UnsupportedModeError
from .models import APoVAE
from .trainer import kl_from_dual

SAMPLES = 16
EVAL_BATCH = 256


@dataclass
class EvalReport:
    neg_elbo: float
    ppl: float
    kl_est: float
    mi: float | None
    au: int
    spearman_depth_norm: float | None
    tokens: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _batches(sentences: Sequence[Sentence]):
    return batch_iter(sentences, EVAL_BATCH)


def _decoder_log_prob(model: APoVAE, z: torch.Tensor, ids, lengths) -> torch.Tensor:
    """``log p(x|z)`` for ``z`` of shape ``(S, B, n)`` in one decoder pass; returns ``(S, B)``."""
    s, b = z.shape[:2]
    flat = model.decoder.log_prob(z.reshape(s * b, -1), ids.repeat(s, 1), lengths.repeat(s))
    return flat.view(s, b)


def token_counts(sentences: Sequence[Sentence]) -> np.ndarray:
    """Predicted tokens per sentence: everything after the begin marker."""
    return np.array([len(s.ids) - 1 for s in sentences])


def perplexity(neg_elbo: np.ndarray, tokens: np.ndarray) -> float:
    return math.exp(float(np.sum(neg_elbo)) / float(np.sum(tokens)))


@torch.no_grad()
def corpus_kl_dual(model: APoVAE, sentences, samples: int = SAMPLES, generator=None) -> float:
    """Dual KL estimate over the whole corpus (critic terms pooled before the +1 correction)."""
    nu_q, nu_p = [], []
    for ids, lengths in _batches(sentences):
        b = ids.shape[0]
        summary = model.dual.summarize(ids, lengths)
        z_q = model.sample_posterior(ids, lengths, model.draw_xi(b, generator, samples=samples))
        z_p = model.sample_prior(b * samples, generator).view(samples, b, -1)
        nu_q.append(model.dual.score(summary, z_q).reshape(-1))
        nu_p.append(model.dual.score(summary, z_p).reshape(-1))
    return kl_from_dual(torch.cat(nu_q), torch.cat(nu_p))


@torch.no_grad()
def _explicit_kl_terms(model: APoVAE, ids, lengths, z):
    q = model.posterior_params(ids, lengths)
    log_q = log_prob_wrapped_normal(q, z, model.ball)
    bank = model.prior_bank() if model.pseudo_inputs is not None else None
    log_p = log_prob_prior(PriorSpec(model.cfg.prior, model.cfg.num_pseudo), z, model.ball, bank)
    return log_q, log_p


@torch.no_grad()
def elbo_estimate(model: APoVAE, sentences, samples: int = SAMPLES, generator=None, kl: float | None = None):
    """Per-sentence negative ELBO and corpus perplexity.

    Implicit models subtract the corpus dual-KL estimate (computed here unless
    given); explicit models use the Monte Carlo ``log q - log p`` term.

    Returns:
        ``(neg_elbo, ppl)`` with ``neg_elbo`` an array over sentences.
    """
    if not model.explicit and kl is None:
        kl = corpus_kl_dual(model, sentences, samples, generator)
    out = []
    for ids, lengths in _batches(sentences):
        b = ids.shape[0]
        z = model.sample_posterior(ids, lengths, model.draw_xi(b, generator, samples=samples))
        logp = _decoder_log_prob(model, z, ids, lengths)
        if model.explicit:
            log_q, log_p = _explicit_kl_terms(model, ids, lengths, z)
            elbo = (logp - log_q + log_p).mean(0)
        else:
            elbo = logp.mean(0) - kl
        out.append(-elbo)
    neg_elbo = torch.cat(out).numpy()
    return neg_elbo, perplexity(neg_elbo, token_counts(sentences))


@torch.no_grad()
def importance_log_likelihood(model: APoVAE, sentences, samples: int = 10_000, generator=None, chunk: int = 1000):
    """Importance-sampled ``log p(x)`` with the explicit posterior as proposal."""
    if not model.explicit:
        raise UnsupportedModeError("importance sampling needs an explicit posterior")
    out = []
    for ids, lengths in _batches(sentences):
        b = ids.shape[0]
        terms = []
        for start in range(0, samples, chunk):
            s = min(chunk, samples - start)
            z = model.sample_posterior(ids, lengths, model.draw_xi(b, generator, samples=s))
            logp = _decoder_log_prob(model, z, ids, lengths)
            log_q, log_p = _explicit_kl_terms(model, ids, lengths, z)
            terms.append(logp + log_p - log_q)
        w = torch.cat(terms)
        out.append(torch.logsumexp(w, 0) - math.log(samples))
    return torch.cat(out).numpy()


def mutual_information_from_params(
    mu: torch.Tensor, sigma: torch.Tensor, cfg: geo.BallConfig, samples: int = SAMPLES, generator=None, chunk: int = 64
) -> float:
    """``E_x KL(q(z|x) || q_agg(z))`` with ``q_agg`` the uniform mixture of all posteriors.

    Args:
        mu: ``(N, n)`` posterior locations.
        sigma: ``(N, n)`` posterior tangent scales.
    """
    n_x, n = mu.shape
    noise = torch.randn(samples, n_x, n, generator=generator, dtype=torch.float64)
    z = sample_wrapped_normal(WrappedNormalParams(mu, sigma), noise, cfg).reshape(-1, n)
    own = log_prob_wrapped_normal(WrappedNormalParams(mu, sigma), z.view(samples, n_x, n), cfg).reshape(-1)
    agg = []
    for start in range(0, z.shape[0], chunk):
        zc = z[start : start + chunk].unsqueeze(1)
        lp = log_prob_wrapped_normal(WrappedNormalParams(mu.unsqueeze(0), sigma.unsqueeze(0)), zc, cfg)
        agg.append(torch.logsumexp(lp, dim=1) - math.log(n_x))
    return float((own - torch.cat(agg)).mean())


@torch.no_grad()
def mutual_information(model: APoVAE, sentences, samples: int = SAMPLES, generator=None) -> float:
    if not model.explicit:
        raise UnsupportedModeError("mutual information needs an explicit posterior")
    mus, sigmas = [], []
    for ids, lengths in _batches(sentences):
        p = model.posterior_params(ids, lengths)
        mus.append(p.mu)
        sigmas.append(p.sigma)
    return mutual_information_from_params(torch.cat(mus), torch.cat(sigmas), model.ball, samples, generator)


@torch.no_grad()
def posterior_tangent_means(model: APoVAE, sentences, samples: int = SAMPLES, generator=None) -> torch.Tensor:
    """Per-sentence mean of ``log_0(z)`` over posterior samples, shape ``(N, n)``."""
    out = []
    for ids, lengths in _batches(sentences):
        z = model.sample_posterior(ids, lengths, model.draw_xi(ids.shape[0], generator, samples=samples))
        out.append(geo.log_map0(z, model.ball).mean(0))
    return torch.cat(out)


def active_units_from_means(means, threshold: float = 0.01) -> int:
    """Count coordinates whose across-sentence variance of the posterior mean exceeds ``threshold``."""
    means = np.asarray(means, dtype=np.float64)
    return int((means.var(axis=0) > threshold).sum())


def active_units(model: APoVAE, sentences, samples: int = SAMPLES, generator=None, threshold: float = 0.01) -> int:
    return active_units_from_means(posterior_tangent_means(model, sentences, samples, generator).numpy(), threshold)


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)


def norm_depth_correlation_from_norms(norms, depths) -> float | None:
    """Spearman rho between depth labels and norms; ``None`` when it is undefined."""
    depths = np.asarray(depths)
    norms = np.asarray(norms)
    if len(depths) < 2 or np.all(depths == depths[0]) or np.all(norms == norms[0]):
        return None
    return spearman(depths, norms)


def hyperbolic_norms(model: APoVAE, sentences, samples: int = SAMPLES, generator=None) -> np.ndarray:
    """Distance from the origin to each sentence's posterior mean ``exp_0(mean log_0 z)``."""
    means = posterior_tangent_means(model, sentences, samples, generator)
    center = geo.exp_map0(means, model.ball)
    return geo.distance(torch.zeros_like(center), center, model.ball).numpy()


def norm_depth_correlation(model: APoVAE, sentences, samples: int = SAMPLES, generator=None) -> float | None:
    if any(s.depth is None for s in sentences):
        return None
    norms = hyperbolic_norms(model, sentences, samples, generator)
    return norm_depth_correlation_from_norms(norms, [s.depth for s in sentences])


def evaluate(model: APoVAE, sentences: Sequence[Sentence], samples: int = SAMPLES, seed: int = 0) -> EvalReport:
    gen = torch.Generator().manual_seed(seed)
    kl = corpus_kl_dual(model, sentences, samples, gen)
    neg_elbo, ppl = elbo_estimate(model, sentences, samples, gen, kl=None if model.explicit else kl)
    mi = mutual_information(model, sentences, samples, gen) if model.explicit else None
    labeled = all(s.depth is not None for s in sentences)
    rho = norm_depth_correlation(model, sentences, samples, gen) if labeled else None
    return EvalReport(
        neg_elbo=float(neg_elbo.mean()),
        ppl=ppl,
        kl_est=kl,
        mi=mi,
        au=active_units(model, sentences, samples, gen),
        spearman_depth_norm=rho,
        tokens=int(token_counts(sentences).sum()),
    )
