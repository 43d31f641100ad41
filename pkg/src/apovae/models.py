"""Encoder, hyperbolic decoder and dual critic of the adversarial Poincare VAE.

Parameter groups follow the training algorithm:

* ``phi``   -- encoder (``F`` direction head, ``G`` implicit sampler)
* ``theta`` -- decoder (gyroplanes + recurrent token model)
* ``psi``   -- dual function ``nu(x, z)``
* ``delta`` -- VampPrior pseudo-inputs (soft embedding sequences)
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from . import geometry as geo
from .corpus import BOS, EOS
from .distributions import WrappedNormalParams, sample_wrapped_normal, standard_prior_params
from .errors import InvalidArgumentError

POSTERIOR_KINDS = ("implicit", "explicit")


@dataclass
class ModelConfig:
    vocab_size: int
    emb_dim: int = 64
    hidden: int = 128
    latent_dim: int = 8
    noise_dim: int | None = None
    n_gyroplanes: int | None = None
    dual_hidden: int | None = None
    nu_max: float = 10.0
    nu_bound: str = "clamp"
    c: float = 0.7
    posterior: str = "implicit"
    prior: str = "standard"
    num_pseudo: int = 16
    pseudo_len: int = 8

    def __post_init__(self):
        if self.noise_dim is None:
            self.noise_dim = self.latent_dim
        if self.n_gyroplanes is None:
            self.n_gyroplanes = self.hidden
        if self.dual_hidden is None:
            self.dual_hidden = self.hidden
        if self.posterior == "explicit" and self.noise_dim != self.latent_dim:
            raise InvalidArgumentError("explicit posteriors need noise_dim == latent_dim")
        if self.posterior not in POSTERIOR_KINDS:
            raise InvalidArgumentError(f"posterior must be one of {POSTERIOR_KINDS}")
        if self.nu_bound not in ("clamp", "tanh"):
            raise InvalidArgumentError("nu_bound must be 'clamp' or 'tanh'")
        if self.prior not in ("standard", "vamp"):
            raise InvalidArgumentError("prior must be 'standard' or 'vamp'")
        for name in ("vocab_size", "emb_dim", "hidden", "latent_dim", "noise_dim", "n_gyroplanes", "num_pseudo", "pseudo_len"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")

    @property
    def ball(self) -> geo.BallConfig:
        return geo.BallConfig(c=self.c, dim=self.latent_dim)


def _check_ids(ids: torch.Tensor, vocab_size: int) -> None:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= vocab_size):
        raise InvalidArgumentError("token id outside the vocabulary")


def _last_state(outputs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    idx = (lengths - 1).clamp_min(0).view(-1, 1, 1).expand(-1, 1, outputs.shape[-1])
    return outputs.gather(1, idx).squeeze(1)


class SentenceEncoder(nn.Module):
    """Embedding + GRU; returns the hidden state after each sentence's last token."""

    def __init__(self, vocab_size: int, emb_dim: int, hidden: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, emb_dim)
        self.rnn = nn.GRU(emb_dim, hidden, batch_first=True)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        _check_ids(ids, self.vocab_size)
        return self.summarize_embedded(self.embed(ids), lengths)

    def summarize_embedded(self, emb: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        out, _ = self.rnn(emb)
        return _last_state(out, lengths)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ball = cfg.ball
        self.sentence = SentenceEncoder(cfg.vocab_size, cfg.emb_dim, cfg.hidden)
        self.direction = nn.Linear(cfg.hidden, cfg.latent_dim)
        self.sampler = nn.Sequential(
            nn.Linear(cfg.hidden + cfg.noise_dim, cfg.hidden),
            nn.Tanh(),
            nn.Linear(cfg.hidden, cfg.latent_dim),
        )
        self.log_sigma = nn.Linear(cfg.hidden, cfg.latent_dim) if cfg.posterior == "explicit" else None

    def mu(self, h: torch.Tensor) -> torch.Tensor:
        return geo.exp_map0(self.direction(h), self.ball)

    def sigma(self, h: torch.Tensor) -> torch.Tensor:
        return torch.exp(self.log_sigma(h).clamp(-9.0, 3.0))

    def tangent_noise(self, h: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        """Origin tangent sample ``v``: ``G(h, xi)`` (implicit) or ``sigma(h) * xi`` (explicit)."""
        if self.log_sigma is not None:
            return self.sigma(h) * xi
        if h.shape[:-1] != xi.shape[:-1]:
            h = h.expand(*xi.shape[:-1], h.shape[-1])
        return self.sampler(torch.cat([h, xi], dim=-1))

    def sample(self, h: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        """``z = exp_mu(P_{0->mu}(v))``; extra leading axes on ``xi`` draw several samples."""
        mu = self.mu(h)
        v = self.tangent_noise(h, xi)
        if v.dim() > mu.dim():
            mu = mu.expand_as(v)
        return geo.exp_map(mu, geo.parallel_transport_from_origin(mu, v, self.ball), self.ball)


class Decoder(nn.Module):
    """Gyroplane feature layer feeding a GRU language model.

    The gyroplane features ``g(z)`` are appended to every step's input token
    embedding and are the only route from ``z`` into the decoder.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ball = cfg.ball
        self.vocab_size = cfg.vocab_size
        self.embed = nn.Embedding(cfg.vocab_size, cfg.emb_dim)
        self.plane_normal = nn.Parameter(torch.randn(cfg.n_gyroplanes, cfg.latent_dim) / cfg.latent_dim**0.5)
        self.plane_intercept = nn.Parameter(0.1 * torch.randn(cfg.n_gyroplanes, cfg.latent_dim))
        self.rnn = nn.GRU(cfg.emb_dim + cfg.n_gyroplanes, cfg.hidden, batch_first=True)
        self.out = nn.Linear(cfg.hidden, cfg.vocab_size)

    def features(self, z: torch.Tensor) -> torch.Tensor:
        return geo.gyroplane_feature(z, geo.Gyroplane(self.plane_normal, self.plane_intercept), self.ball)

    def logits(self, feats: torch.Tensor, inputs: torch.Tensor, hidden=None):
        emb = self.embed(inputs)
        g = feats.unsqueeze(1).expand(-1, inputs.shape[1], -1)
        out, hidden = self.rnn(torch.cat([emb, g], dim=-1), hidden)
        return self.out(out), hidden

    def log_prob(self, z: torch.Tensor, ids: torch.Tensor, lengths: torch.Tensor, zero_features: bool = False):
        """Per-sentence ``sum_t log p(x_t | x_<t, z)`` over every token after the first."""
        _check_ids(ids, self.vocab_size)
        feats = self.features(z)
        if zero_features:
            feats = torch.zeros_like(feats)
        width = int(lengths.max())
        ids = ids[:, :width]
        logits, _ = self.logits(feats, ids[:, :-1])
        logp = torch.log_softmax(logits, dim=-1).gather(-1, ids[:, 1:].unsqueeze(-1)).squeeze(-1)
        steps = torch.arange(width - 1).unsqueeze(0)
        mask = steps < (lengths - 1).unsqueeze(1)
        return (logp * mask).sum(-1)

    @torch.no_grad()
    def step_log_probs(self, z: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """Score a single sentence one token at a time (for consistency checks)."""
        feats = self.features(z.unsqueeze(0))
        hidden, total = None, torch.zeros((), dtype=torch.float64)
        for t in range(len(ids) - 1):
            logits, hidden = self.logits(feats, ids[t : t + 1].view(1, 1), hidden)
            total = total + torch.log_softmax(logits[0, -1], -1)[ids[t + 1]]
        return total

    @torch.no_grad()
    def sample(self, z: torch.Tensor, max_len: int, generator: torch.Generator | None = None, temperature: float = 0.0):
        """Ancestral sampling from ``p(x|z)``; ``temperature == 0`` decodes greedily.

        Returns generated ids (without the begin marker), stopping after the end marker.
        """
        if max_len < 1:
            raise InvalidArgumentError("max_len must be >= 1")
        if temperature < 0:
            raise InvalidArgumentError("temperature must be >= 0")
        feats = self.features(z.unsqueeze(0))
        hidden, prev, out = None, BOS, []
        for _ in range(max_len):
            logits, hidden = self.logits(feats, torch.tensor([[prev]]), hidden)
            logits = logits[0, -1]
            if temperature == 0:
                prev = int(logits.argmax())
            else:
                probs = torch.softmax(logits / temperature, -1)
                prev = int(torch.multinomial(probs, 1, generator=generator))
            out.append(prev)
            if prev == EOS:
                break
        return out


class DualNet(nn.Module):
    """Critic ``nu_psi(x, z)``: own sentence encoder, ``z`` read through ``log_0``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ball = cfg.ball
        self.nu_max = cfg.nu_max
        self.nu_bound = cfg.nu_bound
        h = cfg.dual_hidden
        self.sentence = SentenceEncoder(cfg.vocab_size, cfg.emb_dim, h)
        self.mlp = nn.Sequential(
            nn.Linear(h + cfg.latent_dim, h),
            nn.Tanh(),
            nn.Linear(h, h),
            nn.Tanh(),
            nn.Linear(h, 1),
        )
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def summarize(self, ids, lengths):
        return self.sentence(ids, lengths)

    def score(self, summary: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        feat = geo.log_map0(z, self.ball)
        if feat.dim() > summary.dim():
            summary = summary.expand(*feat.shape[:-1], summary.shape[-1])
        nu = self.mlp(torch.cat([summary, feat], dim=-1)).squeeze(-1)
        if self.nu_bound == "tanh":  # smooth bound: the gradient never vanishes exactly
            return self.nu_max * torch.tanh(nu / self.nu_max)
        return nu.clamp(-self.nu_max, self.nu_max)

    def forward(self, ids, lengths, z):
        return self.score(self.summarize(ids, lengths), z)


class APoVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ball = cfg.ball
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.dual = DualNet(cfg)
        if cfg.prior == "vamp":
            self.pseudo_inputs = nn.Parameter(torch.randn(cfg.num_pseudo, cfg.pseudo_len, cfg.emb_dim))
        else:
            self.pseudo_inputs = None

    @property
    def explicit(self) -> bool:
        return self.cfg.posterior == "explicit"

    def groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out = {"phi": [], "theta": [], "psi": [], "delta": []}
        prefix = {"encoder": "phi", "decoder": "theta", "dual": "psi", "pseudo_inputs": "delta"}
        for name, p in self.named_parameters():
            out[prefix[name.split(".")[0]]].append((name, p))
        return out

    def encode(self, ids: torch.Tensor, lengths: torch.Tensor):
        """Return the summary ``h`` and the ball-valued anchor ``mu = exp_0(F(h))``."""
        h = self.encoder.sentence(ids, lengths)
        return h, self.encoder.mu(h)

    def posterior_params(self, ids, lengths) -> WrappedNormalParams:
        if not self.explicit:
            raise InvalidArgumentError("posterior parameters exist only in explicit mode")
        h = self.encoder.sentence(ids, lengths)
        return WrappedNormalParams(self.encoder.mu(h), self.encoder.sigma(h))

    def sample_posterior(self, ids, lengths, xi: torch.Tensor) -> torch.Tensor:
        h = self.encoder.sentence(ids, lengths)
        if xi.dim() > 2:  # (S, B, n_xi): S samples per sentence
            return self.encoder.sample(h.unsqueeze(0), xi)
        return self.encoder.sample(h, xi)

    def pseudo_summaries(self) -> torch.Tensor:
        lengths = torch.full((self.cfg.num_pseudo,), self.cfg.pseudo_len, dtype=torch.long)
        return self.encoder.sentence.summarize_embedded(self.pseudo_inputs, lengths)

    def prior_bank(self) -> list[WrappedNormalParams]:
        """Explicit-mode VampPrior components ``q(z|s_k)``."""
        h = self.pseudo_summaries()
        mu, sigma = self.encoder.mu(h), self.encoder.sigma(h)
        return [WrappedNormalParams(mu[k], sigma[k]) for k in range(len(h))]

    def sample_prior(self, batch_size: int, generator: torch.Generator | None = None, noise=None, component=None):
        """Standard wrapped normal, or the VampPrior mixture over pseudo-input posteriors."""
        n = self.cfg.latent_dim
        if self.pseudo_inputs is None:
            if noise is None:
                noise = torch.randn(batch_size, n, generator=generator, dtype=torch.float64)
            return sample_wrapped_normal(standard_prior_params(n), noise, self.ball)
        if component is None:
            component = torch.randint(self.cfg.num_pseudo, (batch_size,), generator=generator)
        if noise is None:
            noise = torch.randn(batch_size, self.cfg.noise_dim, generator=generator, dtype=torch.float64)
        h = self.pseudo_summaries()[component]
        return self.encoder.sample(h, noise)

    def draw_xi(self, batch_size: int, generator=None, samples: int | None = None) -> torch.Tensor:
        shape = (batch_size, self.cfg.noise_dim) if samples is None else (samples, batch_size, self.cfg.noise_dim)
        return torch.randn(*shape, generator=generator, dtype=torch.float64)


def build_model(cfg: ModelConfig, seed: int = 0) -> APoVAE:
    """Construct a float64 model with weights drawn from ``seed`` (global RNG untouched)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        prev = torch.get_default_dtype()
        torch.set_default_dtype(torch.float64)
        try:
            model = APoVAE(cfg)
        finally:
            torch.set_default_dtype(prev)
    return model
