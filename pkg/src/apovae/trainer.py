"""Adversarial training loop, objectives and checkpoint I/O.

Each iteration samples a minibatch, takes ``k_dual`` ascent steps on the
dual objective ``L1`` over the critic and pseudo-inputs, then one ascent step
on ``L2`` over encoder and decoder.
"""

from __future__ import annotations

import base64
import csv
import json
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence, TextIO

import torch

from .corpus import Sentence, Vocab, pad_batch
from .errors import InvalidArgumentError, NonFiniteError
from .models import APoVAE, ModelConfig, build_model

MAGIC = b"APOVAE01"
FORMAT_VERSION = 1
CSV_COLUMNS = ["iter", "L1", "L2", "recon", "kl_est", "wall_ms"]


@dataclass
class TrainConfig:
    """Every knob of a training run. Defaults target the desk-scale tree corpus."""

    c: float = 0.7
    latent_dim: int = 8
    emb_dim: int = 64
    hidden: int = 128
    noise_dim: int | None = None
    n_gyroplanes: int | None = None
    dual_hidden: int | None = None
    nu_max: float = 10.0
    nu_bound: str = "clamp"
    posterior: str = "implicit"
    prior: str = "standard"
    num_pseudo: int = 16
    pseudo_len: int = 8
    batch_size: int = 32
    lr_model: float = 1e-3
    lr_dual: float = 1e-3
    k_dual: int = 1
    max_iter: int = 3000
    seed: int = 0
    clip_norm: float = 5.0
    model_betas: tuple[float, float] = (0.9, 0.999)
    dual_betas: tuple[float, float] = (0.5, 0.9)
    adam_eps: float = 1e-8
    vocab_cap: int = 10_000
    timing: bool = False

    def __post_init__(self):
        self.model_betas = tuple(self.model_betas)
        self.dual_betas = tuple(self.dual_betas)
        positive = ("c", "latent_dim", "emb_dim", "hidden", "nu_max", "num_pseudo", "pseudo_len",
                    "batch_size", "lr_model", "lr_dual", "k_dual", "clip_norm", "adam_eps", "vocab_cap")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.max_iter < 0:
            raise InvalidArgumentError("max_iter must be >= 0")
        for betas in (self.model_betas, self.dual_betas):
            if len(betas) != 2 or not all(0 <= b < 1 for b in betas):
                raise InvalidArgumentError("Adam betas must be two numbers in [0, 1)")
        self.model_config(8)  # validates the model-facing fields

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - set(cls.keys()))
        if unknown:
            raise InvalidArgumentError(f"unknown config keys {unknown}; valid keys: {', '.join(cls.keys())}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_betas"] = list(self.model_betas)
        d["dual_betas"] = list(self.dual_betas)
        return d

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, emb_dim=self.emb_dim, hidden=self.hidden, latent_dim=self.latent_dim,
            noise_dim=self.noise_dim, n_gyroplanes=self.n_gyroplanes, dual_hidden=self.dual_hidden,
            nu_max=self.nu_max, nu_bound=self.nu_bound, c=self.c, posterior=self.posterior, prior=self.prior,
            num_pseudo=self.num_pseudo, pseudo_len=self.pseudo_len,
        )


def dual_objective(nu_q: torch.Tensor, nu_p: torch.Tensor) -> torch.Tensor:
    """``L1 = E_q[nu] - E_p[exp(nu)]``."""
    return nu_q.mean() - torch.exp(nu_p).mean()


def model_objective(logp: torch.Tensor, nu_q: torch.Tensor) -> torch.Tensor:
    """``L2 = E_q[log p(x|z) - nu]``."""
    return (logp - nu_q).mean()


def kl_from_dual(nu_q: torch.Tensor, nu_p: torch.Tensor) -> float:
    """KL report from critic outputs: the dual objective plus one, floored at zero.

    ``max_nu E_q[nu] - E_p[exp nu]`` equals ``KL - 1`` at ``nu = log(q/p)``.
    """
    return max(0.0, float(dual_objective(nu_q, nu_p)) + 1.0)


@torch.no_grad()
def kl_dual_estimate(model: APoVAE, ids, lengths, generator: torch.Generator | None = None, samples: int = 1) -> float:
    """Dual KL estimate on one batch, averaging critic terms over ``samples`` draws per sentence."""
    b = ids.shape[0]
    summary = model.dual.summarize(ids, lengths)
    z_q = model.sample_posterior(ids, lengths, model.draw_xi(b, generator, samples=samples))
    z_p = model.sample_prior(b * samples, generator).view(samples, b, -1)
    return kl_from_dual(model.dual.score(summary, z_q), model.dual.score(summary, z_p))


def _assign_grads(loss: torch.Tensor, params: Sequence[torch.nn.Parameter], clip: float) -> float:
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    return float(torch.nn.utils.clip_grad_norm_(params, clip))


class Trainer:
    """Owns the model, both optimizers and the RNG stream of one training run."""

    def __init__(self, config: TrainConfig, sentences: Sequence[Sentence], vocab: Vocab, model: APoVAE | None = None):
        if not sentences:
            raise InvalidArgumentError("training corpus is empty")
        self.config = config
        self.vocab = vocab
        self.sentences = list(sentences)
        self.model = model or build_model(config.model_config(len(vocab)), seed=config.seed)
        groups = self.model.groups()
        self.model_params = [p for _, p in groups["phi"] + groups["theta"]]
        self.dual_params = [p for _, p in groups["psi"] + groups["delta"]]
        self.opt_model = torch.optim.Adam(self.model_params, lr=config.lr_model, betas=config.model_betas, eps=config.adam_eps)
        self.opt_dual = torch.optim.Adam(self.dual_params, lr=config.lr_dual, betas=config.dual_betas, eps=config.adam_eps)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.iteration = 0
        self.last_grad_norms: dict[str, float] = {}

    def sample_batch(self) -> tuple[torch.Tensor, torch.Tensor]:
        idx = torch.randperm(len(self.sentences), generator=self.generator)[: self.config.batch_size]
        return pad_batch([self.sentences[i].ids for i in idx.tolist()])

    def dual_step(self, ids, lengths) -> float:
        """One ascent step on ``L1`` over the critic and pseudo-inputs; returns ``L1`` before the update."""
        m = self.model
        b = ids.shape[0]
        with torch.no_grad():
            z_q = m.sample_posterior(ids, lengths, m.draw_xi(b, self.generator))
        z_p = m.sample_prior(b, self.generator)
        summary = m.dual.summarize(ids, lengths)
        l1 = dual_objective(m.dual.score(summary, z_q), m.dual.score(summary, z_p))
        if not bool(torch.isfinite(l1)):
            raise NonFiniteError(f"dual objective became {l1.item()} at iteration {self.iteration}")
        self.last_grad_norms["dual"] = _assign_grads(-l1, self.dual_params, self.config.clip_norm)
        self.opt_dual.step()
        return l1.item()

    def model_step(self, ids, lengths) -> tuple[float, float]:
        """One ascent step on ``L2`` over encoder and decoder; returns ``(L2, mean log p(x|z))``."""
        m = self.model
        z_q = m.sample_posterior(ids, lengths, m.draw_xi(ids.shape[0], self.generator))
        logp = m.decoder.log_prob(z_q, ids, lengths)
        l2 = model_objective(logp, m.dual(ids, lengths, z_q))
        if not bool(torch.isfinite(l2)):
            raise NonFiniteError(f"model objective became {l2.item()} at iteration {self.iteration}")
        self.last_grad_norms["model"] = _assign_grads(-l2, self.model_params, self.config.clip_norm)
        self.opt_model.step()
        return l2.item(), logp.mean().item()

    def step(self) -> dict:
        start = time.perf_counter()
        ids, lengths = self.sample_batch()
        l1s = [self.dual_step(ids, lengths) for _ in range(self.config.k_dual)]
        l2, recon = self.model_step(ids, lengths)
        self.iteration += 1
        wall = (time.perf_counter() - start) * 1000 if self.config.timing else 0.0
        return {"iter": self.iteration, "L1": l1s[-1], "L2": l2, "recon": recon,
                "kl_est": max(0.0, l1s[-1] + 1.0), "wall_ms": wall}

    def train(
        self,
        max_iter: int | None = None,
        log: TextIO | None = None,
        failure_checkpoint: str | Path | None = None,
        callback: Callable[[dict], None] | None = None,
    ) -> list[dict]:
        """Run iterations until ``max_iter`` in total have been done; rows go to ``log`` as CSV."""
        max_iter = self.config.max_iter if max_iter is None else max_iter
        writer = None
        if log is not None:
            if self.iteration == 0:
                log.write(f"# config: {json.dumps(self.config.to_dict(), sort_keys=True)}\n")
                log.write(",".join(CSV_COLUMNS) + "\n")
            writer = csv.DictWriter(log, CSV_COLUMNS, lineterminator="\n")
        rows = []
        while self.iteration < max_iter:
            try:
                row = self.step()
            except NonFiniteError:
                if failure_checkpoint is not None:
                    self.save(failure_checkpoint)
                raise
            rows.append(row)
            if writer is not None:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            if callback is not None:
                callback(row)
        return rows

    # checkpoints -----------------------------------------------------------

    def _tensors(self) -> list[tuple[str, torch.Tensor]]:
        out = [(f"param/{k}", v.detach()) for k, v in self.model.state_dict().items()]
        for tag, opt in (("model", self.opt_model), ("dual", self.opt_dual)):
            for idx, st in sorted(opt.state_dict()["state"].items()):
                for key, val in sorted(st.items()):
                    out.append((f"optim/{tag}/{idx}/{key}", torch.as_tensor(val)))
        return out

    def save(self, path: str | Path) -> None:
        manifest, blobs, offset = [], [], 0
        for name, t in self._tensors():
            data = t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes()
            manifest.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                             "offset": offset, "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
        header = {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_dict(),
            "vocab": self.vocab.words,
            "iteration": self.iteration,
            "rng_state": base64.b64encode(self.generator.get_state().numpy().tobytes()).decode("ascii"),
            "tensors": manifest,
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(hb)))
            fh.write(hb)
            for b in blobs:
                fh.write(b)

    @classmethod
    def load(cls, path: str | Path, sentences: Sequence[Sentence] | None = None) -> "Trainer":
        """Restore a trainer; ``sentences`` may be omitted for inference-only use."""
        header, tensors = read_checkpoint(path)
        config = TrainConfig.from_dict(header["config"])
        vocab = Vocab(header["vocab"])
        placeholder = [Sentence([1, 3, 2])]
        trainer = cls(config, sentences or placeholder, vocab)
        state = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
        trainer.model.load_state_dict(state)
        for tag, opt in (("model", trainer.opt_model), ("dual", trainer.opt_dual)):
            sd = opt.state_dict()
            prefix = f"optim/{tag}/"
            for name, t in tensors.items():
                if name.startswith(prefix):
                    idx, key = name[len(prefix):].split("/")
                    sd["state"].setdefault(int(idx), {})[key] = t
            opt.load_state_dict(sd)
        trainer.iteration = header["iteration"]
        rng = base64.b64decode(header["rng_state"])
        trainer.generator.set_state(torch.frombuffer(bytearray(rng), dtype=torch.uint8))
        return trainer


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Parse a checkpoint into its JSON header and named tensors (original dtypes)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise InvalidArgumentError(f"{path}: not an APOVAE01 checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise InvalidArgumentError(f"{path}: unsupported format version {header.get('format_version')}")
    base = 16 + hlen
    tensors = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        buf = bytearray(raw[start : start + entry["nbytes"]])
        t = torch.frombuffer(buf, dtype=torch.float64).reshape(entry["shape"])
        tensors[entry["name"]] = t.to(getattr(torch, entry["dtype"])).clone()
    return header, tensors
