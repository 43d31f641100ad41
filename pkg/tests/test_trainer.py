import hashlib
import io
import json
import math
import struct

import pytest
import torch

from apovae.corpus import TreeCorpusConfig, build_vocab, encode_corpus, gen_tree_corpus
from apovae.errors import InvalidArgumentError, NonFiniteError
from apovae.trainer import (
    CSV_COLUMNS,
    MAGIC,
    Trainer,
    TrainConfig,
    _assign_grads,
    dual_objective,
    kl_dual_estimate,
    kl_from_dual,
    model_objective,
    read_checkpoint,
)

SMALL = dict(emb_dim=8, hidden=12, latent_dim=3, n_gyroplanes=6, dual_hidden=12, batch_size=8)


def tiny_corpus():
    rows = gen_tree_corpus(TreeCorpusConfig(branching=2, max_depth=2, bases=["a b", "c d"], seed=0))
    vocab = build_vocab([s for s, _ in rows])
    return encode_corpus(rows, vocab), vocab


def make_trainer(**kw):
    sents, vocab = tiny_corpus()
    return Trainer(TrainConfig(**{**SMALL, **kw}), sents, vocab)


def digest(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def test_config_defaults():
    cfg = TrainConfig()
    assert cfg.c == 0.7 and cfg.latent_dim == 8 and cfg.hidden == 128
    assert cfg.k_dual == 1 and cfg.dual_betas == (0.5, 0.9) and cfg.model_betas == (0.9, 0.999)
    assert cfg.nu_max == 10.0 and cfg.pseudo_len == 8


def test_config_rejects_unknown_keys_listing_valid_ones():
    with pytest.raises(InvalidArgumentError, match="bogus.*valid keys:.*lr_dual"):
        TrainConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize("bad", [{"k_dual": 0}, {"c": -1.0}, {"batch_size": 0}, {"max_iter": -1},
                                 {"dual_betas": [0.5, 1.0]}, {"prior": "uniform"}])
def test_config_validation(bad):
    with pytest.raises(InvalidArgumentError):
        TrainConfig(**bad)


def test_config_dict_roundtrip():
    cfg = TrainConfig(c=1.0, k_dual=3, dual_betas=(0.4, 0.8))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_objectives_and_kl_report():
    nu_q = torch.tensor([0.2, 0.4], dtype=torch.float64)
    nu_p = torch.tensor([0.0, math.log(3.0)], dtype=torch.float64)
    assert dual_objective(nu_q, nu_p).item() == pytest.approx(0.3 - 2.0)
    assert kl_from_dual(nu_q, nu_p) == 0.0
    assert kl_from_dual(torch.tensor([2.0]), torch.tensor([0.0])) == pytest.approx(2.0)
    logp = torch.tensor([-3.0, -5.0], dtype=torch.float64)
    assert model_objective(logp, nu_q).item() == pytest.approx(-4.3)


def test_nu_enters_l1_and_l2_with_opposite_signs():
    s = torch.zeros((), dtype=torch.float64, requires_grad=True)
    nu_q = torch.tensor([0.3, -0.2], dtype=torch.float64) + s
    nu_p = torch.tensor([0.1, 0.5], dtype=torch.float64)
    (g1,) = torch.autograd.grad(dual_objective(nu_q, nu_p), s)
    (g2,) = torch.autograd.grad(model_objective(torch.zeros(2, dtype=torch.float64), nu_q), s)
    assert g1.item() == 1.0 and g2.item() == -1.0


def test_zero_critic_gives_l1_minus_one_and_kl_zero():
    tr = make_trainer()
    ids, lengths = tr.sample_batch()
    assert tr.dual_step(ids, lengths) == -1.0
    fresh = make_trainer()
    assert kl_dual_estimate(fresh.model, ids, lengths, torch.Generator().manual_seed(0), samples=4) == 0.0


def test_zero_critic_model_step_is_reconstruction():
    tr = make_trainer()
    ids, lengths = tr.sample_batch()
    l2, recon = tr.model_step(ids, lengths)
    assert l2 == recon


@pytest.mark.parametrize("seed", range(20))
def test_dual_step_ascends_on_frozen_batch(seed):
    tr = make_trainer(seed=seed, lr_dual=1e-3)
    with torch.no_grad():  # move away from the zero head so every layer gets gradient
        tr.model.dual.mlp[-1].weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(seed))
    ids, lengths = tr.sample_batch()
    state = tr.generator.get_state()
    before = tr.dual_step(ids, lengths)
    tr.generator.set_state(state)
    after = tr.dual_step(ids, lengths)
    assert after > before


def test_parameter_partition():
    tr = make_trainer(prior="vamp", num_pseudo=2, pseudo_len=3)
    ids, lengths = tr.sample_batch()
    model_hash, dual_hash = digest(tr.model_params), digest(tr.dual_params)
    tr.dual_step(ids, lengths)
    assert digest(tr.model_params) == model_hash and digest(tr.dual_params) != dual_hash
    dual_hash = digest(tr.dual_params)
    tr.model_step(ids, lengths)
    assert digest(tr.dual_params) == dual_hash and digest(tr.model_params) != model_hash


def test_model_loss_has_zero_gradient_wrt_critic():
    tr = make_trainer()
    ids, lengths = tr.sample_batch()
    m = tr.model
    z = m.sample_posterior(ids, lengths, m.draw_xi(ids.shape[0], tr.generator))
    l2 = model_objective(m.decoder.log_prob(z, ids, lengths), m.dual(ids, lengths, z).detach())
    grads = torch.autograd.grad(l2, tr.dual_params, allow_unused=True)
    assert all(g is None or not g.any() for g in grads)


def test_gradient_clipping_bounds_norm():
    tr = make_trainer(clip_norm=0.01)
    for _ in range(3):
        tr.step()
        for params in (tr.model_params, tr.dual_params):
            total = torch.sqrt(sum((p.grad**2).sum() for p in params))
            assert total.item() <= 0.01 * (1 + 1e-6)
    p = [torch.nn.Parameter(torch.ones(3, dtype=torch.float64))]
    raw = _assign_grads((p[0] ** 2).sum() * 100, p, 1.0)
    assert raw == pytest.approx(200 * math.sqrt(3)) and p[0].grad.norm().item() == pytest.approx(1.0)


def test_q_equals_p_keeps_critic_flat():
    # the posterior is pinned to the standard wrapped normal, so the optimal critic is zero
    tr = make_trainer(posterior="explicit", batch_size=64, lr_dual=1e-3)
    with torch.no_grad():
        for head in (tr.model.encoder.direction, tr.model.encoder.log_sigma):
            head.weight.zero_()
            head.bias.zero_()
    for _ in range(300):
        tr.dual_step(*tr.sample_batch())
    ids, lengths = tr.sample_batch()
    gen = torch.Generator().manual_seed(99)
    m = tr.model
    with torch.no_grad():
        nu = m.dual(ids, lengths, m.sample_prior(ids.shape[0], gen))
    assert nu.abs().max().item() <= 0.1


def test_max_iter_zero_leaves_model_unchanged(tmp_path):
    tr = make_trainer()
    before = digest(tr.model.parameters())
    log = io.StringIO()
    assert tr.train(max_iter=0, log=log) == []
    assert digest(tr.model.parameters()) == before
    lines = log.getvalue().splitlines()
    assert lines[0].startswith("# config: ") and lines[1] == ",".join(CSV_COLUMNS)
    assert json.loads(lines[0][len("# config: "):]) == tr.config.to_dict()


def test_metrics_csv_is_bit_identical_across_runs():
    logs = []
    for _ in range(2):
        log = io.StringIO()
        make_trainer(max_iter=6).train(log=log)
        logs.append(log.getvalue())
    assert logs[0] == logs[1]
    rows = logs[0].splitlines()[2:]
    assert len(rows) == 6 and rows[0].startswith("1,-1.0,")


def test_timing_column():
    tr = make_trainer(timing=True)
    assert tr.step()["wall_ms"] > 0
    assert make_trainer().step()["wall_ms"] == 0.0


def test_checkpoint_format(tmp_path):
    tr = make_trainer()
    tr.train(max_iter=2)
    path = tmp_path / "ck.bin"
    tr.save(path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    assert header["iteration"] == 2 and header["config"] == tr.config.to_dict()
    names = [t["name"] for t in header["tensors"]]
    assert all(f"param/{n}" in names for n, _ in tr.model.named_parameters())
    assert any(n.startswith("optim/dual/") for n in names)
    total = sum(t["nbytes"] for t in header["tensors"])
    assert len(raw) == 16 + hlen + total
    _, tensors = read_checkpoint(path)
    assert torch.equal(tensors["param/decoder.plane_normal"], tr.model.decoder.plane_normal.detach())


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(InvalidArgumentError):
        read_checkpoint(p)


def test_checkpoint_resume_reproduces_next_ten_iterations(tmp_path):
    sents, _ = tiny_corpus()
    a = make_trainer(prior="vamp", num_pseudo=2, pseudo_len=3)
    a.train(max_iter=5)
    a.save(tmp_path / "ck.bin")
    b = Trainer.load(tmp_path / "ck.bin", sents)
    ra, rb = a.train(max_iter=15), b.train(max_iter=15)
    assert ra == rb and len(ra) == 10
    assert digest(a.model.parameters()) == digest(b.model.parameters())


def test_nonfinite_loss_saves_failure_checkpoint(tmp_path):
    tr = make_trainer()
    with torch.no_grad():
        tr.model.decoder.out.bias[0] = float("nan")
    with pytest.raises(NonFiniteError, match="iteration 0"):
        tr.train(max_iter=3, failure_checkpoint=tmp_path / "fail.bin")
    assert (tmp_path / "fail.bin").exists()


def test_empty_corpus_rejected():
    _, vocab = tiny_corpus()
    with pytest.raises(InvalidArgumentError):
        Trainer(TrainConfig(**SMALL), [], vocab)
