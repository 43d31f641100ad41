"""Command-line interface: ``apovae <subcommand> ...``.

Exit status is 0 on success, 2 for usage/config errors and 3 for data or
model errors. Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path
from typing import Sequence

import torch

from . import geometry as geo
from . import metrics
from .corpus import (
    EOS,
    Sentence,
    TreeCorpusConfig,
    build_vocab,
    encode_corpus,
    gen_tree_corpus,
    read_corpus,
    write_corpus,
)
from .errors import InvalidArgumentError, NonFiniteError, UnsupportedModeError
from .trainer import Trainer, TrainConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3
INTERP_STEPS = (0.0, 0.25, 0.5, 0.75, 1.0)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def parse_override(item: str) -> tuple[str, object]:
    """``KEY=VALUE`` with VALUE parsed as JSON when possible, else kept as a string."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise UsageError(f"override {item!r} is not KEY=VALUE")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path | None, overrides: Sequence[str] = ()) -> TrainConfig:
    """Read a JSON config (or defaults when ``path`` is None) and apply overrides."""
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise UsageError(f"{path}: top level must be a JSON object")
    for item in overrides:
        key, value = parse_override(item)
        data[key] = value
    try:
        return TrainConfig.from_dict(data)
    except (InvalidArgumentError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _read_rows(path):
    try:
        rows = read_corpus(path)
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc.strerror}") from exc
    if not rows:
        raise DataError(f"corpus {path} is empty")
    return rows


def _load_trainer(path, sentences=None) -> Trainer:
    try:
        return Trainer.load(path, sentences)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed checkpoint ({exc})") from exc


def _open_out(path):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", encoding="utf-8", newline="")


def _fmt(x: float) -> str:
    return repr(float(x))


# subcommands -----------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    cfg = TreeCorpusConfig(
        branching=args.branching, max_depth=args.max_depth,
        sentences_per_node=args.sentences_per_node, seed=args.seed,
    )
    rows = gen_tree_corpus(cfg)
    sidecar = write_corpus(rows, args.out)
    print(f"wrote {len(rows)} sentences to {args.out} (depths in {sidecar})", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.max_iter is not None:
        overrides.append(f"max_iter={args.max_iter}")
    config = load_config(args.config, overrides)
    rows = _read_rows(args.corpus)
    vocab = build_vocab([s for s, _ in rows], cap=config.vocab_cap)
    sentences = encode_corpus(rows, vocab)
    trainer = Trainer(config, sentences, vocab)
    failure = Path(str(args.checkpoint) + ".failed")
    with _open_out(args.out) as log:
        try:
            trainer.train(log=log, failure_checkpoint=failure)
        except NonFiniteError as exc:
            raise DataError(f"{exc}; state saved to {failure}") from exc
    trainer.save(args.checkpoint)
    return EXIT_OK


def _labeled_sentences(trainer: Trainer, path) -> list[Sentence]:
    return encode_corpus(_read_rows(path), trainer.vocab)


def cmd_eval(args) -> int:
    trainer = _load_trainer(args.checkpoint)
    sentences = _labeled_sentences(trainer, args.corpus)
    report = metrics.evaluate(trainer.model, sentences, samples=args.samples, seed=args.seed)
    with _open_out(args.out) as fh:
        fh.write(report.to_json() + "\n")
    return EXIT_OK


@torch.no_grad()
def _posterior_points(trainer: Trainer, sentences, seed: int, samples: int) -> torch.Tensor:
    """Ball points ``exp_0(mean log_0 z)`` summarizing each sentence's posterior."""
    gen = torch.Generator().manual_seed(seed)
    means = metrics.posterior_tangent_means(trainer.model, sentences, samples, gen)
    return geo.exp_map0(means, trainer.model.ball)


def cmd_embed(args) -> int:
    trainer = _load_trainer(args.checkpoint)
    rows = _read_rows(args.corpus)
    sentences = encode_corpus(rows, trainer.vocab)
    z = _posterior_points(trainer, sentences, args.seed, args.samples)
    norms = geo.distance(torch.zeros_like(z), z, trainer.model.ball)
    n = z.shape[-1]
    with _open_out(args.out) as fh:
        fh.write("\t".join(["sentence", "norm"] + [f"z{i}" for i in range(n)]) + "\n")
        for (text, _), r, point in zip(rows, norms.tolist(), z.tolist()):
            fh.write("\t".join([text, _fmt(r)] + [_fmt(v) for v in point]) + "\n")
    return EXIT_OK


def cmd_project(args) -> int:
    trainer = _load_trainer(args.checkpoint)
    rows = _read_rows(args.corpus)
    sentences = encode_corpus(rows, trainer.vocab)
    ball = trainer.model.ball
    z = _posterior_points(trainer, sentences, args.seed, args.samples)
    if z.shape[-1] > 2:
        plane = geo.BallConfig(c=ball.c, dim=2, boundary_eps=ball.boundary_eps)
        z = geo.exp_map0(geo.log_map0(z, ball)[..., :2], plane)
    with _open_out(args.out) as fh:
        fh.write("x,y,depth_or_len\n")
        for (text, depth), s, point in zip(rows, sentences, z.tolist()):
            label = depth if depth is not None else len(s.ids) - 2
            x, y = (point + [0.0])[:2]
            fh.write(f"{_fmt(x)},{_fmt(y)},{label}\n")
    return EXIT_OK


def _decode(trainer: Trainer, z: torch.Tensor, args, gen=None) -> str:
    ids = trainer.model.decoder.sample(z, args.max_len, generator=gen, temperature=args.temperature)
    return trainer.vocab.decode([i for i in ids if i != EOS])


def cmd_sample(args) -> int:
    if args.num < 1:
        raise UsageError("--num must be >= 1")
    trainer = _load_trainer(args.checkpoint)
    gen = torch.Generator().manual_seed(args.seed)
    with torch.no_grad():
        z = trainer.model.sample_prior(args.num, gen)
    with _open_out(args.out) as fh:
        for point in z:
            fh.write(_decode(trainer, point, args, gen) + "\n")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    trainer = _load_trainer(args.checkpoint)
    # each endpoint gets the same noise stream, so equal sentences map to equal points
    z = torch.cat([
        _posterior_points(trainer, [Sentence(trainer.vocab.encode(line))], args.seed, args.samples)
        for line in (args.start, args.end)
    ])
    gen = torch.Generator().manual_seed(args.seed)
    with _open_out(args.out) as fh:
        for t in INTERP_STEPS:
            point = geo.geodesic_interpolate(z[0], z[1], t, trainer.model.ball)
            fh.write(f"{t}\t{_decode(trainer, point, args, gen)}\n")
    return EXIT_OK


# parser ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="apovae", description="Adversarial Poincare VAE for sentences.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="write the synthetic phrase-tree corpus and its depth TSV")
    p.add_argument("--out", required=True, help="text corpus path; depths go to the .tsv sibling")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--branching", type=int, default=3)
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--sentences-per-node", type=int, default=1)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train a model and write a checkpoint plus metrics CSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", help="JSON config; omitted keys take their defaults")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="metrics CSV (default: stdout)")
    p.set_defaults(func=cmd_train)

    def model_cmd(name, help_, func, corpus=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        if corpus:
            p.add_argument("--corpus", required=True, help="plain text, or depth<TAB>sentence .tsv")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output path (default: stdout)")
        p.set_defaults(func=func)
        return p

    p = model_cmd("eval", "print an EvalReport JSON line", cmd_eval)
    p.add_argument("--samples", type=int, default=metrics.SAMPLES)
    p = model_cmd("embed", "TSV of sentence, hyperbolic norm and coordinates", cmd_embed)
    p.add_argument("--samples", type=int, default=metrics.SAMPLES)
    p = model_cmd("project", "CSV of 2-D embeddings for plotting", cmd_project)
    p.add_argument("--samples", type=int, default=metrics.SAMPLES)

    p = model_cmd("sample", "decode sentences from prior samples", cmd_sample, corpus=False)
    p.add_argument("--num", type=int, default=10)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-len", type=int, default=40)

    p = model_cmd("interpolate", "decode along the geodesic between two sentences", cmd_interpolate, corpus=False)
    p.add_argument("start")
    p.add_argument("end")
    p.add_argument("--samples", type=int, default=metrics.SAMPLES)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--max-len", type=int, default=40)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"apovae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InvalidArgumentError, UnsupportedModeError, NonFiniteError) as exc:
        print(f"apovae: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
