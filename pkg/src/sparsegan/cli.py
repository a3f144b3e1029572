"""``sparsegan`` command line.

Every command writes into a run directory (``--out``) and leaves a
``manifest.json`` there with the resolved config, the seed, content hashes of
the inputs and the list of outputs. Set ``SPARSEGAN_LOG`` to a logging level
name (``INFO``, ``DEBUG``) for progress output.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
import typing
from pathlib import Path

from . import diffcore as dc
from .corpus import ConfigError, load_corpus, load_embeddings, synth_grammar, tokenize
from .evalkit import evaluate
from .experiments import TOY_CONFIG, ablate, generate_texts
from .nets import ENCODER_KINDS
from .sparse import Dictionary, sparse_encode_seq
from .train import Pretrained, TrainConfig, build_embedding, pretrain_dae, pretrain_generator, train

logger = logging.getLogger("sparsegan")

LOG_ENV = "SPARSEGAN_LOG"
MANIFEST = "manifest.json"


class CommandError(Exception):
    """A user-facing failure: bad input, missing file, inconsistent checkpoint."""


def git_blob_hash(path) -> str:
    """Same digest ``git hash-object`` prints for the file."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class RunDir:
    """Output directory that forgets everything it created if the command fails."""

    def __init__(self, path):
        self.path = Path(path)
        self.created = not self.path.exists()
        self.before: set[Path] = set()
        self.outputs: list[str] = []

    def __enter__(self) -> "RunDir":
        if self.path.exists() and not self.path.is_dir():
            raise CommandError(f"--out {self.path} exists and is not a directory")
        self.path.mkdir(parents=True, exist_ok=True)
        self.before = set(self.path.rglob("*"))
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is None:
            return False
        if self.created:
            shutil.rmtree(self.path, ignore_errors=True)
            return False
        for p in sorted(set(self.path.rglob("*")) - self.before, reverse=True):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            else:
                p.unlink(missing_ok=True)
        return False

    def file(self, name: str) -> Path:
        if name not in self.outputs:
            self.outputs.append(name)
        return self.path / name

    def write_json(self, name: str, obj) -> Path:
        p = self.file(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p

    def manifest(self, command: str, config: TrainConfig | None, seed, inputs: dict[str, str],
                 extra: dict | None = None) -> None:
        outputs = sorted(set(self.outputs) | {p.relative_to(self.path).as_posix()
                                              for p in self.path.rglob("*")
                                              if p.is_file() and p.name != MANIFEST})
        body = {
            "command": command,
            "seed": seed,
            "config": config.to_dict() if config is not None else None,
            "inputs": {k: {"path": str(v), "hash": git_blob_hash(v)} for k, v in sorted(inputs.items())},
            "outputs": outputs,
        }
        body.update(extra or {})
        (self.path / MANIFEST).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")


# config flags ---------------------------------------------------------------------

_FLAG_NAMES = {"encoder_kind": "--encoder"}
_CHOICES = {"encoder_kind": [k.replace("_", "-") for k in ENCODER_KINDS], "gp_space": ["sparse", "hidden"]}
_HELP = {
    "lam": "gradient-penalty weight",
    "n_critic": "critic steps per generator step",
    "lr_pretrain": "learning rate for DAE and generator pretraining",
    "lr_adv": "learning rate for adversarial training",
    "batch": "adversarial batch size",
    "max_len": "maximum sentence length including BOS/EOS",
    "L": "atoms per sparse code",
    "max_iters": "generator iterations",
    "encoder_kind": "state-to-embedding encoder",
    "d": "hidden and embedding width",
    "critic_filters": "critic feature maps per filter width",
    "critic_widths": "critic filter widths",
    "topk_k": "K of the static TopK encoder",
    "topk_delta": "logit threshold of the dynamic TopK encoder",
    "gp_space": "where the gradient penalty interpolates",
    "select_abs": "select atoms by absolute inner product",
    "freeze_atoms": "keep the embedding fixed during adversarial training",
    "gen_len": "generated sequence length (default: longest training target)",
    "checkpoint_every": "iterations between checkpoints (0 disables)",
    "wallclock_budget": "stop adversarial training after this many seconds",
    "embed_std": "std of the random embedding init when no vectors file is given",
    "oov_std": "std for words missing from the vectors file",
    "pretrain_batch": "pretraining batch size (default: --batch)",
}


def _field_type(f: dataclasses.Field):
    hints = typing.get_type_hints(TrainConfig)
    t = hints[f.name]
    args = [a for a in typing.get_args(t) if a is not type(None)]
    return args[0] if args else t


def add_config_flags(parser: argparse.ArgumentParser, defaults: TrainConfig, skip=("seed",)) -> None:
    group = parser.add_argument_group("training config (flags override --config)")
    for f in dataclasses.fields(TrainConfig):
        if f.name in skip:
            continue
        flag = _FLAG_NAMES.get(f.name, "--" + f.name.replace("_", "-"))
        default = getattr(defaults, f.name)
        shown = list(default) if isinstance(default, tuple) else default
        if isinstance(shown, str):
            shown = shown.replace("_", "-")
        kw: dict = {"dest": f.name, "default": argparse.SUPPRESS,
                    "help": f"{_HELP.get(f.name, f.name.replace('_', ' '))} (default: {shown})"}
        t = _field_type(f)
        if t is bool:
            kw["action"] = argparse.BooleanOptionalAction
        elif t is tuple:
            kw.update(nargs="+", type=int)
        else:
            kw["type"] = t
            if f.name in _CHOICES:
                kw["choices"] = _CHOICES[f.name]
        group.add_argument(flag, **kw)
    group.add_argument("--config", type=Path, help="JSON file with TrainConfig keys")


def resolve_config(args, base: TrainConfig) -> TrainConfig:
    """``base``, then the ``--config`` file, then explicit flags."""
    data = base.to_dict()
    if getattr(args, "config", None) is not None:
        if not args.config.is_file():
            raise CommandError(f"config file not found: {args.config}")
        try:
            data.update(json.loads(args.config.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise CommandError(f"config file {args.config} is not valid JSON: {e}") from e
    for f in dataclasses.fields(TrainConfig):
        if f.name != "seed" and f.name in vars(args):
            data[f.name] = getattr(args, f.name)
    if isinstance(data.get("encoder_kind"), str):
        data["encoder_kind"] = data["encoder_kind"].replace("-", "_")
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    return TrainConfig.from_dict(data)


def _need_file(path: Path, what: str) -> Path:
    if not Path(path).is_file():
        raise CommandError(f"{what} not found: {path}")
    return Path(path)


def _load_models(path: Path) -> tuple[Pretrained, object, dict]:
    _need_file(path, "checkpoint")
    try:
        return Pretrained.load(path)
    except (KeyError, ValueError, OSError) as e:
        raise CommandError(f"cannot read checkpoint {path}: {e}") from e


# commands -------------------------------------------------------------------------

def cmd_synth_data(args) -> None:
    lines, grammar = synth_grammar(args.seed, args.n + args.heldout)
    with RunDir(args.out) as run:
        run.file("train.txt").write_text("\n".join(lines[:args.n]) + "\n", encoding="utf-8")
        if args.heldout:
            run.file("heldout.txt").write_text("\n".join(lines[args.n:]) + "\n", encoding="utf-8")
        run.file("grammar.json").write_text(grammar.to_json() + "\n", encoding="utf-8")
        run.manifest("synth-data", None, args.seed, {}, {"n": args.n, "heldout": args.heldout})


def cmd_pretrain_dae(args) -> None:
    config = resolve_config(args, TrainConfig())
    _need_file(args.corpus, "corpus")
    corpus = load_corpus(args.corpus, max_len=config.max_len, min_count=config.min_count)
    inputs = {"corpus": args.corpus}
    init = None
    if args.embeddings is not None:
        _need_file(args.embeddings, "embeddings file")
        emb = load_embeddings(args.embeddings, corpus.vocab, config.d, config.seed, config.oov_std)
        init = emb.matrix
        inputs["embeddings"] = args.embeddings
    with RunDir(args.out) as run:
        E = build_embedding(config, len(corpus.vocab), init)
        dae, res = pretrain_dae(corpus, config, E, log_every=1)
        Pretrained(config, E, dae).save(run.file("dae.npz"), corpus.vocab,
                                        {"T": corpus.max_length - 1})
        report = {"accuracy": res.accuracy, "perplexity": res.perplexity, "losses": res.losses}
        if args.embeddings is not None:
            report["oov"] = emb.oov
        run.write_json("pretrain_dae.json", report)
        run.manifest("pretrain-dae", config, config.seed, inputs)
    print(f"dae accuracy {res.accuracy:.4f} perplexity {res.perplexity:.4f}")


def _corpus_for(path: Path, vocab, config: TrainConfig):
    _need_file(path, "corpus")
    return load_corpus(path, vocab=vocab, max_len=config.max_len)


def cmd_pretrain_gen(args) -> None:
    models, vocab, _ = _load_models(args.dae)
    if models.dae is None:
        raise CommandError(f"{args.dae} holds no DAE")
    config = resolve_config(args, models.config)
    corpus = _corpus_for(args.corpus, vocab, config)
    with RunDir(args.out) as run:
        gen, res = pretrain_generator(corpus, config, models.embedding, log_every=1)
        Pretrained(config, models.embedding, models.dae, gen).save(
            run.file("pretrained.npz"), vocab, {"T": corpus.max_length - 1})
        run.write_json("pretrain_gen.json", {"accuracy": res.accuracy, "perplexity": res.perplexity,
                                             "losses": res.losses})
        run.manifest("pretrain-gen", config, config.seed, {"corpus": args.corpus, "dae": args.dae})
    print(f"generator accuracy {res.accuracy:.4f} perplexity {res.perplexity:.4f}")


def cmd_train(args) -> None:
    models, vocab, _ = _load_models(args.pretrained)
    if models.dae is None or models.generator is None:
        raise CommandError(f"{args.pretrained} must hold both a DAE and a generator")
    config = resolve_config(args, models.config)
    if (config.d, config.n_layers) != (models.config.d, models.config.n_layers):
        raise CommandError("d and n_layers must match the pretrained checkpoint")
    corpus = _corpus_for(args.corpus, vocab, config)
    inputs = {"corpus": args.corpus, "pretrained": args.pretrained}
    if args.resume is not None:
        inputs["resume"] = _need_file(args.resume, "resume checkpoint")
    with RunDir(args.out) as run:
        trainer, log = train(config, corpus, models.dae, models.generator, run.path, args.resume)
        run.manifest("train", config, config.seed, inputs, {"iters": trainer.iter})
    if log.records:
        last = log.records[-1]
        print(f"iter {last['iter']} critic_loss {last['critic_loss']:.4f} gen_loss {last['gen_loss']:.4f}")


def cmd_generate(args) -> None:
    models, vocab, meta = _load_models(args.checkpoint)
    if models.generator is None:
        raise CommandError(f"{args.checkpoint} holds no generator")
    if args.n < 1:
        raise CommandError("--n must be positive")
    T = args.length or meta.get("T") or models.config.gen_len
    if not T:
        raise CommandError("sequence length unknown; pass --length")
    texts = generate_texts(models.generator, vocab, args.n, int(T), args.seed, models.config.z_std)
    with RunDir(args.out) as run:
        run.file(args.name).write_text("".join(" ".join(t) + "\n" for t in texts), encoding="utf-8")
        run.manifest("generate", models.config, args.seed, {"checkpoint": args.checkpoint},
                     {"n": args.n, "length": int(T)})


def _read_sentences(path: Path) -> list[list[str]]:
    _need_file(path, "text file")
    return [tokenize(line) for line in path.read_text(encoding="utf-8").splitlines()]


def cmd_eval(args) -> None:
    cands = _read_sentences(args.candidates)
    refs = [r for r in _read_sentences(args.references) if r]
    if not cands or not refs:
        raise CommandError("candidates and references must be non-empty")
    nonempty = [c for c in cands if c]
    if not nonempty:
        raise CommandError("every candidate is empty")
    metrics = evaluate(nonempty, refs, args.orders)
    metrics["n_candidates"] = len(cands)
    metrics["n_empty_skipped"] = len(cands) - len(nonempty)
    with RunDir(args.out) as run:
        run.write_json("metrics.json", metrics)
        run.manifest("eval", None, None, {"candidates": args.candidates, "references": args.references})
    print(json.dumps(metrics["bleu"], sort_keys=True))


def cmd_encode(args) -> None:
    models, vocab, _ = _load_models(args.checkpoint)
    if models.dae is None:
        raise CommandError(f"{args.checkpoint} holds no DAE")
    words = tokenize(args.sentence)
    if not words:
        raise CommandError("sentence is empty")
    ids = vocab.encode(words)
    with dc.no_grad():
        H, _, _ = models.dae.reconstruct([ids], lambda h, E: h)
    dictionary = Dictionary(models.embedding.data, excluded=[0])
    _, codes = sparse_encode_seq(H.data[0], dictionary, args.L, models.config.select_abs)
    lines = []
    for t, (w, code) in enumerate(zip(words, codes)):
        rec = code.to_record(t)
        rec["word"] = w
        rec["atoms"] = [vocab.itos[i] for i in code.indices]
        lines.append(json.dumps(rec) + "\n")
    with RunDir(args.out) as run:
        run.file("codes.jsonl").write_text("".join(lines), encoding="utf-8")
        run.manifest("encode", None, None, {"checkpoint": args.checkpoint},
                     {"sentence": args.sentence, "L": args.L})


def cmd_ablate(args) -> None:
    config = resolve_config(args, TOY_CONFIG)
    kinds = [k.replace("-", "_") for k in args.encoders]
    with RunDir(args.out) as run:
        result = ablate(config.seed, kinds, config, run.path)
        run.file("comparison.json")
        run.manifest("ablate", config, config.seed, {}, {"encoders": kinds})
    summary = {k: v["samples"] for k, v in result["encoders"].items()}
    print(json.dumps(summary, indent=2, sort_keys=True))


# parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsegan", description=__doc__.split("\n\n")[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth-data", help="sample a toy corpus from the built-in grammar")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=500, help="training sentences (default: 500)")
    p.add_argument("--heldout", type=int, default=200, help="held-out sentences (default: 200)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("pretrain-dae", help="pretrain the denoising auto-encoder and embedding")
    p.add_argument("--corpus", type=Path, required=True, help="one sentence per line")
    p.add_argument("--embeddings", type=Path, help="GloVe-style text vectors (optional)")
    p.add_argument("--seed", type=int, default=None, help="run seed (default: 0)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    add_config_flags(p, TrainConfig())
    p.set_defaults(func=cmd_pretrain_dae)

    p = sub.add_parser("pretrain-gen", help="MLE-pretrain the generator on a DAE checkpoint")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--dae", type=Path, required=True, help="checkpoint written by pretrain-dae")
    p.add_argument("--seed", type=int, default=None, help="run seed (default: the DAE's)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    add_config_flags(p, TrainConfig())
    p.set_defaults(func=cmd_pretrain_gen)

    p = sub.add_parser("train", help="adversarial training")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--pretrained", type=Path, required=True, help="checkpoint written by pretrain-gen")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--resume", type=Path, help="checkpoint of an earlier run in the same --out")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    add_config_flags(p, TrainConfig())
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="greedy samples from a generator checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, default=200, help="number of sentences (default: 200)")
    p.add_argument("--length", type=int, default=None, help="steps per sample (default: from checkpoint)")
    p.add_argument("--name", default="samples.txt", help="output file name (default: samples.txt)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="BLEU and Self-BLEU of candidates against references")
    p.add_argument("--candidates", type=Path, required=True)
    p.add_argument("--references", type=Path, required=True)
    p.add_argument("--orders", type=int, nargs="+", default=[2, 3, 4, 5],
                   help="BLEU orders (default: 2 3 4 5)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("encode", help="dump the sparse codes of a sentence's DAE states")
    p.add_argument("--checkpoint", type=Path, required=True, help="any checkpoint holding a DAE")
    p.add_argument("--sentence", required=True)
    p.add_argument("--L", type=int, default=10, help="atoms per code (default: 10)")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("ablate", help="toy experiment once per encoder kind")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--encoders", nargs="+", default=["sparse", "topk-static", "topk-dynamic"],
                   choices=_CHOICES["encoder_kind"])
    p.add_argument("--out", type=Path, required=True, help="run directory")
    add_config_flags(p, TOY_CONFIG)
    p.set_defaults(func=cmd_ablate)
    return parser


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CommandError, ConfigError, OSError, ValueError, dc.DimensionError) as e:
        print(f"sparsegan {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
