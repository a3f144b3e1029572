"""Desk-scale experiments on the synthetic grammar.

``run_toy`` pretrains the DAE and generator, records a baseline sample,
runs the adversarial loop and scores both samples against held-out text.
``ablate`` repeats the adversarial stage for several encoders from the same
pretrained models.
"""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .corpus import Corpus, Grammar, Vocab, grammar_rate, sentences_to_corpus, synth_grammar, tokenize
from .evalkit import bleu_n, self_bleu
from .nets import Generator, make_encoder
from .train import Pretrained, TrainConfig, pretrain_dae, pretrain_generator, train

logger = logging.getLogger(__name__)

TOY_CONFIG = TrainConfig(
    d=32, L=4, batch=16, n_critic=5, max_iters=200,
    lr_pretrain=1e-2, embed_std=1.0, pretrain_batch=32, dae_epochs=80, gen_epochs=40,
    checkpoint_every=100,
)
TOY_TRAIN = 500
TOY_HELDOUT = 200
TOY_SAMPLES = 200


def generate_texts(generator: Generator, vocab: Vocab, n: int, T: int, seed: int,
                   z_std: float = 1.0, batch: int = 100) -> list[list[str]]:
    """Greedy samples from ``n`` seeded noise vectors, cut at the first EOS."""
    rng = np.random.default_rng([seed, 8])
    z = rng.standard_normal((n, generator.d)) * z_std
    out: list[list[str]] = []
    with dc.no_grad():
        for i in range(0, n, batch):
            res = generator.generate(z[i:i + batch], T, make_encoder("none"), "sample")
            out.extend(vocab.decode(row) for row in res.ids)
    return out


def sample_report(texts: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                  grammar: Grammar | None) -> dict:
    nonempty = [t for t in texts if t]
    rep = {
        "n": len(texts),
        "n_empty": len(texts) - len(nonempty),
        "bleu2": bleu_n(nonempty, references, 2) if nonempty else 0.0,
        "self_bleu2": self_bleu(nonempty, 2) if len(nonempty) > 1 else None,
        "distinct": len({tuple(t) for t in texts}),
    }
    if grammar is not None:
        rep["grammar_rate"] = grammar_rate(texts, grammar)
    return rep


def toy_data(seed: int, n_train: int = TOY_TRAIN, n_heldout: int = TOY_HELDOUT):
    """``(train corpus, held-out token lists, grammar)`` from one grammar sample."""
    lines, grammar = synth_grammar(seed, n_train + n_heldout)
    corpus = sentences_to_corpus(lines[:n_train])
    heldout = [tokenize(s) for s in lines[n_train:]]
    return corpus, heldout, grammar


def pretrain_models(corpus: Corpus, config: TrainConfig) -> tuple[Pretrained, dict]:
    t0 = time.perf_counter()
    dae, dres = pretrain_dae(corpus, config)
    t1 = time.perf_counter()
    gen, gres = pretrain_generator(corpus, config, dae.embedding)
    t2 = time.perf_counter()
    info = {
        "dae": {"accuracy": dres.accuracy, "perplexity": dres.perplexity,
                "first_loss": dres.losses[0], "seconds": t1 - t0},
        "generator": {"accuracy": gres.accuracy, "perplexity": gres.perplexity,
                      "first_loss": gres.losses[0], "seconds": t2 - t1},
    }
    return Pretrained(config, dae.embedding, dae, gen), info


def adversarial_stage(models: Pretrained, corpus: Corpus, heldout, grammar, config: TrainConfig,
                      run_dir=None, n_samples: int = TOY_SAMPLES) -> dict:
    t0 = time.perf_counter()
    trainer, log = train(config, corpus, models.dae, models.generator, run_dir)
    seconds = time.perf_counter() - t0
    texts = generate_texts(models.generator, corpus.vocab, n_samples, trainer.T, config.seed, config.z_std)
    finite = all(math.isfinite(r[k]) for r in log.records
                 for k in ("critic_loss", "gen_loss", "wasserstein_estimate", "penalty"))
    last = log.records[-1] if log.records else {}
    return {
        "encoder_kind": config.encoder_kind,
        "iters": trainer.iter,
        "seconds": seconds,
        "all_finite": finite,
        "final": {k: v for k, v in last.items() if k != "wallclock"},
        "samples": sample_report(texts, heldout, grammar),
        "texts": [" ".join(t) for t in texts],
    }


def run_toy(seed: int = 0, config: TrainConfig | None = None, run_dir=None,
            n_train: int = TOY_TRAIN, n_heldout: int = TOY_HELDOUT, n_samples: int = TOY_SAMPLES) -> dict:
    """Full pipeline; the report compares the pretrained baseline with the trained generator."""
    config = (config or TOY_CONFIG).replace(seed=seed)
    t0 = time.perf_counter()
    corpus, heldout, grammar = toy_data(seed, n_train, n_heldout)
    models, info = pretrain_models(corpus, config)
    T = config.gen_len or corpus.max_length - 1
    base = generate_texts(models.generator, corpus.vocab, n_samples, T, seed, config.z_std)
    adv = adversarial_stage(models, corpus, heldout, grammar, config, run_dir, n_samples)
    report = {
        "seed": seed,
        "config": config.to_dict(),
        "vocab_size": len(corpus.vocab),
        "pretraining": info,
        "baseline": sample_report(base, heldout, grammar),
        "baseline_texts": [" ".join(t) for t in base],
        "trained": adv,
    }
    report["seconds"] = time.perf_counter() - t0
    return report


def ablate(seed: int = 0, kinds: Sequence[str] = ("sparse", "topk_static", "topk_dynamic"),
           config: TrainConfig | None = None, out_dir=None, n_samples: int = TOY_SAMPLES) -> dict:
    """Same data, same pretrained models, one adversarial run per encoder kind."""
    config = (config or TOY_CONFIG).replace(seed=seed)
    corpus, heldout, grammar = toy_data(seed)
    models, info = pretrain_models(corpus, config)
    T = config.gen_len or corpus.max_length - 1
    base = generate_texts(models.generator, corpus.vocab, n_samples, T, seed, config.z_std)
    results = {}
    for kind in kinds:
        run_dir = Path(out_dir) / kind if out_dir is not None else None
        res = adversarial_stage(models.clone(), corpus, heldout, grammar,
                                config.replace(encoder_kind=kind), run_dir, n_samples)
        res.pop("texts")
        results[kind] = res
    comparison = {
        "seed": seed,
        "config": config.to_dict(),
        "pretraining": info,
        "baseline": sample_report(base, heldout, grammar),
        "encoders": results,
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "comparison.json").write_text(json.dumps(comparison, indent=2, sort_keys=True))
    return comparison
