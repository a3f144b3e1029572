"""Pretraining and the WGAN-GP adversarial loop.

The critic minimises ``mean D(S_g) - mean D(S_r) + penalty``; the generator
minimises ``-mean D(S_g)``. Real-side states come from the frozen DAE, and
both sides pass through the same encoder over the live embedding matrix.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .corpus import EOS, PAD, Corpus, ConfigError, batch_iter, pad_batch, random_embeddings
from .diffcore import DimensionError, Tensor
from .nets import (ENCODER_KINDS, Critic, DenoisingAutoencoder, Generator, corrupt,
                   load_checkpoint, make_encoder, save_checkpoint, time_mask)
from .optim import Adam

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class TrainConfig:
    lam: float = 10.0
    n_critic: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_pretrain: float = 1e-3
    lr_adv: float = 1e-4
    batch: int = 64
    max_len: int = 40
    L: int = 10
    max_iters: int = 20000
    seed: int = 0
    encoder_kind: str = "sparse"
    d: int = 300
    n_layers: int = 2
    critic_filters: int = 300
    critic_widths: tuple = (5,)
    topk_k: int = 10
    topk_delta: float = 0.0
    gp_space: str = "sparse"
    select_abs: bool = False
    freeze_atoms: bool = False
    dae_epochs: int = 30
    gen_epochs: int = 30
    z_std: float = 1.0
    gen_len: int | None = None
    checkpoint_every: int = 1000
    wallclock_budget: float | None = None
    min_count: int = 1
    oov_std: float = 0.1
    embed_std: float = 0.1
    pretrain_batch: int | None = None

    def __post_init__(self):
        self.critic_widths = tuple(int(w) for w in self.critic_widths)
        self.validate()

    def validate(self) -> None:
        if self.lr_pretrain <= 0 or self.lr_adv <= 0 or self.adam_eps <= 0:
            raise ConfigError("learning rates and adam_eps must be positive")
        if self.n_critic < 1:
            raise ConfigError("n_critic must be at least 1")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.L < 1 or self.batch < 1 or self.d < 1:
            raise ConfigError("L, batch and d must be positive")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.gp_space not in ("sparse", "hidden"):
            raise ConfigError("gp_space must be 'sparse' or 'hidden'")
        if self.topk_k < 1:
            raise ConfigError("topk_k must be positive")
        if self.pretrain_batch is not None and self.pretrain_batch < 1:
            raise ConfigError("pretrain_batch must be positive")
        if self.embed_std <= 0 or self.oov_std <= 0:
            raise ConfigError("embedding scales must be positive")

    @property
    def batch_pretrain(self) -> int:
        return self.pretrain_batch or self.batch

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["critic_widths"] = list(self.critic_widths)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def adam(self, params, lr: float) -> Adam:
        return Adam(params, lr, (self.adam_beta1, self.adam_beta2), self.adam_eps)

    def encoder(self):
        return make_encoder(self.encoder_kind, self.L, self.topk_k, self.topk_delta,
                            self.select_abs, self.freeze_atoms)


@dataclass
class MetricsLog:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["iter"] <= self.records[-1]["iter"]:
            raise ValueError("metrics iterations must increase")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def without_wallclock(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "wallclock"} for r in self.records]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")

    @classmethod
    def read(cls, path) -> "MetricsLog":
        log = cls()
        p = Path(path)
        if p.exists():
            for line in p.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    log.append(json.loads(line))
        return log


def _check_finite(value: float, what: str, params: dict[str, Tensor]) -> None:
    if not math.isfinite(value):
        norms = {k: (float(np.linalg.norm(p.grad)) if p.grad is not None else None)
                 for k, p in params.items()}
        raise TrainingDivergedError(f"{what} is {value}; grad norms: {json.dumps(norms)}")


def _split(sentences: Sequence[Sequence[int]]):
    """Corpus rows ``[BOS, w..., EOS]`` -> (words, targets = words + EOS)."""
    words = [list(s[1:-1]) for s in sentences]
    targets = [list(s[1:]) for s in sentences]
    return words, targets


def _logits_loss(H: Tensor, E: Tensor, targets: np.ndarray) -> Tensor:
    logits = dc.matmul(H, dc.transpose(E))
    return dc.softmax_cross_entropy(logits, targets, targets != PAD)


def _zero_pad_row(E: Tensor) -> None:
    if E.grad is not None:
        E.grad[PAD] = 0.0


@dataclass
class PretrainResult:
    losses: list[float]
    perplexity: float
    accuracy: float


def build_embedding(config: TrainConfig, vocab_size: int, init: np.ndarray | None = None) -> Tensor:
    if init is None:
        init = random_embeddings(vocab_size, config.d, np.random.default_rng([config.seed, 0]),
                                 config.embed_std)
    if init.shape != (vocab_size, config.d):
        raise DimensionError(f"embedding init {init.shape} != {(vocab_size, config.d)}")
    return Tensor(np.array(init, dtype=np.float64), requires_grad=True, name="embedding")


def dae_accuracy(dae: DenoisingAutoencoder, sentences: Sequence[Sequence[int]], batch: int = 64) -> float:
    """Teacher-forced token accuracy of reconstructing clean inputs."""
    right = total = 0
    E = dae.embedding.data
    for i in range(0, len(sentences), batch):
        words, targets = _split(sentences[i:i + batch])
        enc, enc_len = pad_batch(words)
        tgt, _ = pad_batch(targets)
        with dc.no_grad():
            H = dae.hidden_states(enc, enc_len, tgt).data
        pred = np.argmax(H @ E.T, axis=-1)
        mask = tgt != PAD
        right += int(((pred == tgt) & mask).sum())
        total += int(mask.sum())
    return right / max(total, 1)


def pretrain_dae(corpus: Corpus, config: TrainConfig, embedding: Tensor | None = None,
                 epochs: int | None = None, log_every: int = 0) -> tuple[DenoisingAutoencoder, PretrainResult]:
    """Reconstruct clean sentences from corrupted ones (token cross-entropy)."""
    if corpus is None or len(corpus) == 0:
        raise ConfigError("pretrain_dae needs a non-empty corpus")
    epochs = config.dae_epochs if epochs is None else epochs
    E = embedding if embedding is not None else build_embedding(config, len(corpus.vocab))
    dae = DenoisingAutoencoder(E, np.random.default_rng([config.seed, 1]), config.n_layers, config.max_len)
    params = dict(dae.params())
    params["embedding"] = E
    opt = config.adam(params, config.lr_pretrain)
    noise = np.random.default_rng([config.seed, 2])
    losses = []
    for epoch in range(epochs):
        for ids, lengths in batch_iter(corpus.sentences, config.batch_pretrain, config.seed, epoch):
            rows = [list(r[:n]) for r, n in zip(ids, lengths)]
            words, targets = _split(rows)
            enc, enc_len = pad_batch([corrupt(w, noise) for w in words])
            tgt, _ = pad_batch(targets)
            opt.zero_grad()
            loss = _logits_loss(dae.hidden_states(enc, enc_len, tgt), E, tgt)
            _check_finite(loss.item(), "DAE loss", params)
            loss.backward()
            _zero_pad_row(E)
            opt.step()
            losses.append(loss.item())
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("dae epoch %d loss %.4f", epoch + 1, losses[-1])
    acc = dae_accuracy(dae, corpus.sentences, config.batch)
    ppl = math.exp(losses[-1]) if losses else float("nan")
    return dae, PretrainResult(losses, ppl, acc)


def generator_accuracy(gen: Generator, sentences: Sequence[Sequence[int]], z_std: float,
                       seed: int = 0, batch: int = 64) -> float:
    rng = np.random.default_rng([seed, 7])
    right = total = 0
    E = gen.embedding.data
    for i in range(0, len(sentences), batch):
        rows = sentences[i:i + batch]
        inputs, _ = pad_batch([list(s[:-1]) for s in rows])
        tgt, _ = pad_batch([list(s[1:]) for s in rows])
        z = rng.standard_normal((len(rows), gen.d)) * z_std
        with dc.no_grad():
            H = gen.teacher_forced(z, inputs).data
        pred = np.argmax(H @ E.T, axis=-1)
        mask = tgt != PAD
        right += int(((pred == tgt) & mask).sum())
        total += int(mask.sum())
    return right / max(total, 1)


def pretrain_generator(corpus: Corpus, config: TrainConfig, embedding: Tensor,
                       epochs: int | None = None, log_every: int = 0) -> tuple[Generator, PretrainResult]:
    """Teacher-forced next-word MLE from noise-initialised states.

    The shared embedding stays fixed so the pretrained DAE remains consistent.
    """
    if corpus is None or len(corpus) == 0:
        raise ConfigError("pretrain_generator needs a non-empty corpus")
    epochs = config.gen_epochs if epochs is None else epochs
    gen = Generator(embedding, np.random.default_rng([config.seed, 5]), config.n_layers)
    params = gen.params()
    opt = config.adam(params, config.lr_pretrain)
    noise = np.random.default_rng([config.seed, 6])
    losses = []
    for epoch in range(epochs):
        for ids, lengths in batch_iter(corpus.sentences, config.batch_pretrain, config.seed + 1, epoch):
            inputs = np.where(ids == EOS, PAD, ids)[:, :-1]
            tgt = ids[:, 1:]
            z = noise.standard_normal((ids.shape[0], gen.d)) * config.z_std
            opt.zero_grad()
            embedding.grad = None
            loss = _logits_loss(gen.teacher_forced(z, inputs), embedding, tgt)
            _check_finite(loss.item(), "generator MLE loss", params)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("generator epoch %d loss %.4f", epoch + 1, losses[-1])
    embedding.grad = None
    acc = generator_accuracy(gen, corpus.sentences, config.z_std, config.seed, config.batch)
    ppl = math.exp(losses[-1]) if losses else float("nan")
    return gen, PretrainResult(losses, ppl, acc)


# gradient penalty ------------------------------------------------------------------

def interpolate(a: np.ndarray, b: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Per-sample ``eps * a + (1 - eps) * b``."""
    if a.shape != b.shape:
        raise DimensionError(f"cannot interpolate shapes {a.shape} and {b.shape}")
    e = np.asarray(eps, dtype=np.float64).reshape((-1,) + (1,) * (a.ndim - 1))
    return e * a + (1.0 - e) * b


def penalty_at(points: np.ndarray, critic: Callable[[Tensor], Tensor], lam: float) -> Tensor:
    """``lam * mean_i (||grad_x D(x_i)|| - 1)^2``, differentiable w.r.t. critic parameters."""
    x = Tensor(points, requires_grad=True)
    scores = critic(x)
    (g,) = dc.grad(dc.sum_(scores), [x], create_graph=True)
    axes = tuple(range(1, g.ndim))
    norms = dc.sqrt(dc.sum_(dc.mul(g, g), axes) + 1e-24)
    dev = norms - 1.0
    return dc.scale(dc.mean(dc.mul(dev, dev)), lam)


def gradient_penalty(S_r, S_g, critic: Callable[[Tensor], Tensor], lam: float = 10.0,
                     rng: np.random.Generator | None = None, eps=None) -> Tensor:
    S_r = np.asarray(S_r.data if isinstance(S_r, Tensor) else S_r, dtype=np.float64)
    S_g = np.asarray(S_g.data if isinstance(S_g, Tensor) else S_g, dtype=np.float64)
    if S_r.shape != S_g.shape:
        raise DimensionError(f"S_r {S_r.shape} and S_g {S_g.shape} differ")
    if eps is None:
        eps = (rng or np.random.default_rng()).uniform(size=S_r.shape[0])
    return penalty_at(interpolate(S_r, S_g, eps), critic, lam)


# adversarial loop ---------------------------------------------------------------------

def checksum(module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.params().items()):
        h.update(k.encode())
        h.update(np.ascontiguousarray(v.data).tobytes())
    return h.hexdigest()


class GanTrainer:
    """Holds the models, optimisers, RNG and data cursor of one adversarial run."""

    def __init__(self, config: TrainConfig, corpus: Corpus, dae: DenoisingAutoencoder,
                 generator: Generator, critic: Critic | None = None):
        if dae.embedding is not generator.embedding:
            raise ValueError("generator and DAE must share the embedding tensor")
        self.config = config
        self.corpus = corpus
        self.dae = dae
        self.generator = generator
        self.embedding = generator.embedding
        self.critic = critic or Critic(np.random.default_rng([config.seed, 3]), config.d,
                                       config.critic_filters, config.critic_widths)
        self.encoder = config.encoder()
        self.rng = np.random.default_rng([config.seed, 4])
        self.opt_c = config.adam(self.critic.params(), config.lr_adv)
        gen_params = dict(generator.params())
        if not config.freeze_atoms:
            gen_params["embedding"] = self.embedding
        self.opt_g = config.adam(gen_params, config.lr_adv)
        self.T = config.gen_len or (corpus.max_length - 1)
        self.iter = 0
        self.epoch = 0
        self.batch_pos = 0
        self.log = MetricsLog()

    # data -----------------------------------------------------------------------
    def next_real_batch(self) -> list[list[int]]:
        while True:
            it = batch_iter(self.corpus.sentences, self.config.batch, self.config.seed + 2,
                            self.epoch, self.batch_pos)
            batch = next(it, None)
            if batch is not None:
                self.batch_pos += 1
                ids, lengths = batch
                return [list(r[1:n]) for r, n in zip(ids, lengths)]
            self.epoch += 1
            self.batch_pos = 0

    def real_side(self, targets: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        """``(H_r, S_r)`` for clean sentences, rows after EOS zeroed."""
        targets = [t[:self.T] for t in targets]
        with dc.no_grad():
            H, S, lengths = self.dae.reconstruct(targets, self.encoder, self.T)
            m = time_mask(lengths, self.T, self.config.d).data
        return H.data * m, S.data * m

    def fake_side(self, B: int, grad: bool):
        z = self.rng.standard_normal((B, self.config.d)) * self.config.z_std
        with dc.set_grad_enabled(grad):
            out = self.generator.generate(z, self.T, self.encoder, "differentiable")
            m = time_mask(out.lengths, self.T, self.config.d)
            return out, dc.mul(out.S, m), dc.mul(out.H, m)

    # iterations -------------------------------------------------------------------
    def critic_iteration(self, targets: Sequence[Sequence[int]]) -> dict:
        cfg = self.config
        H_r, S_r = self.real_side(targets)
        _, S_g, H_g = self.fake_side(len(targets), grad=False)
        S_g, H_g = S_g.data, H_g.data
        eps = self.rng.uniform(size=len(targets))
        self.opt_c.zero_grad()
        d_fake = dc.mean(self.critic(Tensor(S_g)))
        d_real = dc.mean(self.critic(Tensor(S_r)))
        if cfg.lam > 0:
            if cfg.gp_space == "sparse":
                points = interpolate(S_r, S_g, eps)
            else:
                with dc.no_grad():
                    points = self.encoder(Tensor(interpolate(H_r, H_g, eps)), self.embedding).data
            gp = penalty_at(points, self.critic, cfg.lam)
        else:
            gp = Tensor(0.0)
        loss = d_fake - d_real + gp
        _check_finite(loss.item(), "critic loss", self.critic.params())
        loss.backward()
        _check_finite(float(sum(np.sum(p.grad ** 2) for p in self.critic.params().values()
                                if p.grad is not None)), "critic gradient", self.critic.params())
        self.opt_c.step()
        return {"critic_loss": loss.item(), "wasserstein_estimate": d_real.item() - d_fake.item(),
                "penalty": gp.item()}

    def generator_iteration(self) -> dict:
        out, S_g, _ = self.fake_side(self.config.batch, grad=True)
        self.opt_g.zero_grad()
        self.opt_c.zero_grad()
        loss = dc.neg(dc.mean(self.critic(S_g)))
        _check_finite(loss.item(), "generator loss", self.opt_g.params)
        loss.backward()
        self.opt_c.zero_grad()
        _zero_pad_row(self.embedding)
        norms = [float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0
                 for p in self.opt_g.params.values()]
        _check_finite(sum(norms), "generator gradient", self.opt_g.params)
        self.opt_g.step()
        return {"gen_loss": loss.item(), "grad_norm_mean": float(np.mean(norms))}

    def step(self, t0: float) -> dict:
        crit = [self.critic_iteration(self.next_real_batch()) for _ in range(self.config.n_critic)]
        gen = self.generator_iteration()
        self.iter += 1
        record = {"iter": self.iter}
        for key in ("critic_loss", "wasserstein_estimate", "penalty"):
            record[key] = float(np.mean([c[key] for c in crit]))
        record.update(gen)
        record["wallclock"] = time.perf_counter() - t0
        self.log.append(record)
        return record

    # persistence ----------------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"embedding": self.embedding.data.copy()}
        arrays.update(self.dae.state_dict("dae."))
        arrays.update(self.generator.state_dict("gen."))
        arrays.update(self.critic.state_dict("critic."))
        arrays.update(self.opt_c.state_dict("opt_c."))
        arrays.update(self.opt_g.state_dict("opt_g."))
        return arrays

    def meta(self) -> dict:
        return {"kind": "gan", "iter": self.iter, "epoch": self.epoch, "batch_pos": self.batch_pos,
                "rng": self.rng.bit_generator.state, "config": self.config.to_dict(), "T": self.T}

    def save(self, path) -> None:
        save_checkpoint(path, self.state_arrays(), self.corpus.vocab, self.meta())

    def restore(self, path) -> None:
        ck = load_checkpoint(path)
        a = ck.arrays
        self.embedding.data = np.array(a["embedding"])
        self.dae.load_state_dict(a, "dae.")
        self.generator.load_state_dict(a, "gen.")
        self.critic.load_state_dict(a, "critic.")
        self.opt_c.load_state_dict(a, "opt_c.")
        self.opt_g.load_state_dict(a, "opt_g.")
        self.iter = ck.meta["iter"]
        self.epoch = ck.meta["epoch"]
        self.batch_pos = ck.meta["batch_pos"]
        self.rng.bit_generator.state = ck.meta["rng"]

    def run(self, run_dir=None, until: int | None = None) -> MetricsLog:
        """Train up to ``until`` (default ``max_iters``) generator iterations."""
        cfg = self.config
        until = cfg.max_iters if until is None else until
        run_dir = Path(run_dir) if run_dir is not None else None
        log_path = run_dir / "metrics.jsonl" if run_dir else None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            self.log.write(log_path)
            if self.iter == 0:
                self.save(run_dir / "ckpt_000000.npz")
        t0 = time.perf_counter()
        fh = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            while self.iter < until:
                if cfg.wallclock_budget is not None and time.perf_counter() - t0 > cfg.wallclock_budget:
                    logger.info("wallclock budget reached at iteration %d", self.iter)
                    break
                rec = self.step(t0)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                if run_dir is not None and cfg.checkpoint_every and self.iter % cfg.checkpoint_every == 0:
                    self.save(run_dir / f"ckpt_{self.iter:06d}.npz")
        finally:
            if fh:
                fh.close()
        if run_dir is not None:
            self.save(run_dir / "final.npz")
        return self.log


def train(config: TrainConfig, corpus: Corpus, dae: DenoisingAutoencoder, generator: Generator,
          run_dir=None, resume_from=None, until: int | None = None) -> tuple[GanTrainer, MetricsLog]:
    """Run the adversarial loop; optionally resume from a checkpoint written by a previous run."""
    trainer = GanTrainer(config, corpus, dae, generator)
    if resume_from is not None:
        trainer.restore(resume_from)
        if run_dir is not None:
            prior = MetricsLog.read(Path(run_dir) / "metrics.jsonl")
            trainer.log = MetricsLog([r for r in prior.records if r["iter"] <= trainer.iter])
    log = trainer.run(run_dir, until)
    return trainer, log


# pretrained models -------------------------------------------------------------------

@dataclass
class Pretrained:
    """Shared embedding with the models built on it (either may be missing)."""

    config: TrainConfig
    embedding: Tensor
    dae: DenoisingAutoencoder | None = None
    generator: Generator | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding.data.copy()}
        if self.dae is not None:
            out.update(self.dae.state_dict("dae."))
        if self.generator is not None:
            out.update(self.generator.state_dict("gen."))
        return out

    def save(self, path, vocab, extra: dict | None = None) -> None:
        meta = {"kind": "pretrained", "config": self.config.to_dict(),
                "has_dae": self.dae is not None, "has_generator": self.generator is not None}
        meta.update(extra or {})
        save_checkpoint(path, self.arrays(), vocab, meta)

    def clone(self) -> "Pretrained":
        return Pretrained.from_arrays(self.config, self.arrays())

    @classmethod
    def from_arrays(cls, config: TrainConfig, arrays: dict[str, np.ndarray]) -> "Pretrained":
        E = Tensor(np.array(arrays["embedding"], dtype=np.float64), requires_grad=True, name="embedding")
        if E.shape[1] != config.d:
            raise DimensionError(f"embedding width {E.shape[1]} != config d {config.d}")
        # initial values are overwritten by the stored arrays
        rng = np.random.default_rng(0)
        dae = gen = None
        if any(k.startswith("dae.") for k in arrays):
            dae = DenoisingAutoencoder(E, rng, config.n_layers, config.max_len)
            dae.load_state_dict(arrays, "dae.")
        if any(k.startswith("gen.") for k in arrays):
            gen = Generator(E, rng, config.n_layers)
            gen.load_state_dict(arrays, "gen.")
        return cls(config, E, dae, gen)

    @classmethod
    def load(cls, path) -> tuple["Pretrained", object, dict]:
        """Returns ``(models, vocab, meta)``."""
        ck = load_checkpoint(path)
        config = TrainConfig.from_dict(ck.meta["config"])
        return cls.from_arrays(config, ck.arrays), ck.vocab, ck.meta
