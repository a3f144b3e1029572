"""Generator, denoising auto-encoder, CNN critic and the TopK baseline encoders."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .corpus import BOS, EOS, PAD, SPECIALS, ConfigError, Vocab, pad_batch
from .diffcore import DimensionError, EmptyInputError, Function, Tensor
from .sparse import sparse_encode_tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sparsegan-checkpoint/1"
# Never emitted as generated words.
NON_OUTPUT_IDS = (PAD, BOS)


class Module:
    """Named parameter container."""

    def params(self) -> dict[str, Tensor]:
        raise NotImplementedError

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data.copy() for k, v in self.params().items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, t in self.params().items():
            arr = arrays[prefix + k]
            if arr.shape != t.shape:
                raise DimensionError(f"{prefix + k}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self.params().values():
            t.grad = None


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


# LSTM ------------------------------------------------------------------------

def init_lstm(rng: np.random.Generator, in_dim: int, hidden: int) -> tuple[Tensor, Tensor]:
    k = 1.0 / np.sqrt(hidden)
    W = rng.uniform(-k, k, size=(in_dim + hidden, 4 * hidden))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    return _param(W), _param(b)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, W: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step. Gate order in ``W``: input, forget, cell, output."""
    n = h.shape[-1]
    if W.shape[0] != x.shape[-1] + n:
        raise DimensionError(f"lstm: input width {x.shape[-1]} + {n} != weight rows {W.shape[0]}")
    z = dc.add_bias(dc.matmul(dc.concat([x, h]), W), b)
    i = dc.sigmoid(z[..., :n])
    f = dc.sigmoid(z[..., n:2 * n])
    g = dc.tanh(z[..., 2 * n:3 * n])
    o = dc.sigmoid(z[..., 3 * n:])
    c_new = f * c + i * g
    return o * dc.tanh(c_new), c_new


class StackedLSTM(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, hidden: int, n_layers: int = 2):
        self.hidden = hidden
        self.layers = []
        for layer in range(n_layers):
            self.layers.append(init_lstm(rng, in_dim if layer == 0 else hidden, hidden))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"lstm{i}.W"] = W
            out[f"lstm{i}.b"] = b
        return out

    def step(self, x: Tensor, states: list[tuple[Tensor, Tensor]]):
        new_states = []
        inp = x
        for (W, b), (h, c) in zip(self.layers, states):
            h, c = lstm_cell(inp, h, c, W, b)
            new_states.append((h, c))
            inp = h
        return inp, new_states


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape))


def vocab_logits(h, E):
    """Inner product of a state with every embedding row."""
    if isinstance(h, Tensor):
        return dc.matmul(h, dc.transpose(E))
    return np.asarray(E) @ np.asarray(h)


def greedy_ids(h: np.ndarray, E: np.ndarray) -> np.ndarray:
    logits = h @ E.T
    logits[..., list(NON_OUTPUT_IDS)] = -np.inf
    return np.argmax(logits, axis=-1)


def lengths_from_ids(ids: np.ndarray) -> np.ndarray:
    """Rows up to and including the first EOS (or all rows)."""
    T = ids.shape[1]
    is_eos = ids == EOS
    first = np.where(is_eos.any(axis=1), is_eos.argmax(axis=1) + 1, T)
    return first.astype(np.int64)


def time_mask(lengths: np.ndarray, T: int, d: int) -> Tensor:
    m = (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)
    return Tensor(np.repeat(m[:, :, None], d, axis=2))


# TopK baselines ---------------------------------------------------------------

def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def topk_static_mask(logits: np.ndarray, K: int, excluded=()) -> np.ndarray:
    if K <= 0:
        raise ConfigError(f"K must be positive, got {K}")
    logits = np.array(logits, dtype=np.float64)
    if len(excluded):
        logits[..., list(excluded)] = -np.inf
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :K]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def topk_dynamic_mask(logits: np.ndarray, delta: float = 0.0, excluded=()) -> np.ndarray:
    logits = np.array(logits, dtype=np.float64)
    if len(excluded):
        logits[..., list(excluded)] = -np.inf
    mask = logits > delta
    none = ~mask.any(axis=-1)
    if np.any(none):
        arg = np.argmax(logits, axis=-1)
        fallback = np.zeros_like(mask)
        np.put_along_axis(fallback, arg[..., None], True, axis=-1)
        mask = np.where(none[..., None], fallback, mask)
    return mask


def topk_static_weights(logits, K: int = 10, excluded=()) -> np.ndarray:
    """Renormalised softmax mass on the K largest logits (zero elsewhere)."""
    logits = np.asarray(logits, dtype=np.float64)
    return _masked_softmax(logits, topk_static_mask(logits, K, excluded))


def topk_dynamic_weights(logits, delta: float = 0.0, excluded=()) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    return _masked_softmax(logits, topk_dynamic_mask(logits, delta, excluded))


def topk_static_encode(h, E, K: int = 10, excluded=()) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    return topk_static_weights(E @ np.asarray(h), K, excluded) @ E


def topk_dynamic_encode(h, E, delta: float = 0.0, excluded=()) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    return topk_dynamic_weights(E @ np.asarray(h), delta, excluded) @ E


class TopKMix(Function):
    """``softmax restricted to a selected word set`` times the embeddings.

    The selected set is treated as constant in backward.
    """

    twice_differentiable = False
    mode = "static"
    K = 10
    delta = 0.0
    excluded: tuple = ()

    def forward(self, H, E):
        logits = H @ E.T
        if self.mode == "static":
            mask = topk_static_mask(logits, self.K, self.excluded)
        else:
            mask = topk_dynamic_mask(logits, self.delta, self.excluded)
        self.q = _masked_softmax(logits, mask)
        return self.q @ E

    def backward(self, g):
        H, E = self.inputs
        q = self.q
        gq = g.data @ E.data.T
        gl = q * (gq - np.sum(q * gq, axis=-1, keepdims=True))
        gH = gl @ E.data
        gE = None
        if E.requires_grad:
            q2 = q.reshape(-1, q.shape[-1])
            gE = q2.T @ g.data.reshape(-1, g.shape[-1]) + gl.reshape(q2.shape).T @ H.data.reshape(-1, H.shape[-1])
        return Tensor(gH), (Tensor(gE) if gE is not None else None)


# encoder factory -----------------------------------------------------------------

ENCODER_KINDS = ("sparse", "topk_static", "topk_dynamic", "none")


def make_encoder(kind: str, L: int = 10, K: int = 10, delta: float = 0.0,
                 use_abs: bool = False, freeze_atoms: bool = False) -> Callable[[Tensor, Tensor], Tensor]:
    """Map ``(H[..., d], E)`` to the representation the critic sees."""
    excluded = (PAD,)
    if kind == "sparse":
        return lambda H, E: sparse_encode_tensor(H, E, L, excluded, use_abs, freeze_atoms)
    if kind in ("topk_static", "topk_dynamic"):
        mode = kind.split("_")[1]

        def encode(H, E):
            E_in = E.detach() if freeze_atoms else E
            return TopKMix.apply(H, E_in, mode=mode, K=K, delta=delta, excluded=excluded)
        return encode
    if kind == "none":
        return lambda H, E: H
    raise ValueError(f"unknown encoder kind {kind!r}; expected one of {ENCODER_KINDS}")


# generator -------------------------------------------------------------------------

@dataclass
class GenOutput:
    H: Tensor
    S: Tensor
    ids: np.ndarray
    lengths: np.ndarray


class Generator(Module):
    """Stacked LSTM decoder started from a noise vector.

    ``z`` becomes the initial hidden state of every layer; cells start at zero.
    """

    def __init__(self, embedding: Tensor, rng: np.random.Generator, n_layers: int = 2):
        self.embedding = embedding
        d = embedding.shape[1]
        self.d = d
        self.lstm = StackedLSTM(rng, d, d, n_layers)

    def params(self) -> dict[str, Tensor]:
        return self.lstm.params()

    def initial_state(self, z) -> list[tuple[Tensor, Tensor]]:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.shape[-1] != self.d:
            raise DimensionError(f"z width {z.shape[-1]} != hidden width {self.d}")
        return [(z, _zeros(*z.shape)) for _ in self.lstm.layers]

    def step(self, states, v_prev: Tensor):
        """One stacked step; returns the top hidden state and the new states."""
        if v_prev.shape[-1] != self.d:
            raise DimensionError(f"input width {v_prev.shape[-1]} != {self.d}")
        return self.lstm.step(v_prev, states)

    def generate(self, z, T: int, encoder: Callable | None = None,
                 mode: str = "differentiable") -> GenOutput:
        """Unroll ``T`` steps from ``z`` (shape ``[B, d]``).

        ``differentiable`` feeds back the previous encoded state; ``sample``
        feeds back the embedding of the previous greedy word.
        """
        if T < 1:
            raise ValueError("T must be at least 1")
        if mode not in ("differentiable", "sample"):
            raise ValueError(f"unknown generation mode {mode!r}")
        encoder = encoder or make_encoder("sparse")
        E = self.embedding
        z = z if isinstance(z, Tensor) else Tensor(z)
        B = z.shape[0]
        states = self.initial_state(z)
        v = dc.gather(E, np.full(B, BOS))
        hs, ss, ids = [], [], []
        for _ in range(T):
            h, states = self.step(states, v)
            s = encoder(h, E)
            w = greedy_ids(h.data, E.data)
            hs.append(h)
            ss.append(s)
            ids.append(w)
            v = s if mode == "differentiable" else dc.gather(E, w)
        ids_arr = np.stack(ids, axis=1)
        return GenOutput(dc.stack(hs, axis=1), dc.stack(ss, axis=1), ids_arr, lengths_from_ids(ids_arr))

    def teacher_forced(self, z, inputs: np.ndarray) -> Tensor:
        """Top hidden states ``[B, T, d]`` when fed the given ids."""
        states = self.initial_state(z)
        emb = dc.gather(self.embedding, inputs)
        hs = []
        for t in range(inputs.shape[1]):
            h, states = self.step(states, emb[:, t])
            hs.append(h)
        return dc.stack(hs, axis=1)


def generate_sequence(generator: Generator, z, T: int, L: int = 10, mode: str = "differentiable"):
    """Single-sequence convenience: returns ``(H_g [T, d], S_g [T, d], ids [T])``."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    out = generator.generate(Tensor(z[None, :]), T, make_encoder("sparse", L), mode)
    return out.H[0], out.S[0], out.ids[0]


# denoising auto-encoder ----------------------------------------------------------------

def corrupt(sentence: Sequence[int], rng) -> list[int]:
    """Drop each word with probability 1/2, then shuffle consecutive survivor pairs.

    At least one word always survives. Pairs keep their internal order.
    """
    sentence = list(sentence)
    n = len(sentence)
    if n == 0:
        raise EmptyInputError("cannot corrupt an empty sentence")
    keep = np.asarray(rng.random(n)) >= 0.5
    if not keep.any():
        keep[int(rng.integers(n))] = True
    survivors = [w for w, k in zip(sentence, keep) if k]
    groups = [survivors[i:i + 2] for i in range(0, len(survivors), 2)]
    order = rng.permutation(len(groups))
    return [w for gi in order for w in groups[int(gi)]]


def _masked_update(m: Tensor, new: Tensor, old: Tensor) -> Tensor:
    return m * new + (1.0 - m) * old


class DenoisingAutoencoder(Module):
    """Bi-LSTM encoder over the (corrupted) words, LSTM decoder with teacher forcing.

    The encoder summary initialises the decoder states and is also appended
    to the decoder input at every step.
    """

    def __init__(self, embedding: Tensor, rng: np.random.Generator, n_layers: int = 2,
                 max_len: int = 40):
        self.embedding = embedding
        d = embedding.shape[1]
        self.d = d
        self.max_len = max_len
        self.enc = []
        for layer in range(n_layers):
            in_dim = d if layer == 0 else 2 * d
            self.enc.append((init_lstm(rng, in_dim, d), init_lstm(rng, in_dim, d)))
        k = 1.0 / np.sqrt(2 * d)
        self.bridge = [(_param(rng.uniform(-k, k, size=(2 * d, d))), _param(np.zeros(d)))
                       for _ in range(n_layers)]
        # decoder input at every step: word embedding plus the encoder summary
        self.dec = StackedLSTM(rng, 3 * d, d, n_layers)

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, ((Wf, bf), (Wb, bb)) in enumerate(self.enc):
            out.update({f"enc{i}f.W": Wf, f"enc{i}f.b": bf, f"enc{i}b.W": Wb, f"enc{i}b.b": bb})
        for i, (W, b) in enumerate(self.bridge):
            out[f"bridge{i}.W"] = W
            out[f"bridge{i}.b"] = b
        out.update({"dec." + k: v for k, v in self.dec.params().items()})
        return out

    def encode(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Summary ``[B, 2d]``: last forward state and first backward state of the top layer."""
        B, T = ids.shape
        d = self.d
        step_mask = [Tensor(np.repeat((lengths > t).astype(np.float64)[:, None], d, axis=1))
                     for t in range(T)]
        xs = [dc.gather(self.embedding, ids[:, t]) for t in range(T)]
        for (Wf, bf), (Wb, bb) in self.enc:
            h, c = _zeros(B, d), _zeros(B, d)
            fwd = []
            for t in range(T):
                hn, cn = lstm_cell(xs[t], h, c, Wf, bf)
                h = _masked_update(step_mask[t], hn, h)
                c = _masked_update(step_mask[t], cn, c)
                fwd.append(h)
            h_last = h
            h, c = _zeros(B, d), _zeros(B, d)
            bwd = [None] * T
            for t in reversed(range(T)):
                hn, cn = lstm_cell(xs[t], h, c, Wb, bb)
                h = _masked_update(step_mask[t], hn, h)
                c = _masked_update(step_mask[t], cn, c)
                bwd[t] = h
            xs = [dc.concat([fwd[t], bwd[t]]) for t in range(T)]
        return dc.concat([h_last, bwd[0]])

    def decode(self, summary: Tensor, inputs: np.ndarray) -> Tensor:
        """Top decoder states ``[B, T, d]`` under teacher forcing on ``inputs``."""
        states = [(dc.tanh(dc.add_bias(dc.matmul(summary, W), b)), _zeros(summary.shape[0], self.d))
                  for W, b in self.bridge]
        emb = dc.gather(self.embedding, inputs)
        hs = []
        for t in range(inputs.shape[1]):
            h, states = self.dec.step(dc.concat([emb[:, t], summary]), states)
            hs.append(h)
        return dc.stack(hs, axis=1)

    def hidden_states(self, enc_ids: np.ndarray, enc_lengths: np.ndarray,
                      targets: np.ndarray) -> Tensor:
        """Decoder states for padded target rows; decoder input is BOS then targets shifted."""
        dec_in = np.concatenate([np.full((targets.shape[0], 1), BOS), targets[:, :-1]], axis=1)
        dec_in = np.where(dec_in == EOS, PAD, dec_in)
        return self.decode(self.encode(enc_ids, enc_lengths), dec_in)

    def reconstruct(self, sentences: Sequence[Sequence[int]], encoder: Callable | None = None,
                    T: int | None = None) -> tuple[Tensor, Tensor, np.ndarray]:
        """States and encoded states for clean sentences.

        Each sentence is its target tokens (words, optionally ending in EOS).
        Returns ``(H_r [B, T, d], S_r [B, T, d], lengths)``.
        """
        targets = []
        for s in sentences:
            s = [w for w in s if w not in (PAD, BOS)]
            if not s:
                raise EmptyInputError("cannot reconstruct an empty sentence")
            if len(s) > self.max_len:
                logger.warning("sentence of %d tokens truncated to %d", len(s), self.max_len)
                s = s[:self.max_len]
            targets.append(s)
        words = [[w for w in s if w != EOS] or [EOS] for s in targets]
        enc_ids, enc_len = pad_batch(words)
        tgt, lengths = pad_batch(targets, T)
        H = self.hidden_states(enc_ids, enc_len, tgt)
        encoder = encoder or make_encoder("sparse")
        return H, encoder(H, self.embedding), lengths


def dae_reconstruct(dae: DenoisingAutoencoder, sentence: Sequence[int], L: int = 10):
    """Single sentence: ``(H_r [T, d], S_r [T, d])``."""
    H, S, _ = dae.reconstruct([sentence], make_encoder("sparse", L))
    return H[0], S[0]


# critic ---------------------------------------------------------------------------

class Critic(Module):
    """conv1d -> relu -> max over time -> affine, one score per sequence."""

    def __init__(self, rng: np.random.Generator, d: int, n_filters: int = 300,
                 widths: Sequence[int] = (5,)):
        self.d = d
        self.widths = tuple(widths)
        self.convs = []
        for w in self.widths:
            std = 1.0 / np.sqrt(w * d)
            self.convs.append((_param(rng.normal(0.0, std, size=(w, d, n_filters))),
                               _param(np.zeros(n_filters))))
        k = 1.0 / np.sqrt(n_filters * len(self.widths))
        self.W = _param(rng.uniform(-k, k, size=(n_filters * len(self.widths), 1)))
        self.b = _param(np.zeros(1))

    def params(self) -> dict[str, Tensor]:
        out = {}
        for w, (F, fb) in zip(self.widths, self.convs):
            out[f"conv{w}.filters"] = F
            out[f"conv{w}.b"] = fb
        out["W"] = self.W
        out["b"] = self.b
        return out

    def __call__(self, S: Tensor) -> Tensor:
        """Scores ``[B]`` for ``S [B, T, d]``; short sequences are padded with zero rows."""
        if S.shape[-1] != self.d:
            raise DimensionError(f"critic input width {S.shape[-1]} != {self.d}")
        B, T, _ = S.shape
        need = max(self.widths)
        if T < need:
            S = dc.concat([S, Tensor(np.zeros((B, need - T, self.d)))], axis=1)
        feats = [dc.max_over_time(dc.relu(dc.add_bias(dc.conv1d(S, F), fb))) for F, fb in self.convs]
        pooled = feats[0] if len(feats) == 1 else dc.concat(feats)
        return dc.reshape(dc.add_bias(dc.matmul(pooled, self.W), self.b), (B,))


def critic_score(critic: Critic, S: Tensor) -> Tensor:
    """Score of a single ``[T, d]`` sequence."""
    return dc.reshape(critic(dc.reshape(S, (1,) + S.shape)), ())


# checkpoints ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    vocab: Vocab | None
    meta: dict


def _text_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8)


def save_checkpoint(path, arrays: dict[str, np.ndarray], vocab: Vocab | None = None,
                    meta: dict | None = None) -> None:
    """Write a ``.npz`` container: little-endian float64 tensors plus JSON sidecars.

    Reserved keys: ``__format__``, ``__vocab__`` and ``__meta__`` (UTF-8 bytes).
    """
    payload = {"__format__": _text_array(CHECKPOINT_FORMAT),
               "__meta__": _text_array(json.dumps(meta or {}, sort_keys=True))}
    if vocab is not None:
        payload["__vocab__"] = _text_array(vocab.to_json())
    for k in sorted(arrays):
        a = np.asarray(arrays[k])
        payload[k] = a.astype("<f8") if a.dtype.kind == "f" else a.astype(a.dtype.newbyteorder("<"))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        fmt = bytes(z["__format__"]).decode()
        if fmt != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {fmt!r}")
        meta = json.loads(bytes(z["__meta__"]).decode())
        vocab = Vocab.from_json(bytes(z["__vocab__"]).decode()) if "__vocab__" in z else None
        arrays = {k: np.array(z[k]) for k in z.files if not k.startswith("__")}
    return Checkpoint(arrays, vocab, meta)


__all__ = [
    "Critic", "DenoisingAutoencoder", "Generator", "GenOutput", "StackedLSTM", "TopKMix",
    "corrupt", "critic_score", "dae_reconstruct", "generate_sequence", "lstm_cell",
    "make_encoder", "topk_dynamic_encode", "topk_static_encode", "vocab_logits",
    "save_checkpoint", "load_checkpoint", "SPECIALS",
]
