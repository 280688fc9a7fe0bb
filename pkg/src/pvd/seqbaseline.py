"""Autoregressive vertex generation baseline.

Coordinates are quantized into bins and emitted one token at a time by a
causal transformer decoder that cross-attends to the same condition tokens as
the parallel model. Decoding is greedy and recomputes the whole prefix at
every step (no key/value cache), so its cost grows with the square of the
sequence length. Coordinates are absolute scene positions; there is no
center anchor.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import data as D
from . import geometry as geo
from . import layers as nn
from .autograd import Tensor
from .errors import InvalidArgument, TrainingDiverged
from .model import ConditionBatch, collate_condition, encode_condition, init_condition_encoder
from .params import AdamW, ParamStore, load_checkpoint, save_checkpoint
from . import training as T


@dataclass(frozen=True)
class CoordTokenizer:
    n_bins: int = 64

    def __post_init__(self):
        if self.n_bins < 2:
            raise InvalidArgument(f"need at least 2 bins, got {self.n_bins}")

    @property
    def bos(self) -> int:
        return self.n_bins

    @property
    def eos(self) -> int:
        return self.n_bins + 1

    @property
    def vocab(self) -> int:
        return self.n_bins + 2

    def quantize(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return np.clip(np.floor(v * self.n_bins), 0, self.n_bins - 1).astype(np.int64)

    def centers(self, bins) -> np.ndarray:
        return (np.asarray(bins, dtype=np.float64) + 0.5) / self.n_bins

    def tokenize(self, v) -> np.ndarray:
        """``[BOS, bin(v_0), ..., bin(v_{L-1}), EOS]``."""
        return np.concatenate([[self.bos], self.quantize(np.ravel(v)), [self.eos]]).astype(np.int64)

    def detokenize(self, tokens) -> np.ndarray:
        """Bin centers of the coordinate tokens between BOS and EOS."""
        t = np.asarray(tokens, dtype=np.int64)
        if t.size and t[0] == self.bos:
            t = t[1:]
        if t.size and t[-1] == self.eos:
            t = t[:-1]
        if np.any((t < 0) | (t >= self.n_bins)):
            raise InvalidArgument("coordinate sequence contains control tokens")
        return self.centers(t)


def absolute_vertex_vector(sample: D.SceneSample, n: int) -> np.ndarray:
    """Box corners then ``n`` contour points, in scene units (no anchor)."""
    contour = geo.sample_contour_vertices(sample.gt_polygon, n).vertices
    return np.concatenate([sample.gt_box.to_array(), contour.ravel()])


@dataclass(frozen=True)
class SeqConfig:
    n_vertices: int = 36
    d: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    fusion_layers: int = 2
    mlp_ratio: int = 4
    n_bins: int = 64

    def __post_init__(self):
        if self.d % self.n_heads:
            raise InvalidArgument(f"d={self.d} not divisible by {self.n_heads} heads")
        if self.n_blocks < 1 or self.n_vertices < 3:
            raise InvalidArgument("need n_blocks >= 1 and n_vertices >= 3")

    @property
    def n_coords(self) -> int:
        return 4 + 2 * self.n_vertices

    @property
    def max_len(self) -> int:
        return self.n_coords + 2

    def to_dict(self) -> dict:
        return asdict(self)


class SeqModel:
    """Causal decoder over coordinate tokens with cross-attention to the condition tokens."""

    def __init__(self, config: SeqConfig = SeqConfig(), seed: int = 0, dtype=np.float32):
        self.config = c = config
        self.dtype = np.dtype(dtype)
        self.tokenizer = CoordTokenizer(c.n_bins)
        p = self.params = ParamStore(seed=seed, dtype=dtype)
        init_condition_encoder(p, c)
        p.uniform("seq.tok", (self.tokenizer.vocab, c.d), 1.0)
        p.uniform("seq.pos", (c.max_len, c.d), 0.5)
        for l in range(c.n_blocks):
            nn.init_attention(p, f"seq.{l}.self", c.d, c.n_heads)
            nn.init_attention(p, f"seq.{l}.cross", c.d, c.n_heads)
            nn.init_mlp(p, f"seq.{l}.mlp", c.d, c.d * c.mlp_ratio)
        nn.init_linear(p, "seq.head", c.d, self.tokenizer.vocab)

    def encode(self, cond: ConditionBatch) -> tuple[Tensor, np.ndarray]:
        return encode_condition(self.params, self.config, cond, self.dtype)

    def logits(self, tokens: np.ndarray, fused: Tensor, mask: np.ndarray, counter: dict | None = None) -> Tensor:
        """Next-token logits ``(B, L, vocab)`` for every prefix position of ``tokens`` (B, L)."""
        c, p = self.config, self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        b, length = tokens.shape
        if length > c.max_len:
            raise InvalidArgument(f"sequence of {length} tokens exceeds {c.max_len}")
        h = ag.take(p["seq.tok"], tokens) + p["seq.pos"][:length]
        for l in range(c.n_blocks):
            z = ag.layer_norm(h)
            h = h + nn.attention(p, f"seq.{l}.self", z, z, c.n_heads, causal=True, counter=counter)
            h = h + nn.attention(p, f"seq.{l}.cross", ag.layer_norm(h), fused, c.n_heads,
                                 key_mask=mask, counter=counter)
            h = h + nn.mlp(p, f"seq.{l}.mlp", ag.layer_norm(h))
        return nn.linear(p, "seq.head", ag.layer_norm(h))


def sequence_loss(model: SeqModel, cond: ConditionBatch, tokens: np.ndarray) -> Tensor:
    """Teacher-forced cross-entropy of every token after BOS."""
    fused, mask = model.encode(cond)
    logits = model.logits(tokens[:, :-1], fused, mask)
    target = tokens[:, 1:]
    onehot = np.zeros((*target.shape, model.tokenizer.vocab), dtype=model.dtype)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    nll = -(ag.log_softmax(logits) * Tensor(onehot)).sum(axis=-1)
    return ag.mean(nll)


# -- decoding -------------------------------------------------------------------

@dataclass
class SeqPrediction:
    tokens: np.ndarray           # (B, n_coords + 2)
    vertex_vectors: np.ndarray   # (B, n_coords) absolute scene units
    boxes: np.ndarray            # (B, 4)
    contours: np.ndarray         # (B, N, 2)
    premature_eos: np.ndarray    # (B,) bool
    steps: int


def ar_generate(model: SeqModel, samples: Sequence[D.SceneSample] | None = None, cond: ConditionBatch | None = None,
                forced: np.ndarray | None = None, counter: dict | None = None) -> SeqPrediction:
    """Greedy decoding, one token per step, re-running the decoder on the whole prefix each time.

    ``forced`` (B, k) overrides the first k emitted tokens (earlier tokens are
    never revised, so a wrong prefix stays). A sample that emits EOS before all
    coordinates is flagged and padded with its last emitted bin.
    """
    tok = model.tokenizer
    c = model.config
    cond = cond if cond is not None else collate_condition(samples)
    b = len(cond)
    seq = np.full((b, 1), tok.bos, dtype=np.int64)
    stopped = np.zeros(b, dtype=bool)
    steps = 0
    with ag.no_grad():
        fused, mask = model.encode(cond)
        for s in range(c.n_coords + 1):
            logits = model.logits(seq, fused, mask, counter=counter).data[:, -1, :]
            steps += 1
            logits[:, tok.bos] = -np.inf
            nxt = logits.argmax(axis=1)
            if s == c.n_coords:
                break  # the final step only has to close the sequence
            if forced is not None and s < forced.shape[1]:
                nxt = np.asarray(forced[:, s], dtype=np.int64)
            early = (nxt == tok.eos) & ~stopped
            stopped |= early
            last = seq[:, -1] if s else np.full(b, tok.n_bins // 2)
            nxt = np.where(stopped, np.where(last == tok.bos, tok.n_bins // 2, last), nxt)
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    seq = np.concatenate([seq, np.full((b, 1), tok.eos)], axis=1)
    vv = np.stack([tok.detokenize(row) for row in seq])
    return SeqPrediction(seq, vv, vv[:, :4], vv[:, 4:].reshape(b, c.n_vertices, 2), stopped, steps)


# -- training -------------------------------------------------------------------

@dataclass(frozen=True)
class SeqTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 5e-2
    n_vertices: int = 36
    seed: int = 0
    checkpoint_every: int = 0
    max_steps: int = 0
    decay_at: float = 0.6
    decay_factor: float = 0.1
    d: int = 128
    n_blocks: int = 4
    n_heads: int = 4
    fusion_layers: int = 2
    n_bins: int = 64

    def __post_init__(self):
        for name in ("epochs", "batch_size", "d", "n_blocks", "n_heads"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be positive")

    def model_config(self) -> SeqConfig:
        return SeqConfig(n_vertices=self.n_vertices, d=self.d, n_blocks=self.n_blocks, n_heads=self.n_heads,
                         fusion_layers=self.fusion_layers, n_bins=self.n_bins)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SeqTrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown sequence config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SeqFitResult:
    checkpoint: Path
    log: Path
    steps: int
    history: list = field(default_factory=list)


def _state(model: SeqModel, opt: AdamW, cfg: SeqTrainConfig, step: int) -> tuple[dict, dict]:
    meta = {"kind": "seq", "step": step, "train_config": cfg.to_dict(), "model_config": model.config.to_dict()}
    return {**model.params.arrays(), **opt.state_arrays()}, meta


def load_seq_model(path) -> tuple[SeqModel, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "seq":
        raise InvalidArgument(f"{path}: not a sequential-model checkpoint")
    model = SeqModel(SeqConfig(**meta["model_config"]))
    model.params.load_arrays(arrays)
    return model, meta


def fit_seq(samples: Sequence[D.SceneSample], cfg: SeqTrainConfig, out_dir, resume=None, progress=None) -> SeqFitResult:
    """Teacher-forced training; writes ``model.ckpt`` and ``metrics.jsonl`` like the parallel trainer."""
    if not samples:
        raise InvalidArgument("empty training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = SeqModel(cfg.model_config(), seed=cfg.seed)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    cond = collate_condition(samples)
    tokens = np.stack([model.tokenizer.tokenize(absolute_vertex_vector(s, cfg.n_vertices)) for s in samples])
    start = 0
    log_path = out_dir / "metrics.jsonl"
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        model.params.load_arrays(arrays)
        start = int(meta["step"])
        opt.load_state(arrays, start)
        T._truncate_log(log_path, start)
    elif log_path.exists():
        log_path.unlink()
    n_total = T.total_steps(len(samples), cfg)
    history = []
    with open(log_path, "a", encoding="utf-8") as log:
        for step in range(start, n_total):
            lr = T.lr_at(step, n_total, cfg)
            idx = T.batch_indices(len(samples), cfg, step)
            model.params.zero_grad()
            loss = sequence_loss(model, cond.take(idx), tokens[idx])
            loss.backward()
            value = loss.item()
            gmax = model.params.max_abs_grad()
            if not (np.isfinite(value) and np.isfinite(gmax)):
                raise TrainingDiverged(f"training diverged at step {step}: loss={value}, max |grad|={gmax}")
            opt.step(lr)
            rec = {"step": step, "loss": value, "lr": lr}
            history.append(rec)
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            if progress is not None:
                progress(rec)
            done = step + 1
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < n_total:
                save_checkpoint(out_dir / f"step{done:06d}.ckpt", *_state(model, opt, cfg, done))
    ckpt = save_checkpoint(out_dir / "model.ckpt", *_state(model, opt, cfg, n_total))
    return SeqFitResult(ckpt, log_path, n_total, history)
