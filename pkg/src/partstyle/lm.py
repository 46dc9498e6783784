"""Small encoder-decoder transformer over the unified vocabulary."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .optim import Adam
from .tensor import ContractError, Tensor

NEG = np.float32(-1e9)
IGNORE = -1

TASK_IDS = ("part_text_to_motion", "part_motion_to_text", "global_to_parts", "compose", "parts_to_motion")


@dataclass(frozen=True)
class SpecialIds:
    bos: int
    eos: int
    pad: int

    @classmethod
    def of(cls, vocab) -> "SpecialIds":
        return cls(vocab.bos_id, vocab.eos_id, vocab.pad_id)


class LmTrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class SeqModelConfig:
    vocab_size: int
    enc_layers: int = 2
    dec_layers: int = 2
    dim: int = 128
    heads: int = 4
    ff: int = 256
    max_input: int = 512
    max_target: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.max_input > 512:
            raise ValueError("max_input may not exceed 512")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")


@dataclass(frozen=True)
class TrainingTask:
    task: str
    input_ids: tuple[int, ...]
    target_ids: tuple[int, ...]  # ends with eos

    def __post_init__(self):
        if self.task not in TASK_IDS:
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class LmTrainConfig:
    steps: int = 3000
    batch: int = 8
    lr: float | None = None  # stage default when None
    warmup: int = 100
    seed: int = 0
    log_every: int = 1
    stop_below_nll: float | None = None  # checked on the full dataset every eval_every steps
    eval_every: int = 100

    def lr_for(self, stage: str) -> float:
        if self.lr is not None:
            return self.lr
        return {"pretrain": 2e-4, "posttrain": 1e-4}[stage]


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, rng):
        self.q = nn.Linear(dim, dim, rng)
        self.k = nn.Linear(dim, dim, rng)
        self.v = nn.Linear(dim, dim, rng)
        self.o = nn.Linear(dim, dim, rng)
        self.heads = heads

    def _split(self, x: Tensor) -> Tensor:
        b, l, d = x.shape
        return T.transpose(T.reshape(x, (b, l, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, ctx: Tensor, mask: np.ndarray) -> Tensor:
        b, l, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // self.heads))
        p = T.softmax(T.add(scores, mask))
        out = T.reshape(T.transpose(T.matmul(p, v), (0, 2, 1, 3)), (b, l, d))
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ff: int, rng):
        self.a = nn.Linear(dim, ff, rng)
        self.b = nn.Linear(ff, dim, rng)

    def __call__(self, x):
        return self.b(T.relu(self.a(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: SeqModelConfig, rng):
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.attn = Attention(cfg.dim, cfg.heads, rng)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.ff = FeedForward(cfg.dim, cfg.ff, rng)

    def __call__(self, x, mask):
        h = self.ln1(x)
        x = x + self.attn(h, h, mask)
        return x + self.ff(self.ln2(x))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: SeqModelConfig, rng):
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.self_attn = Attention(cfg.dim, cfg.heads, rng)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.cross = Attention(cfg.dim, cfg.heads, rng)
        self.ln3 = nn.LayerNorm(cfg.dim)
        self.ff = FeedForward(cfg.dim, cfg.ff, rng)

    def __call__(self, y, memory, self_mask, cross_mask):
        h = self.ln1(y)
        y = y + self.self_attn(h, h, self_mask)
        y = y + self.cross(self.ln2(y), memory, cross_mask)
        return y + self.ff(self.ln3(y))


class Seq2Seq(nn.Module):
    def __init__(self, cfg: SeqModelConfig):
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.tok = nn.Embedding(cfg.vocab_size, cfg.dim, rng)
        self.src_pos = nn.Embedding(cfg.max_input, cfg.dim, rng)
        self.tgt_pos = nn.Embedding(cfg.max_target + 1, cfg.dim, rng)
        self.enc = [EncoderLayer(cfg, rng) for _ in range(cfg.enc_layers)]
        self.enc_ln = nn.LayerNorm(cfg.dim)
        self.dec = [DecoderLayer(cfg, rng) for _ in range(cfg.dec_layers)]
        self.dec_ln = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size, rng)
        self.log: list[dict] = []

    def encode(self, src: np.ndarray, src_len: np.ndarray) -> tuple[Tensor, np.ndarray]:
        b, l = src.shape
        if l > self.config.max_input:
            raise ContractError(f"input length {l} exceeds max {self.config.max_input}")
        pad = np.arange(l)[None, :] >= src_len[:, None]  # (B, L)
        key_mask = np.where(pad, NEG, np.float32(0))[:, None, None, :]
        x = self.tok(src) + self.src_pos(np.arange(l))
        for layer in self.enc:
            x = layer(x, key_mask)
        return self.enc_ln(x), key_mask

    def decode(self, memory: Tensor, key_mask: np.ndarray, tgt_in: np.ndarray) -> Tensor:
        b, l = tgt_in.shape
        if l > self.config.max_target + 1:
            raise ContractError(f"target length {l} exceeds max {self.config.max_target}")
        causal = np.triu(np.full((l, l), NEG, dtype=np.float32), k=1)[None, None]
        y = self.tok(tgt_in) + self.tgt_pos(np.arange(l))
        for layer in self.dec:
            y = layer(y, memory, causal, key_mask)
        return self.head(self.dec_ln(y))

    def forward(self, src: np.ndarray, src_len: np.ndarray, tgt_in: np.ndarray) -> Tensor:
        memory, mask = self.encode(src, src_len)
        return self.decode(memory, mask, tgt_in)

    # -- persistence -----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_tensors(path, self.state_dict())
        path.with_suffix(".json").write_text(json.dumps(asdict(self.config), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "Seq2Seq":
        path = Path(path)
        model = cls(SeqModelConfig(**json.loads(path.with_suffix(".json").read_text())))
        model.load_state_dict(load_tensors(path))
        return model


def lm_forward(model: Seq2Seq, input_ids, target_prefix) -> np.ndarray:
    """Logits (L, V) for one input and a decoder prefix that starts with bos."""
    src = np.asarray(input_ids, dtype=np.int64)[None]
    tgt = np.asarray(target_prefix, dtype=np.int64)[None]
    with T.no_grad():
        return model.forward(src, np.array([src.shape[1]]), tgt).data[0]


@dataclass
class Batch:
    src: np.ndarray
    src_len: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def n_tokens(self) -> int:
        return int((self.tgt_out != IGNORE).sum())


def make_batch(tasks: list[TrainingTask], bos_id: int, pad_id: int) -> Batch:
    if not tasks:
        raise ContractError("empty batch")
    ls = max(len(t.input_ids) for t in tasks)
    lt = max(len(t.target_ids) for t in tasks)
    b = len(tasks)
    src = np.full((b, ls), pad_id, dtype=np.int64)
    tin = np.full((b, lt), pad_id, dtype=np.int64)
    tout = np.full((b, lt), IGNORE, dtype=np.int64)
    for i, t in enumerate(tasks):
        src[i, : len(t.input_ids)] = t.input_ids
        tgt = list(t.target_ids)
        tin[i, : len(tgt)] = [bos_id] + tgt[:-1]
        tout[i, : len(tgt)] = tgt
    return Batch(src, np.array([len(t.input_ids) for t in tasks]), tin, tout)


@dataclass
class LossReport:
    loss: Tensor  # summed NLL per sequence, averaged over sequences
    per_token: float
    n_tokens: int


def lm_loss(model: Seq2Seq, batch: Batch) -> LossReport:
    logits = model.forward(batch.src, batch.src_len, batch.tgt_in)
    total = T.softmax_cross_entropy(logits, batch.tgt_out, ignore_index=IGNORE, reduction="sum")
    n_seq = batch.src.shape[0]
    n_tok = batch.n_tokens
    return LossReport(T.mul(total, 1.0 / n_seq), float(total.data) / max(n_tok, 1), n_tok)


def dataset_nll(model: Seq2Seq, tasks: list[TrainingTask], bos_id: int, pad_id: int, batch: int = 16) -> float:
    total, count = 0.0, 0
    with T.no_grad():
        for i in range(0, len(tasks), batch):
            rep = lm_loss(model, make_batch(tasks[i : i + batch], bos_id, pad_id))
            total += rep.per_token * rep.n_tokens
            count += rep.n_tokens
    return total / max(count, 1)


class TaskSampler:
    """Batches drawn with task ids mixed uniformly; order fixed by the seed."""

    def __init__(self, tasks: list[TrainingTask], seed: int):
        self.by_task: dict[str, list[TrainingTask]] = {}
        for t in tasks:
            self.by_task.setdefault(t.task, []).append(t)
        self.ids = sorted(self.by_task)
        self.rng = np.random.default_rng(seed)
        self.orders = {k: [] for k in self.ids}

    def _next(self, task: str) -> TrainingTask:
        if not self.orders[task]:
            self.orders[task] = list(self.rng.permutation(len(self.by_task[task])))
        return self.by_task[task][self.orders[task].pop()]

    def batch(self, size: int) -> list[TrainingTask]:
        picks = self.rng.integers(0, len(self.ids), size=size)
        return [self._next(self.ids[k]) for k in picks]


def train_lm(model: Seq2Seq, tasks: list[TrainingTask], stage: str, config: LmTrainConfig, ids: SpecialIds) -> Seq2Seq:
    """Full-parameter training; appends (step, loss, per-token NLL) rows to ``model.log``."""
    if stage not in ("pretrain", "posttrain"):
        raise ValueError(f"unknown stage {stage!r}")
    if not tasks:
        raise ContractError("train_lm needs at least one task")
    for t in tasks:
        if not t.target_ids or t.target_ids[-1] != ids.eos:
            raise ContractError(f"task target must end with eos ({t.task})")
        if max(t.input_ids + t.target_ids) >= model.config.vocab_size:
            raise ContractError(f"task ids exceed vocabulary size {model.config.vocab_size}")
    base_lr = config.lr_for(stage)
    opt = Adam(model.parameters(), lr=base_lr)
    sampler = TaskSampler(tasks, config.seed)
    for step in range(1, config.steps + 1):
        batch = make_batch(sampler.batch(config.batch), ids.bos, ids.pad)
        opt.zero_grad()
        rep = lm_loss(model, batch)
        value = float(rep.loss.data)
        if not math.isfinite(value):
            raise LmTrainingError(step, f"non-finite loss {value}")
        T.backward(rep.loss)
        opt.lr = base_lr * min(1.0, step / max(config.warmup, 1))
        opt.step()
        if step % config.log_every == 0:
            model.log.append({"stage": stage, "step": step, "loss": value, "nll": rep.per_token})
        if config.stop_below_nll is not None and step % config.eval_every == 0:
            if dataset_nll(model, tasks, ids.bos, ids.pad) < config.stop_below_nll:
                break
    return model


def write_curve(model: Seq2Seq, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "step", "loss", "nll"])
        for row in model.log:
            w.writerow([row["stage"], row["step"], f"{row['loss']:.6f}", f"{row['nll']:.6f}"])


@dataclass
class DecodeConfig:
    max_len: int = 256
    greedy: bool = True
    temperature: float = 1.0
    top_k: int = 0
    seed: int = 0


def _ln(x: np.ndarray, m: nn.LayerNorm, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps) * m.weight.data + m.bias.data


def _lin(x: np.ndarray, m: nn.Linear) -> np.ndarray:
    y = x @ m.weight.data
    return y + m.bias.data if m.bias is not None else y


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    b, l, d = x.shape
    return x.reshape(b, l, h, d // h).transpose(0, 2, 1, 3)


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask) -> np.ndarray:
    s = q @ k.transpose(0, 1, 3, 2) / np.float32(math.sqrt(q.shape[-1]))
    if mask is not None:
        s = s + mask
    s = np.exp(s - s.max(-1, keepdims=True))
    out = (s / s.sum(-1, keepdims=True)) @ v
    b, h, l, dh = out.shape
    return out.transpose(0, 2, 1, 3).reshape(b, l, h * dh)


class _CachedDecoder:
    """One-token-at-a-time decoding with cached keys and values; inference only."""

    def __init__(self, model: Seq2Seq, memory: np.ndarray, key_mask: np.ndarray):
        self.model = model
        self.h = model.config.heads
        self.key_mask = key_mask
        self.cross = [
            (_heads(_lin(memory, layer.cross.k), self.h), _heads(_lin(memory, layer.cross.v), self.h))
            for layer in model.dec
        ]
        self.past: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(model.dec)
        self.pos = 0

    def step(self, tokens: np.ndarray) -> np.ndarray:
        """Logits (B, V) after appending one token per row."""
        m = self.model
        y = m.tok.weight.data[tokens][:, None] + m.tgt_pos.weight.data[self.pos]
        for i, layer in enumerate(m.dec):
            a = _ln(y, layer.ln1)
            q = _heads(_lin(a, layer.self_attn.q), self.h)
            k = _heads(_lin(a, layer.self_attn.k), self.h)
            v = _heads(_lin(a, layer.self_attn.v), self.h)
            if self.past[i] is not None:
                k = np.concatenate([self.past[i][0], k], axis=2)
                v = np.concatenate([self.past[i][1], v], axis=2)
            self.past[i] = (k, v)
            y = y + _lin(_attend(q, k, v, None), layer.self_attn.o)
            q = _heads(_lin(_ln(y, layer.ln2), layer.cross.q), self.h)
            ck, cv = self.cross[i]
            y = y + _lin(_attend(q, ck, cv, self.key_mask), layer.cross.o)
            y = y + _lin(np.maximum(_lin(_ln(y, layer.ln3), layer.ff.a), 0), layer.ff.b)
        self.pos += 1
        return _lin(_ln(y, m.dec_ln), m.head)[:, 0]


def generate_tokens(model: Seq2Seq, input_ids, cfg: DecodeConfig, bos_id: int, eos_id: int) -> list[int]:
    return generate_batch(model, [input_ids], cfg, bos_id, eos_id, pad_id=eos_id)[0]


def generate_batch(model: Seq2Seq, inputs: list, cfg: DecodeConfig, bos_id: int, eos_id: int, pad_id: int) -> list[list[int]]:
    """Autoregressive decoding for several inputs at once; outputs exclude bos and eos."""
    b = len(inputs)
    ls = max(len(x) for x in inputs)
    src = np.full((b, ls), pad_id, dtype=np.int64)
    for i, x in enumerate(inputs):
        src[i, : len(x)] = x
    src_len = np.array([len(x) for x in inputs])
    greedy = cfg.greedy or cfg.temperature <= 0
    rng = np.random.default_rng(cfg.seed)
    cap = min(cfg.max_len, model.config.max_target)
    out = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    with T.no_grad():
        memory, mask = model.encode(src, src_len)
    dec = _CachedDecoder(model, memory.data, mask)
    last = np.full(b, bos_id, dtype=np.int64)
    for _ in range(cap):
        logits = dec.step(last).astype(np.float64)
        if greedy:
            nxt = logits.argmax(-1)
        else:
            nxt = np.empty(b, dtype=np.int64)
            z = logits / cfg.temperature
            for i in range(b):
                row = z[i]
                if cfg.top_k:
                    kth = np.sort(row)[-cfg.top_k]
                    row = np.where(row < kth, -np.inf, row)
                p = np.exp(row - row.max())
                p /= p.sum()
                nxt[i] = rng.choice(len(p), p=p)
        for i in range(b):
            if not done[i]:
                if nxt[i] == eos_id:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
        if done.all():
            break
        last = nxt
    return out
