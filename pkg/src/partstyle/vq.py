"""Per-part VQ-VAEs: conv encoder, nearest-code quantizer, conv decoder.

Inputs are z-normalized per feature with statistics stored on the model, so
losses and reconstruction errors below are in normalized units.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import motion as M
from . import nn
from . import tensor as T
from .checkpoint import load_tensors, save_tensors
from .optim import Adam
from .tensor import ContractError, Tensor

FORMAT_VERSION = 1


class VqTrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


class ConfigError(ValueError):
    pass


@dataclass
class VqConfig:
    part: str
    codebook_size: int = 512
    code_dim: int | None = None  # 64 for root, 128 otherwise
    downsample: int = 4
    beta: float = 0.25
    hidden: int = 48
    lr: float = 4e-3
    codebook_lr: float = 1e-2
    warmup: int = 100
    steps: int = 2000
    batch: int = 24
    window: int = 64
    reinit_every: int = 200
    std_floor: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.part not in M.PART_WIDTHS:
            raise ConfigError(f"unknown part {self.part!r}")
        if self.code_dim is None:
            self.code_dim = 64 if self.part == "root" else 128
        if self.downsample != 4:
            raise ConfigError("the conv stack downsamples by exactly 4")
        if self.window % self.downsample:
            raise ConfigError("window must be a multiple of the downsample rate")

    @property
    def width(self) -> int:
        return M.PART_WIDTHS[self.part]


@dataclass(frozen=True)
class PartTokenSeq:
    part: str
    indices: tuple[int, ...]
    source_length: int

    def __len__(self) -> int:
        return len(self.indices)


class _ResBlock(nn.Module):
    def __init__(self, ch: int, rng):
        self.a = nn.Conv1d(ch, ch, 3, rng, padding=1)
        self.b = nn.Conv1d(ch, ch, 1, rng)

    def __call__(self, x):
        return x + self.b(T.relu(self.a(T.relu(x))))


class Encoder(nn.Module):
    def __init__(self, width: int, hidden: int, dim: int, rng):
        self.inp = nn.Conv1d(width, hidden, 3, rng, padding=1)
        self.res0 = _ResBlock(hidden, rng)
        self.down1 = nn.Conv1d(hidden, hidden, 4, rng, stride=2, padding=1)
        self.res1 = _ResBlock(hidden, rng)
        self.down2 = nn.Conv1d(hidden, hidden, 4, rng, stride=2, padding=1)
        self.res2 = _ResBlock(hidden, rng)
        self.out = nn.Conv1d(hidden, dim, 1, rng)

    def __call__(self, x):
        h = self.res0(self.inp(x))
        h = self.res1(self.down1(h))
        h = self.res2(self.down2(h))
        return self.out(T.relu(h))


class Decoder(nn.Module):
    def __init__(self, width: int, hidden: int, dim: int, rng):
        self.inp = nn.Conv1d(dim, hidden, 3, rng, padding=1)
        self.res0 = _ResBlock(hidden, rng)
        self.up1 = nn.Conv1d(hidden, hidden, 3, rng, padding=1)
        self.res1 = _ResBlock(hidden, rng)
        self.up2 = nn.Conv1d(hidden, hidden, 3, rng, padding=1)
        self.res2 = _ResBlock(hidden, rng)
        self.out = nn.Conv1d(hidden, width, 3, rng, padding=1)

    def __call__(self, z):
        h = self.res0(self.inp(z))
        h = self.res1(self.up1(T.upsample_nearest(h, 2)))
        h = self.res2(self.up2(T.upsample_nearest(h, 2)))
        return self.out(T.relu(h))


def quantize(codebook: np.ndarray, latents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest code per row under squared L2; ties go to the lowest index.

    Distances are screened with the expanded form, then every code within a
    rounding margin of the best is re-scored exactly.
    """
    cb = np.asarray(codebook, dtype=np.float64)
    z = np.asarray(latents, dtype=np.float64)
    if cb.ndim != 2 or cb.shape[0] == 0:
        raise ContractError("quantize needs a non-empty K x d codebook")
    if z.ndim != 2 or z.shape[1] != cb.shape[1]:
        raise ContractError(f"latent dim {z.shape} does not match codebook {cb.shape}")
    zz = (z * z).sum(1, keepdims=True)
    cc = (cb * cb).sum(1)
    approx = zz - 2.0 * z @ cb.T + cc[None]
    best = approx.min(1, keepdims=True)
    tol = 1e-9 * (zz + cc.max() + 1.0)
    near = approx <= best + tol
    idx = approx.argmin(1)
    for row in np.nonzero(near.sum(1) > 1)[0]:
        cand = np.nonzero(near[row])[0]
        exact = ((z[row][None] - cb[cand]) ** 2).sum(1)
        idx[row] = cand[np.argmin(exact)]
    return idx, np.asarray(codebook)[idx]


def vq_loss(x: Tensor, x_hat: Tensor, latent: Tensor, code: Tensor, beta: float):
    """(total, recon, codebook, commit); squared norms are averaged per element."""
    recon = T.mean(T.square(T.sub(x, x_hat)))
    codebook = T.mean(T.square(T.sub(T.stop_gradient(latent), code)))
    commit = T.mean(T.square(T.sub(latent, T.stop_gradient(code))))
    total = T.add(T.add(recon, codebook), T.mul(commit, beta))
    return total, recon, codebook, commit


class PartVqModel(nn.Module):
    def __init__(self, config: VqConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        self.encoder = Encoder(c.width, c.hidden, c.code_dim, rng)
        self.decoder = Decoder(c.width, c.hidden, c.code_dim, rng)
        self.codebook = nn.param(rng.normal(0.0, 1.0, size=(c.codebook_size, c.code_dim)))
        self.mean = np.zeros(c.width, dtype=np.float32)
        self.std = np.ones(c.width, dtype=np.float32)
        self.log: list[dict] = []

    @property
    def part(self) -> str:
        return self.config.part

    @property
    def r(self) -> int:
        return self.config.downsample

    def _check_width(self, x: np.ndarray) -> None:
        if x.ndim != 2 or x.shape[1] != self.config.width:
            raise ContractError(f"{self.part}: expected N x {self.config.width} input, got {x.shape}")

    def pad(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        target = math.ceil(n / self.r) * self.r
        if target == n:
            return x
        return np.concatenate([x, np.repeat(x[-1:], target - n, axis=0)], axis=0)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def encode(self, m_p: np.ndarray) -> np.ndarray:
        """Latents (ceil(N / r), d) for one part stream (N, width)."""
        x = np.asarray(m_p, dtype=np.float32)
        self._check_width(x)
        with T.no_grad():
            z = self.encoder(Tensor(self.normalize(self.pad(x)).T))
        return z.data.T.copy()

    def quantize(self, latents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return quantize(self.codebook.data, latents)

    def decode(self, indices, length: int | None = None) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        K = self.config.codebook_size
        if idx.size and (idx.min() < 0 or idx.max() >= K):
            raise IndexError(f"{self.part}: code index out of range [0, {K})")
        with T.no_grad():
            out = self.decoder(Tensor(self.codebook.data[idx].T))
        x = self.denormalize(out.data.T)
        return x[:length] if length is not None else x

    def tokenize(self, m_p: np.ndarray) -> PartTokenSeq:
        idx, _ = self.quantize(self.encode(m_p))
        return PartTokenSeq(self.part, tuple(int(i) for i in idx), int(np.asarray(m_p).shape[0]))

    def reconstruct(self, m_p: np.ndarray) -> np.ndarray:
        tok = self.tokenize(m_p)
        return self.decode(tok.indices, tok.source_length)

    def reconstruction_mse(self, streams: list[np.ndarray]) -> float:
        """Mean squared error per dimension, in normalized units, over whole clips."""
        err, count = 0.0, 0
        for s in streams:
            d = self.normalize(self.reconstruct(s)) - self.normalize(np.asarray(s, dtype=np.float32))
            err += float((d.astype(np.float64) ** 2).sum())
            count += d.size
        return err / count

    def forward_batch(self, x: np.ndarray):
        """Losses for a normalized batch (B, width, W) plus the chosen indices."""
        xt = Tensor(x)
        z = self.encoder(xt)  # (B, d, W / r)
        b, d, t = z.shape
        flat = T.reshape(T.transpose(z, (0, 2, 1)), (b * t, d))
        idx, _ = quantize(self.codebook.data, flat.data)
        code = T.getitem(self.codebook, idx)
        q = T.straight_through(flat, code)
        q = T.transpose(T.reshape(q, (b, t, d)), (0, 2, 1))
        x_hat = self.decoder(q)
        return vq_loss(xt, x_hat, flat, code, self.config.beta), idx, flat.data

    # -- persistence -----------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": asdict(self.config),
            "K": self.config.codebook_size,
            "d": self.config.code_dim,
            "r": self.r,
            "beta": self.config.beta,
            "part": self.part,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_tensors(d / f"vq_{self.part}.ckpt", self.state_dict())
        (d / f"vq_{self.part}.json").write_text(json.dumps(self.manifest(), indent=2))

    @classmethod
    def load(cls, directory: str | Path, part: str) -> "PartVqModel":
        d = Path(directory)
        man = json.loads((d / f"vq_{part}.json").read_text())
        if man.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"vq_{part}: format version {man.get('format_version')} unsupported")
        model = cls(VqConfig(**man["config"]))
        model.load_state_dict(load_tensors(d / f"vq_{part}.ckpt"))
        model.mean = np.asarray(man["mean"], dtype=np.float32)
        model.std = np.asarray(man["std"], dtype=np.float32)
        return model


def _stats(streams: list[np.ndarray], floor: float) -> tuple[np.ndarray, np.ndarray]:
    allf = np.concatenate(streams, axis=0).astype(np.float64)
    return allf.mean(0).astype(np.float32), np.maximum(allf.std(0), floor).astype(np.float32)


def _batch(streams: list[np.ndarray], cfg: VqConfig, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((cfg.batch, cfg.width, cfg.window), dtype=np.float32)
    for b in range(cfg.batch):
        s = streams[rng.integers(len(streams))]
        if s.shape[0] < cfg.window:
            s = np.concatenate([s, np.repeat(s[-1:], cfg.window - s.shape[0], axis=0)])
        start = rng.integers(0, s.shape[0] - cfg.window + 1)
        out[b] = s[start : start + cfg.window].T
    return out


def part_streams(motions: list[M.MotionSequence], part: str) -> list[np.ndarray]:
    return [M.partition(m).streams[part] for m in motions]


def train_vq(motions: list[M.MotionSequence], config: VqConfig, model: PartVqModel | None = None) -> PartVqModel:
    """Fit one part's VQ-VAE on the given clips; the loss curve lands in ``model.log``."""
    if not motions:
        raise ContractError("train_vq needs at least one clip")
    cfg = config
    model = model or PartVqModel(cfg)
    raw = part_streams(motions, cfg.part)
    model.mean, model.std = _stats(raw, cfg.std_floor)
    streams = [model.normalize(s).astype(np.float32) for s in raw]
    rng = np.random.default_rng(cfg.seed + 1)
    net = model.encoder.parameters() + model.decoder.parameters()
    opt = Adam(net, lr=cfg.lr)
    cb_opt = Adam([model.codebook], lr=cfg.codebook_lr)
    usage = np.zeros(cfg.codebook_size, dtype=np.int64)

    if cfg.steps > 0:
        # seed the codebook with encoder outputs so every code starts near the data
        with T.no_grad():
            z = model.encoder(Tensor(_batch(streams, cfg, rng)))
        lat = z.data.transpose(0, 2, 1).reshape(-1, cfg.code_dim)
        pick = rng.integers(0, lat.shape[0], size=cfg.codebook_size)
        model.codebook.data = (lat[pick] + rng.normal(0, 1e-2, size=(cfg.codebook_size, cfg.code_dim))).astype(np.float32)

    for step in range(1, cfg.steps + 1):
        x = _batch(streams, cfg, rng)
        opt.zero_grad()
        cb_opt.zero_grad()
        (total, recon, cb, commit), idx, lat = model.forward_batch(x)
        loss = float(total.data)
        if not math.isfinite(loss):
            raise VqTrainingError(step, f"non-finite loss {loss}")
        T.backward(total)
        decay = 0.5 * (1.0 + math.cos(math.pi * (step - 1) / cfg.steps))
        if step <= cfg.warmup:
            decay *= step / cfg.warmup
        opt.lr, cb_opt.lr = cfg.lr * decay, cfg.codebook_lr * decay
        opt.step()
        cb_opt.step()
        np.add.at(usage, idx, 1)
        if cfg.reinit_every and step % cfg.reinit_every == 0 and step < cfg.steps:
            dead = np.nonzero(usage == 0)[0]
            if dead.size:
                src = lat[rng.integers(0, lat.shape[0], size=dead.size)]
                model.codebook.data[dead] = src + rng.normal(0, 1e-2, size=src.shape).astype(np.float32)
            usage[:] = 0
        model.log.append({
            "step": step, "loss": loss, "recon": float(recon.data),
            "codebook": float(cb.data), "commit": float(commit.data),
        })
    return model


# ---------------------------------------------------------------------------
# six-part bundle


@dataclass
class VqBundle:
    models: dict[str, PartVqModel] = field(default_factory=dict)

    def __post_init__(self):
        rates = {m.r for m in self.models.values()}
        if len(rates) > 1:
            raise ConfigError(f"parts disagree on downsample rate: {sorted(rates)}")

    @property
    def codebook_size(self) -> int:
        sizes = {m.config.codebook_size for m in self.models.values()}
        if len(sizes) != 1:
            raise ConfigError(f"parts disagree on codebook size: {sorted(sizes)}")
        return sizes.pop()

    def save(self, directory: str | Path) -> None:
        for m in self.models.values():
            m.save(directory)

    @classmethod
    def load(cls, directory: str | Path) -> "VqBundle":
        return cls({p: PartVqModel.load(directory, p) for p in M.PARTS})


def tokenize(bundle: VqBundle | dict, m: M.MotionSequence) -> dict[str, PartTokenSeq]:
    models = bundle.models if isinstance(bundle, VqBundle) else bundle
    missing = [p for p in M.PARTS if p not in models]
    if missing:
        raise ConfigError(f"missing part models: {missing}")
    rates = {models[p].r for p in M.PARTS}
    if len(rates) != 1:
        raise ConfigError(f"parts disagree on downsample rate: {sorted(rates)}")
    parts = M.partition(m)
    return {p: models[p].tokenize(parts.streams[p]) for p in M.PARTS}


def detokenize(bundle: VqBundle | dict, tokens: dict[str, PartTokenSeq], length: int | None = None) -> M.MotionSequence:
    models = bundle.models if isinstance(bundle, VqBundle) else bundle
    lengths = {p: len(tokens[p]) for p in M.PARTS}
    if len(set(lengths.values())) != 1:
        raise ContractError(f"token sequences differ in length: {lengths}")
    if length is None:
        srcs = {tokens[p].source_length for p in M.PARTS}
        length = srcs.pop() if len(srcs) == 1 else None
    streams = {p: models[p].decode(tokens[p].indices, length).astype(np.float32) for p in M.PARTS}
    out = M.merge(M.BodyPartSet(streams))
    # contact labels come back continuous; keep them inside their [0, 1] range
    out.frames[:, M.CONTACT_SLICE] = np.clip(out.frames[:, M.CONTACT_SLICE], 0.0, 1.0)
    return out
