"""Foot skating, retrieval and style-recognition metrics with small in-repo evaluators."""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import motion as M
from . import nn
from . import tensor as T
from .optim import Adam
from .tensor import ContractError, Tensor

TOE_JOINTS = (10, 11)


# ---------------------------------------------------------------------------
# foot skating


@dataclass(frozen=True)
class FsConfig:
    contact_height: float = 0.05  # m
    skate_speed: float = 0.10  # m/s
    fps: float = float(M.FPS)

    def __post_init__(self):
        if self.contact_height <= 0 or self.skate_speed <= 0 or self.fps <= 0:
            raise ValueError("FsConfig thresholds and fps must be positive")


def skating_frames(positions: np.ndarray, cfg: FsConfig = FsConfig()) -> np.ndarray:
    """Boolean per frame from world joints (N, 22, 3).

    Horizontal toe speed uses the backward difference; frame 0 borrows frame 1's
    speed so a uniformly sliding clip counts every frame.
    """
    toes = np.asarray(positions, dtype=np.float64)[:, TOE_JOINTS]
    n = toes.shape[0]
    speed = np.zeros((n, len(TOE_JOINTS)))
    if n > 1:
        step = np.linalg.norm(np.diff(toes[..., [0, 2]], axis=0), axis=-1) * cfg.fps
        speed[1:] = step
        speed[0] = step[0]
    low = toes[..., 1] < cfg.contact_height
    return ((speed > cfg.skate_speed) & low).any(axis=1)


def fs_ratio(m: M.MotionSequence, cfg: FsConfig = FsConfig()) -> float:
    """Fraction of frames in which a grounded toe slides faster than the threshold."""
    flags = skating_frames(M.recover_global_positions(m), cfg)
    return float(flags.mean())


# ---------------------------------------------------------------------------
# evaluator models

_WORD = re.compile(r"[a-z]+|\d+(?:\.\d+)?")


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def motion_summary(m: M.MotionSequence | np.ndarray) -> np.ndarray:
    """Length-independent per-feature mean and std.

    Frame-difference statistics are left out on purpose: they mostly measure
    jitter, which any lossy decoder smooths away, and a classifier leaning on
    them reads every decoded clip as slow.
    """
    f = m.frames if isinstance(m, M.MotionSequence) else np.asarray(m)
    f = f.astype(np.float64)
    return np.concatenate([f.mean(0), f.std(0)]).astype(np.float32)


@dataclass
class EmbedderConfig:
    dim: int = 64
    hidden: int = 128
    steps: int = 2000
    batch: int = 64
    lr: float = 2e-3
    temperature: float = 0.1
    class_weight: float = 1.0
    seed: int = 0


class _Mlp(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, rng):
        self.a = nn.Linear(d_in, hidden, rng)
        self.b = nn.Linear(hidden, d_out, rng)

    def __call__(self, x):
        return self.b(T.relu(self.a(x)))


class EvalEmbedders(nn.Module):
    """Motion and text encoders into a shared unit-norm space plus a style head."""

    def __init__(self, lexicon: list[str], styles: list[str], feat_mean: np.ndarray, feat_std: np.ndarray, config: EmbedderConfig):
        if len(styles) < 2:
            raise ContractError("the style classifier needs at least two styles")
        self.config = config
        self.lexicon = list(lexicon)
        self.word_index = {w: i for i, w in enumerate(self.lexicon)}
        self.styles = list(styles)
        self.feat_mean = np.asarray(feat_mean, dtype=np.float32)
        self.feat_std = np.asarray(feat_std, dtype=np.float32)
        rng = np.random.default_rng(config.seed)
        self.motion_net = _Mlp(len(self.feat_mean), config.hidden, config.dim, rng)
        self.text_net = _Mlp(len(self.lexicon), config.hidden, config.dim, rng)
        self.classifier = nn.Linear(config.dim, len(self.styles), rng)
        self.report: dict = {}

    # -- features --------------------------------------------------------------

    def _motion_x(self, motions) -> np.ndarray:
        x = np.stack([motion_summary(m) for m in motions])
        return (x - self.feat_mean) / self.feat_std

    def _text_x(self, texts) -> np.ndarray:
        x = np.zeros((len(texts), len(self.lexicon)), dtype=np.float32)
        for i, t in enumerate(texts):
            for w in words(t):
                j = self.word_index.get(w)
                if j is not None:
                    x[i, j] = 1.0
        return x

    def _motion_emb(self, x: np.ndarray) -> Tensor:
        return T.l2_normalize(self.motion_net(Tensor(x)))

    def _text_emb(self, x: np.ndarray) -> Tensor:
        return T.l2_normalize(self.text_net(Tensor(x)))

    # -- inference -------------------------------------------------------------

    def embed_motions(self, motions) -> np.ndarray:
        with T.no_grad():
            return self._motion_emb(self._motion_x(motions)).data.copy()

    def embed_texts(self, texts) -> np.ndarray:
        with T.no_grad():
            return self._text_emb(self._text_x(texts)).data.copy()

    def predict_styles(self, motions) -> list[str]:
        with T.no_grad():
            logits = self.classifier(self._motion_emb(self._motion_x(motions))).data
        return [self.styles[i] for i in logits.argmax(-1)]

    # -- persistence -----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        from .checkpoint import save_tensors

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_tensors(d / "embedders.ckpt", self.state_dict())
        meta = {
            "lexicon": self.lexicon,
            "styles": self.styles,
            "feat_mean": self.feat_mean.tolist(),
            "feat_std": self.feat_std.tolist(),
            "config": asdict(self.config),
            "report": self.report,
        }
        (d / "embedders.json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, directory: str | Path) -> "EvalEmbedders":
        from .checkpoint import load_tensors

        d = Path(directory)
        meta = json.loads((d / "embedders.json").read_text())
        out = cls(meta["lexicon"], meta["styles"], np.array(meta["feat_mean"]), np.array(meta["feat_std"]), EmbedderConfig(**meta["config"]))
        out.load_state_dict(load_tensors(d / "embedders.ckpt"))
        out.report = meta["report"]
        return out


@dataclass
class LabeledMotion:
    motion: M.MotionSequence
    text: str
    style: str


def _info_nce(a: Tensor, b: Tensor, temperature: float) -> Tensor:
    logits = T.mul(T.matmul(a, T.transpose(b)), 1.0 / temperature)
    target = np.arange(a.shape[0])
    return T.add(T.softmax_cross_entropy(logits, target), T.softmax_cross_entropy(T.transpose(logits), target))


def init_embedders(train: list[LabeledMotion], config: EmbedderConfig = EmbedderConfig()) -> EvalEmbedders:
    styles = sorted({s.style for s in train})
    if len(styles) < 2:
        raise ContractError(f"need at least two styles, got {styles}")
    lexicon = sorted({w for s in train for w in words(s.text)})
    feats = np.stack([motion_summary(s.motion) for s in train]).astype(np.float64)
    return EvalEmbedders(lexicon, styles, feats.mean(0), np.maximum(feats.std(0), 1e-3), config)


def train_eval_embedders(
    train: list[LabeledMotion], held_out: list[LabeledMotion] | None = None, config: EmbedderConfig = EmbedderConfig()
) -> EvalEmbedders:
    """Contrastive text/motion training with in-batch negatives plus style cross-entropy."""
    model = init_embedders(train, config)
    rng = np.random.default_rng(config.seed + 1)
    mx = model._motion_x([s.motion for s in train])
    tx = model._text_x([s.text for s in train])
    y = np.array([model.styles.index(s.style) for s in train])
    opt = Adam(model.parameters(), lr=config.lr)
    b = min(config.batch, len(train))
    for step in range(1, config.steps + 1):
        idx = rng.choice(len(train), size=b, replace=False)
        opt.zero_grad()
        me = model._motion_emb(mx[idx])
        te = model._text_emb(tx[idx])
        loss = _info_nce(me, te, config.temperature) if b > 1 else T.mul(T.tsum(T.square(T.sub(me, te))), 1.0)
        ce = T.softmax_cross_entropy(model.classifier(me), y[idx])
        total = T.add(loss, T.mul(ce, config.class_weight))
        if not math.isfinite(float(total.data)):
            raise RuntimeError(f"embedder training diverged at step {step}")
        T.backward(total)
        opt.lr = config.lr * 0.5 * (1 + math.cos(math.pi * (step - 1) / config.steps))
        opt.step()
    model.report = {
        "train_style_accuracy": sra(model, [s.motion for s in train], [s.style for s in train]),
        "steps": config.steps,
        "n_train": len(train),
        "seed": config.seed,
    }
    if held_out:
        model.report["held_out_style_accuracy"] = sra(model, [s.motion for s in held_out], [s.style for s in held_out])
        model.report["n_held_out"] = len(held_out)
    return model


class RandomEmbedder:
    """Chance-level baseline: every text and motion gets an independent Gaussian unit vector."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.rng = np.random.default_rng(seed)

    def _draw(self, n: int) -> np.ndarray:
        x = self.rng.normal(size=(n, self.dim))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    def embed_texts(self, texts) -> np.ndarray:
        return self._draw(len(texts))

    def embed_motions(self, motions) -> np.ndarray:
        return self._draw(len(motions))


# ---------------------------------------------------------------------------
# retrieval and recognition


def mm_dist(embedders, texts: list[str], motions: list) -> float:
    """Mean Euclidean distance between paired text and motion embeddings."""
    if len(texts) != len(motions):
        raise ContractError(f"{len(texts)} texts but {len(motions)} motions")
    if not texts:
        raise ContractError("mm_dist needs at least one pair")
    return paired_distance(embedders.embed_texts(texts), embedders.embed_motions(motions))


def paired_distance(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a, np.float64) - np.asarray(b, np.float64), axis=1).mean())


def r_precision_from_embeddings(
    text_emb: np.ndarray, motion_emb: np.ndarray, pool: int = 32, k: int = 3, trials: int | None = None, seed: int = 0
) -> float:
    """Row i of ``text_emb`` pairs with row i of ``motion_emb``.

    Each trial picks a query, its true motion and ``pool - 1`` distractors drawn
    from the other rows, and scores a hit when the true motion ranks in the top k.
    Ties are broken against the true match. With ``trials=None`` every row is
    queried once.
    """
    t = np.asarray(text_emb, np.float64)
    m = np.asarray(motion_emb, np.float64)
    n = len(t)
    if len(m) != n:
        raise ContractError("every query needs its ground-truth motion")
    if n == 0:
        raise ContractError("no queries")
    pool = min(pool, n)
    rng = np.random.default_rng(seed)
    queries = np.arange(n) if trials is None else rng.integers(0, n, size=trials)
    hits = 0
    for q in queries:
        others = np.delete(np.arange(n), q)
        cand = rng.choice(others, size=pool - 1, replace=False) if pool > 1 else np.array([], dtype=int)
        d_true = np.linalg.norm(t[q] - m[q])
        d_other = np.linalg.norm(t[q][None] - m[cand], axis=1)
        rank = int((d_other <= d_true).sum())
        hits += rank < k
    return hits / len(queries)


def r_precision(embedders, texts: list[str], motions: list, pool: int = 32, k: int = 3, trials: int | None = None, seed: int = 0) -> float:
    if len(texts) != len(motions):
        raise ContractError("every query needs its ground-truth motion")
    return r_precision_from_embeddings(embedders.embed_texts(texts), embedders.embed_motions(motions), pool, k, trials, seed)


def sra(embedders, motions: list, targets: list[str]) -> float:
    """Style recognition accuracy against target labels."""
    if len(motions) != len(targets):
        raise ContractError("one target label per motion")
    unknown = sorted(set(targets) - set(embedders.styles))
    if unknown:
        raise ContractError(f"labels not known to the classifier: {unknown}")
    if not motions:
        raise ContractError("no motions")
    pred = embedders.predict_styles(motions)
    return sum(p == t for p, t in zip(pred, targets)) / len(targets)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    metric: str
    value: float
    config: dict = field(default_factory=dict)
    dataset_hash: str | None = None
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def labeled(samples) -> list[LabeledMotion]:
    """Corpus samples to evaluator training items; unlabeled samples are dropped."""
    return [LabeledMotion(s.motion, s.global_text, s.style) for s in samples if s.style is not None]
