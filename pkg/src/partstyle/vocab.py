"""Unified token inventory: byte-level BPE text tokens, part motion tokens, specials.

Id layout, in order: specials (pad, bos, eos, twelve part sentinels), the 256
byte tokens, learned merges, then K motion tokens per part in answer order.
"""
from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .compose import ANSWER_ORDER, PART_LABELS, PartTexts

VOCAB_VERSION = 1
MAX_INPUT = 512

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
PART_ABBREV = {
    "root": "rt", "backbone": "bb", "left_arm": "la", "right_arm": "ra", "left_leg": "ll", "right_leg": "rl",
}
SOM = {p: f"<som_{a}>" for p, a in PART_ABBREV.items()}
EOM = {p: f"<eom_{a}>" for p, a in PART_ABBREV.items()}
SPECIALS = [PAD, BOS, EOS] + [t for p in ANSWER_ORDER for t in (SOM[p], EOM[p])]


class VocabError(ValueError):
    pass


class PromptTooLongError(ValueError):
    def __init__(self, length: int, limit: int):
        super().__init__(f"rendered prompt has {length} tokens, limit is {limit}")
        self.length = length
        self.limit = limit


class AnswerParseError(ValueError):
    def __init__(self, message: str, part: str | None = None, offset: int | None = None):
        where = f" [{part}]" if part else ""
        at = f" at char {offset}" if offset is not None else ""
        super().__init__(f"{message}{where}{at}")
        self.part = part
        self.offset = offset


def normalize_ws(text: str) -> str:
    return " ".join(text.split())


def motion_surface(part: str, index: int) -> str:
    return f"{part}_{index}"


def _byte_surface(bs: bytes) -> str:
    return "<0x" + bs.hex().upper() + ">"


def train_merges(texts: list[str], num_merges: int) -> list[tuple[bytes, bytes]]:
    """Greedy byte-pair merges over space-prefixed words; stops early when no pair repeats."""
    counts = Counter()
    for t in texts:
        for w in normalize_ws(t).split(" "):
            if w:
                counts[(" " + w).encode("utf-8")] += 1
    words = [([bytes([b]) for b in w], n) for w, n in sorted(counts.items())]
    merges: list[tuple[bytes, bytes]] = []
    for _ in range(num_merges):
        pair_counts: Counter = Counter()
        for syms, n in words:
            for a, b in zip(syms, syms[1:]):
                pair_counts[(a, b)] += n
        if not pair_counts:
            break
        best = max(pair_counts.items(), key=lambda kv: (kv[1], [-x for x in kv[0][0] + b"\xff" + kv[0][1]]))
        (a, b), n = best
        if n < 2:
            break
        merges.append((a, b))
        merged = a + b
        new_words = []
        for syms, cnt in words:
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            new_words.append((out, cnt))
        words = new_words
    return merges


@dataclass
class Vocabulary:
    tokens: list[str]
    token_bytes: dict[int, bytes]
    merges: list[tuple[bytes, bytes]]
    codebook_size: int
    ranges: dict[str, tuple[int, int]]

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            dup = [t for t, n in Counter(self.tokens).items() if n > 1][:3]
            raise VocabError(f"duplicate token surfaces: {dup}")
        self.bytes_to_id = {b: i for i, b in self.token_bytes.items()}
        self.merge_rank = {pair: r for r, pair in enumerate(self.merges)}
        self.reserved = {t: i for t, i in self.index.items() if i < self.ranges["byte"][0] or i >= self.ranges["motion"][0]}
        self._cache: dict[str, list[int]] = {}

    # -- inventory -------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    pad_id = property(lambda self: self.index[PAD])
    bos_id = property(lambda self: self.index[BOS])
    eos_id = property(lambda self: self.index[EOS])

    def id_of(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabError(f"unknown token {token!r}") from None

    def token_of(self, i: int) -> str:
        if not 0 <= i < len(self.tokens):
            raise IndexError(f"token id {i} out of range [0, {len(self.tokens)})")
        return self.tokens[i]

    def motion_id(self, part: str, index: int) -> int:
        if not 0 <= index < self.codebook_size:
            raise IndexError(f"code index {index} out of range [0, {self.codebook_size})")
        return self.ranges[f"motion/{part}"][0] + index

    def motion_index(self, token_id: int) -> tuple[str, int] | None:
        for part in ANSWER_ORDER:
            lo, hi = self.ranges[f"motion/{part}"]
            if lo <= token_id < hi:
                return part, token_id - lo
        return None

    # -- text ------------------------------------------------------------------

    def _bpe(self, word: str) -> list[int]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        syms = [bytes([b]) for b in (" " + word).encode("utf-8")]
        while len(syms) > 1:
            ranked = [(self.merge_rank.get(p, None), i) for i, p in enumerate(zip(syms, syms[1:]))]
            ranked = [(r, i) for r, i in ranked if r is not None]
            if not ranked:
                break
            r, _ = min(ranked)
            a, b = self.merges[r]
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            syms = out
        ids = [self.bytes_to_id[s] for s in syms]
        if len(self._cache) < 100_000:
            self._cache[word] = ids
        return ids

    def encode_text(self, text: str) -> list[int]:
        """Whitespace-normalized text to ids; reserved surfaces match whole words."""
        out: list[int] = []
        text = normalize_ws(text)
        if not text:
            return out
        for w in text.split(" "):
            rid = self.reserved.get(w)
            out.extend([rid] if rid is not None else self._bpe(w))
        return out

    def decode_text(self, ids) -> str:
        buf = bytearray()
        n = len(self.tokens)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise IndexError(f"token id {i} out of range [0, {n})")
            b = self.token_bytes.get(i)
            buf += b if b is not None else (" " + self.tokens[i]).encode("utf-8")
        s = buf.decode("utf-8", errors="replace")
        return s[1:] if s.startswith(" ") else s

    # -- persistence -----------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "version": VOCAB_VERSION,
            "codebook_size": self.codebook_size,
            "tokens": self.tokens,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "merges": [[a.hex(), b.hex()] for a, b in self.merges],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        d = json.loads(Path(path).read_text())
        if d.get("version") != VOCAB_VERSION:
            raise VocabError(f"vocabulary version {d.get('version')} unsupported")
        merges = [(bytes.fromhex(a), bytes.fromhex(b)) for a, b in d["merges"]]
        return _assemble(merges, d["codebook_size"], expect=d["tokens"])

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def _assemble(merges: list[tuple[bytes, bytes]], codebook_size: int, expect: list[str] | None = None) -> Vocabulary:
    tokens = list(SPECIALS)
    token_bytes: dict[int, bytes] = {}
    ranges = {"special": (0, len(tokens))}
    lo = len(tokens)
    for b in range(256):
        token_bytes[len(tokens)] = bytes([b])
        tokens.append(_byte_surface(bytes([b])))
    ranges["byte"] = (lo, len(tokens))
    lo = len(tokens)
    used = set(tokens)
    for a, b in merges:
        bs = a + b
        try:
            surf = bs.decode("utf-8")
        except UnicodeDecodeError:
            surf = None
        if surf is None or surf in used or surf.strip().startswith("<") or not surf.strip():
            surf = _byte_surface(bs)
        token_bytes[len(tokens)] = bs
        tokens.append(surf)
        used.add(surf)
    ranges["merge"] = (lo, len(tokens))
    lo = len(tokens)
    for part in ANSWER_ORDER:
        start = len(tokens)
        tokens.extend(motion_surface(part, k) for k in range(codebook_size))
        ranges[f"motion/{part}"] = (start, len(tokens))
    ranges["motion"] = (lo, len(tokens))
    if expect is not None and expect != tokens:
        raise VocabError("token list does not match the stored merge rules")
    return Vocabulary(tokens, token_bytes, merges, codebook_size, ranges)


def build_vocab(texts: list[str], codebook_size: int = 512, num_merges: int = 2000) -> Vocabulary:
    if not texts:
        raise VocabError("build_vocab needs a non-empty text corpus")
    labels = SEP.join(f"{PART_LABELS[p]}:" for p in ANSWER_ORDER)
    extra = list(template_texts().values()) + [labels, labels]
    return _assemble(train_merges(list(texts) + extra, num_merges), codebook_size)


# ---------------------------------------------------------------------------
# templates and answers

TEMPLATE_IDS = ("reason", "global_to_parts", "compose", "generate")
_TEMPLATE_PATH = Path(__file__).parent / "assets" / "templates.txt"


def template_texts() -> dict[str, str]:
    out: dict[str, list[str]] = {}
    current = None
    for line in _TEMPLATE_PATH.read_text().splitlines():
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        m = re.fullmatch(r"\[(\w+)\]", s)
        if m:
            current = m.group(1)
            out[current] = []
        elif current is not None:
            out[current].append(s)
    texts = {k: " ".join(v) for k, v in out.items()}
    missing = set(TEMPLATE_IDS) - set(texts)
    if missing:
        raise VocabError(f"template asset lacks {sorted(missing)}")
    return texts


def template_hash(template_id: str) -> str:
    return hashlib.sha256(template_texts()[template_id].encode("utf-8")).hexdigest()


# surrounded by spaces so sentinels stay whole words
SEP = " ; "


def _check_text(part: str, text: str) -> str:
    text = normalize_ws(text)
    if ";" in text:
        raise ValueError(f"{part}: part text may not contain ';'")
    return text


def render_part_texts(texts: PartTexts) -> str:
    return SEP.join(f"{PART_LABELS[p]}: {_check_text(p, texts[p])}".rstrip() for p in ANSWER_ORDER)


def render_part_motions(tokens: dict) -> str:
    """``tokens`` maps part -> sequence of code indices (or PartTokenSeq)."""
    chunks = []
    for p in ANSWER_ORDER:
        seq = tokens[p]
        idx = getattr(seq, "indices", seq)
        body = " ".join(motion_surface(p, int(i)) for i in idx)
        chunks.append(f"{PART_LABELS[p]}: {SOM[p]} {body} {EOM[p]}".replace("  ", " "))
    return SEP.join(chunks)


def render_text(template_id: str, **fields) -> str:
    tpl = template_texts()[template_id]
    rendered = {}
    for k, v in fields.items():
        if isinstance(v, PartTexts):
            v = render_part_texts(v)
        elif isinstance(v, dict):
            v = render_part_motions(v)
        rendered[k] = normalize_ws(str(v))
    try:
        return normalize_ws(tpl.format(**rendered))
    except KeyError as exc:
        raise VocabError(f"template {template_id!r} needs field {exc.args[0]!r}") from None


def render_prompt(vocab: Vocabulary, template_id: str, max_len: int = MAX_INPUT, **fields) -> list[int]:
    ids = vocab.encode_text(render_text(template_id, **fields))
    if len(ids) > max_len:
        raise PromptTooLongError(len(ids), max_len)
    return ids


def render_answer(value) -> str:
    if isinstance(value, PartTexts):
        return render_part_texts(value)
    return render_part_motions(value)


def _split_sections(text: str) -> dict[str, tuple[str, int]]:
    sections = {}
    pos = 0
    for i, part in enumerate(ANSWER_ORDER):
        label = PART_LABELS[part] + ":"
        if not text.startswith(label, pos):
            found = [p for p in ANSWER_ORDER if text.startswith(PART_LABELS[p] + ":", pos)]
            if found:
                raise AnswerParseError(f"section {PART_LABELS[found[0]]!r} out of order, expected {label!r}", part, pos)
            raise AnswerParseError(f"missing section {label!r}", part, pos)
        start = pos + len(label)
        if i + 1 < len(ANSWER_ORDER):
            nxt = SEP + PART_LABELS[ANSWER_ORDER[i + 1]] + ":"
            j = text.find(nxt, start)
            if j < 0:
                # an earlier label may follow instead, which is an ordering fault
                for p in ANSWER_ORDER[: i + 1]:
                    if text.find(SEP + PART_LABELS[p] + ":", start) >= 0:
                        raise AnswerParseError(f"section {PART_LABELS[p]!r} out of order", ANSWER_ORDER[i + 1], start)
                raise AnswerParseError(f"missing section {PART_LABELS[ANSWER_ORDER[i + 1]]!r}", ANSWER_ORDER[i + 1], len(text))
            sections[part] = (text[start:j].strip(), start)
            pos = j + len(SEP)
        else:
            sections[part] = (text[start:].strip(), start)
    return sections


def parse_part_texts(text: str) -> PartTexts:
    secs = _split_sections(normalize_ws(text))
    return PartTexts(**{p: s for p, (s, _) in secs.items()})


_MOTION_RE = re.compile(r"([a-z_]+)_(\d+)")


def parse_part_motions(text: str, codebook_size: int) -> dict[str, list[int]]:
    secs = _split_sections(normalize_ws(text))
    out = {}
    for part, (body, off) in secs.items():
        words = body.split()
        if not words or words[0] != SOM[part]:
            raise AnswerParseError(f"expected {SOM[part]} to open the block", part, off)
        if len(words) < 2 or words[-1] != EOM[part]:
            raise AnswerParseError(f"unpaired {SOM[part]}: missing {EOM[part]}", part, off)
        idx = []
        for w in words[1:-1]:
            m = _MOTION_RE.fullmatch(w)
            if not m or m.group(1) != part:
                raise AnswerParseError(f"unexpected token {w!r} inside motion block", part, off)
            k = int(m.group(2))
            if k >= codebook_size:
                raise AnswerParseError(f"code index {k} >= {codebook_size}", part, off)
            idx.append(k)
        if not idx:
            raise AnswerParseError("empty motion block", part, off)
        out[part] = idx
    return out


def strip_specials(vocab: Vocabulary, ids) -> list[int]:
    """Drop bos/pad and cut at the first eos."""
    out = []
    for i in ids:
        i = int(i)
        if i == vocab.eos_id:
            break
        if i in (vocab.bos_id, vocab.pad_id):
            continue
        out.append(i)
    return out


def parse_answer(vocab: Vocabulary, ids, kind: str):
    """``kind`` is "texts" (PartTexts) or "motions" (part -> code indices)."""
    text = vocab.decode_text(strip_specials(vocab, ids))
    if kind == "texts":
        return parse_part_texts(text)
    if kind == "motions":
        return parse_part_motions(text, vocab.codebook_size)
    raise ValueError(f"unknown answer kind {kind!r}")
