"""Tokenization, corpus and pair-set readers, and checkpoint persistence."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ParseError, ShapeError
from .model import PARAM_ORDER, ModelConfig, ModelParams, param_shapes

UNK = "<unk>"
DEFAULT_MAX_LEN = 128


def _read_lines(path):
    """Lines of a UTF-8 text file with CRLF/CR normalised and newlines stripped."""
    with open(path, encoding="utf-8", newline=None) as fh:
        return [line.rstrip("\n") for line in fh]


# -- vocab and merges ------------------------------------------------------

@dataclass
class Vocab:
    id_to_token: list
    token_to_id: dict
    unk_id: int | None = None

    @classmethod
    def from_tokens(cls, tokens, unk=UNK):
        tokens = list(tokens)
        mapping = {}
        for i, tok in enumerate(tokens):
            if tok in mapping:
                raise ParseError(f"duplicate token {tok!r}", line=i + 1)
            mapping[tok] = i
        return cls(tokens, mapping, mapping.get(unk))

    def __len__(self):
        return len(self.id_to_token)

    def __getitem__(self, token):
        return self.token_to_id[token]

    def __contains__(self, token):
        return token in self.token_to_id

    def fingerprint(self):
        """Short content hash; a checkpoint records it to catch vocab mix-ups."""
        h = hashlib.sha256("\n".join(self.id_to_token).encode("utf-8"))
        return h.hexdigest()[:16]

    def end_of_word(self):
        """The end-of-word convention the vocab was built with.

        ``("suffix", "</w>")`` for CLIP/GPT-style tables, ``("prefix", "▁")``
        for sentencepiece-style tables, ``(None, "")`` otherwise.
        """
        if any(t.endswith("</w>") for t in self.id_to_token):
            return "suffix", "</w>"
        if any(t.startswith("▁") for t in self.id_to_token):
            return "prefix", "▁"
        return None, ""


@dataclass
class MergeTable:
    pairs: list
    ranks: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.ranks:
            self.ranks = {pair: i for i, pair in enumerate(self.pairs)}

    def __len__(self):
        return len(self.pairs)


def load_vocab(path, unk=UNK) -> Vocab:
    """One token per line; the line number (from 0) is the id."""
    tokens = []
    seen = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        if line == "":
            raise ParseError("empty token", path, lineno)
        if line in seen:
            raise ParseError(f"duplicate token {line!r} (first on line {seen[line]})", path, lineno)
        seen[line] = lineno
        tokens.append(line)
    return Vocab.from_tokens(tokens, unk)


def load_merges(path) -> MergeTable:
    """One ``left right`` pair per line, highest priority first.

    A leading ``#`` line (the usual version header) is ignored.
    """
    pairs = []
    seen = {}
    for lineno, line in enumerate(_read_lines(path), 1):
        if lineno == 1 and line.startswith("#"):
            continue
        parts = line.split(" ")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ParseError(f"expected 'left right', got {line!r}", path, lineno)
        pair = (parts[0], parts[1])
        if pair in seen:
            raise ParseError(f"duplicate merge {line!r} (first on line {seen[pair]})", path, lineno)
        seen[pair] = lineno
        pairs.append(pair)
    return MergeTable(pairs)


# -- BPE -------------------------------------------------------------------

def _word_symbols(word, eow):
    kind, mark = eow
    chars = list(word)
    if kind == "suffix":
        chars[-1] = chars[-1] + mark
    elif kind == "prefix":
        chars[0] = mark + chars[0]
    return chars


def _apply_merges(symbols, ranks):
    while len(symbols) > 1:
        best = None
        best_rank = None
        for i in range(len(symbols) - 1):
            r = ranks.get((symbols[i], symbols[i + 1]))
            if r is not None and (best_rank is None or r < best_rank):
                best, best_rank = i, r
        if best is None:
            break
        pair = (symbols[best], symbols[best + 1])
        merged = []
        i = 0
        while i < len(symbols):
            if i < len(symbols) - 1 and (symbols[i], symbols[i + 1]) == pair:
                merged.append(pair[0] + pair[1])
                i += 2
            else:
                merged.append(symbols[i])
                i += 1
        symbols = merged
    return symbols


class Tokenizer:
    """BPE encoder over a fixed vocab and merge table, with a per-word cache."""

    def __init__(self, vocab: Vocab, merges: MergeTable, lowercase=True):
        self.vocab = vocab
        self.merges = merges
        self.lowercase = lowercase
        self.eow = vocab.end_of_word()
        self._cache = {}
        self.unknown = Counter()

    def word_pieces(self, word):
        pieces = self._cache.get(word)
        if pieces is None:
            pieces = _apply_merges(_word_symbols(word, self.eow), self.merges.ranks)
            self._cache[word] = pieces
        return pieces

    def pieces(self, text):
        if self.lowercase:
            text = text.lower()
        out = []
        for word in text.split():
            out.extend(self.word_pieces(word))
        return out

    def encode(self, text):
        ids = []
        t2i = self.vocab.token_to_id
        unk = self.vocab.unk_id
        for piece in self.pieces(text):
            i = t2i.get(piece)
            if i is None:
                self.unknown[piece] += 1
                if unk is None:
                    continue
                i = unk
            ids.append(i)
        return np.array(ids, dtype=np.int64)

    def surface(self, text):
        """Display strings for each kept token, recovering original case."""
        pieces = self.pieces(text)
        kind, mark = self.eow
        display = [p[: -len(mark)] if kind == "suffix" and p.endswith(mark) else p for p in pieces]
        if kind == "prefix":
            display = [p[len(mark):] if p.startswith(mark) else p for p in display]
        if self.vocab.unk_id is None:
            keep = [p in self.vocab.token_to_id for p in pieces]
            display = [d for d, k in zip(display, keep) if k]
        else:
            keep = [True] * len(pieces)
        if not self.lowercase:
            return display
        raw = "".join(text.split())
        if sum(len(d) for d in display) == len(raw) and all(keep):
            out, pos = [], 0
            for d in display:
                out.append(raw[pos:pos + len(d)])
                pos += len(d)
            return out
        return display


def bpe_tokenize(vocab: Vocab, merges: MergeTable, text: str, lowercase=True) -> np.ndarray:
    """Token ids for ``text``; symbols missing from the vocab map to ``unk_id``."""
    return Tokenizer(vocab, merges, lowercase).encode(text)


# -- corpus ----------------------------------------------------------------

def read_corpus(path, tokenizer: Tokenizer, max_len=DEFAULT_MAX_LEN, stats=None):
    """Yield token-id arrays, one per line, skipping too-short and too-long lines.

    ``stats`` (a Counter, if given) receives ``kept``, ``too_short`` and
    ``too_long`` counts.
    """
    stats = Counter() if stats is None else stats
    with open(path, encoding="utf-8", newline=None) as fh:
        for line in fh:
            ids = tokenizer.encode(line)
            if ids.shape[0] < 2:
                stats["too_short"] += 1
                continue
            if ids.shape[0] > max_len:
                stats["too_long"] += 1
                continue
            stats["kept"] += 1
            stats["tokens"] += int(ids.shape[0])
            yield ids


def load_corpus(path, tokenizer: Tokenizer, max_len=DEFAULT_MAX_LEN, limit=None):
    """Materialised ``read_corpus``; returns ``(sentences, stats)``."""
    stats = Counter()
    out = []
    for ids in read_corpus(path, tokenizer, max_len, stats):
        out.append(ids)
        if limit is not None and stats["tokens"] >= limit:
            break
    return out, stats


# -- pair datasets ---------------------------------------------------------

@dataclass
class PairDataset:
    name: str
    text_a: list
    text_b: list
    gold: np.ndarray

    def __len__(self):
        return len(self.text_a)

    def take(self, order):
        order = list(order)
        return PairDataset(
            self.name,
            [self.text_a[i] for i in order],
            [self.text_b[i] for i in order],
            self.gold[order],
        )


def load_pairs(path, name=None) -> PairDataset:
    """Tab-separated ``text_a, text_b, score`` rows; blank lines are ignored."""
    a, b, gold = [], [], []
    for lineno, line in enumerate(_read_lines(path), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise ParseError(f"expected 3 tab-separated columns, got {len(cols)}", path, lineno)
        try:
            score = float(cols[2])
        except ValueError:
            raise ParseError(f"score {cols[2]!r} is not a number", path, lineno) from None
        if not math.isfinite(score):
            raise ParseError(f"score {cols[2]!r} is not finite", path, lineno)
        a.append(cols[0])
        b.append(cols[1])
        gold.append(score)
    if not gold:
        raise ParseError("no pairs found; a correlation needs at least 2 rows", path)
    return PairDataset(name or Path(path).stem, a, b, np.array(gold))


# -- checkpoints -----------------------------------------------------------

MAGIC = b"SSAE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, **hyper):
        arrays = params.as_dict()
        return cls(
            {n: np.zeros_like(a) for n, a in arrays.items()},
            {n: np.zeros_like(a) for n, a in arrays.items()},
            0,
            **hyper,
        )

    def copy(self):
        return AdamState(
            {n: a.copy() for n, a in self.m.items()},
            {n: a.copy() for n, a in self.v.items()},
            self.t,
            self.beta1,
            self.beta2,
            self.eps,
        )


@dataclass
class Checkpoint:
    params: ModelParams
    vocab_fingerprint: str | None = None
    seed: int | None = None
    adam: AdamState | None = None
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def save_checkpoint(path, params: ModelParams, vocab_fingerprint=None, seed=None, adam=None, extra=None):
    """Write the binary checkpoint atomically (temp file then rename)."""
    params.validate()
    meta = dict(params.config.to_dict())
    meta.update(vocab_fingerprint=vocab_fingerprint, seed=seed, adam=adam is not None)
    if adam is not None:
        meta.update(adam_t=adam.t, adam_beta1=adam.beta1, adam_beta2=adam.beta2, adam_eps=adam.eps)
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    names = params.names()
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)), blob]
    arrays = params.as_dict()
    for n in names:
        chunks.append(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())
    if adam is not None:
        for n in names:
            chunks.append(np.ascontiguousarray(adam.m[n], dtype="<f8").tobytes())
        for n in names:
            chunks.append(np.ascontiguousarray(adam.v[n], dtype="<f8").tobytes())
        chunks.append(struct.pack("<d", float(adam.t)))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, n_meta = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _HEADER.size
    if len(raw) < start + n_meta:
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[start:start + n_meta].decode("utf-8"))
        config = ModelConfig.from_dict(meta)
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid metadata: {exc}") from exc

    shapes = param_shapes(config)
    names = [n for n in PARAM_ORDER if n in shapes]
    sizes = [int(np.prod(shapes[n])) for n in names]
    n_float = sum(sizes) * (3 if meta.get("adam") else 1) + (1 if meta.get("adam") else 0)
    expected = start + n_meta + 8 * n_float
    if len(raw) != expected:
        raise CheckpointError(f"{path}: payload is {len(raw) - start - n_meta} bytes, expected {expected - start - n_meta}")
    flat = np.frombuffer(raw, dtype="<f8", offset=start + n_meta).astype(np.float64)

    pos = 0

    def take_all():
        nonlocal pos
        out = {}
        for n, size in zip(names, sizes):
            out[n] = flat[pos:pos + size].reshape(shapes[n]).copy()
            pos += size
        return out

    arrays = take_all()
    try:
        params = ModelParams(config, **arrays)
        params.validate()
    except (ShapeError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    adam = None
    if meta.get("adam"):
        m = take_all()
        v = take_all()
        t = int(flat[pos])
        adam = AdamState(m, v, t, meta["adam_beta1"], meta["adam_beta2"], meta["adam_eps"])
    return Checkpoint(params, meta.get("vocab_fingerprint"), meta.get("seed"), adam, meta.get("extra", {}))

