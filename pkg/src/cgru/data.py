"""Vocabularies, factored corpus ingestion, and the model archive format.

Corpus files are UTF-8, one sentence per line, space-separated tokens.
With more than one factor a token literal is `surface|f2|...|fk`; with a
single factor the token is taken verbatim (literal pipes allowed). Id 0 is
the end-of-sentence marker, id 1 the unknown-token replacement, for every
vocabulary; the end-of-sentence id doubles as the decoder stop symbol.

Archives are little-endian binary: a magic string, a JSON metadata block
(model dimensions, tying mode, vocab paths, format version) and named
tensor records. A save/load roundtrip is bitwise exact, which the trainer's
determinism contract relies on.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import Counter

import numpy as np

from .model import ModelConfig, param_shapes

EOS_ID = 0
UNK_ID = 1
EOS_TOKEN = "</s>"
UNK_TOKEN = "<unk>"

ARCHIVE_MAGIC = b"CGRU1"
ARCHIVE_VERSION = 1

_DTYPE_BY_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_BY_KIND = {"float32": 0, "float64": 1}


class DataError(Exception):
    """Base class for corpus/vocab/archive failures."""


class CorpusFormatError(DataError):
    """Malformed corpus line; message carries file, line and token position."""


class VocabFormatError(DataError):
    """Vocabulary file violates the token<TAB>id contract."""


class ArchiveError(DataError):
    """Base class for model archive failures."""


class BadMagicError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


class UnknownTensorError(ArchiveError):
    pass


class ArchiveValidationError(ArchiveError):
    pass


class Vocab:
    """Bijective token<->id map with fixed reserved ids 0 (EOS) and 1 (UNK)."""

    def __init__(self, tokens=()):
        self._itos = [EOS_TOKEN, UNK_TOKEN]
        for t in tokens:
            self._itos.append(t)
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        if len(self._stoi) != len(self._itos):
            raise VocabFormatError("duplicate token in vocabulary")

    def __len__(self):
        return len(self._itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self._itos == other._itos

    def id(self, token):
        return self._stoi.get(token, UNK_ID)

    def token(self, idx):
        return self._itos[idx]

    def encode(self, tokens, append_eos=True):
        ids = [self._stoi.get(t, UNK_ID) for t in tokens]
        if append_eos:
            ids.append(EOS_ID)
        return np.array(ids, dtype=np.int64)

    def decode(self, ids, stop_at_eos=True):
        out = []
        for i in ids:
            if stop_at_eos and int(i) == EOS_ID:
                break
            out.append(self._itos[int(i)])
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, t in enumerate(self._itos):
                fh.write(f"{t}\t{i}\n")

    @classmethod
    def load(cls, path):
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for ln, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2:
                    raise VocabFormatError(f"{path}:{ln}: expected token<TAB>id")
                token, idx = parts[0], parts[1]
                try:
                    idx = int(idx)
                except ValueError:
                    raise VocabFormatError(f"{path}:{ln}: id {idx!r} is not an integer") from None
                if idx in entries:
                    raise VocabFormatError(f"{path}:{ln}: duplicate id {idx}")
                entries[idx] = token
        if sorted(entries) != list(range(len(entries))):
            raise VocabFormatError(f"{path}: ids are not contiguous from 0")
        if len(entries) < 2 or entries[EOS_ID] != EOS_TOKEN or entries[UNK_ID] != UNK_TOKEN:
            raise VocabFormatError(f"{path}: reserved ids 0/1 must be {EOS_TOKEN}/{UNK_TOKEN}")
        return cls(entries[i] for i in range(2, len(entries)))


def build_vocab(token_lists, max_size):
    """Most-frequent tokens, ties broken lexicographically; reserved ids count
    against max_size."""
    counts = Counter()
    for tokens in token_lists:
        counts.update(tokens)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    if max_size < 2:
        raise DataError("max_size must cover the two reserved ids")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(t for t, _ in ranked[: max_size - 2])


# -- factored corpora -----------------------------------------------------------


def split_factors(token, factor_count):
    if factor_count == 1:
        return (token,)
    parts = tuple(token.split("|"))
    if len(parts) != factor_count:
        raise CorpusFormatError(
            f"token {token!r}: expected {factor_count} factors, got {len(parts)}")
    return parts


def read_factored_tokens(path, factor_count):
    """Token-level view: one list of factor tuples per sentence."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            sent = []
            for col, token in enumerate(line.split(), 1):
                try:
                    sent.append(split_factors(token, factor_count))
                except CorpusFormatError as e:
                    raise CorpusFormatError(f"{path}:{ln}: column {col}: {e}") from None
            out.append(sent)
    return out


def factored_ids(sentence, vocabs):
    """Factor tuples -> (T_x+1, F) id array with the end marker appended."""
    rows = [[v.id(tok) for v, tok in zip(vocabs, tup)] for tup in sentence]
    rows.append([EOS_ID] * len(vocabs))
    return np.array(rows, dtype=np.int64)


def read_factored_corpus(path, vocabs):
    """Id-level corpus side; unknown tokens map to the unknown id."""
    return [factored_ids(s, vocabs) for s in read_factored_tokens(path, len(vocabs))]


def read_target_corpus(path, vocab):
    sents = read_factored_tokens(path, 1)
    return [vocab.encode([t[0] for t in s]) for s in sents]


def read_parallel(src_path, tgt_path, src_vocabs, tgt_vocab):
    """Aligned (source ids, target ids) pairs; mismatch names the line."""
    src = read_factored_corpus(src_path, src_vocabs)
    tgt = read_target_corpus(tgt_path, tgt_vocab)
    if len(src) != len(tgt):
        short = min(len(src), len(tgt))
        raise CorpusFormatError(
            f"{src_path} and {tgt_path} differ in length at line {short + 1}")
    return list(zip(src, tgt))


def render_factored(sentence_ids, vocabs):
    """Id rows back to token literals (inverse of factored_ids, minus EOS)."""
    toks = []
    for row in sentence_ids:
        if int(row[0]) == EOS_ID:
            break
        toks.append("|".join(v.token(int(i)) for v, i in zip(vocabs, row)))
    return toks


# -- model archive ----------------------------------------------------------------


def _pack_tensor(name, arr):
    if arr.dtype == np.float32:
        code, payload = 0, arr.astype("<f4", copy=False)
    elif arr.dtype == np.float64:
        code, payload = 1, arr.astype("<f8", copy=False)
    else:
        raise ArchiveError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + payload.tobytes(order="C")


def save_model(path, params, cfg, extra_meta=None):
    """Write an archive atomically (temp file + rename in the same dir)."""
    meta = {"format_version": ARCHIVE_VERSION, "model": cfg.to_dict()}
    if extra_meta:
        meta.update(extra_meta)
    blob = [ARCHIVE_MAGIC, struct.pack("<I", ARCHIVE_VERSION)]
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob.append(struct.pack("<Q", len(mb)))
    blob.append(mb)
    names = sorted(params)
    blob.append(struct.pack("<Q", len(names)))
    for name in names:
        blob.append(_pack_tensor(name, np.asarray(params[name])))
    data = b"".join(blob)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".cgru-", dir=d)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.off = 0
        self.path = path

    def read(self, n):
        if self.off + n > len(self.buf):
            raise TruncatedArchiveError(f"{self.path}: truncated at byte {self.off}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_model(path):
    """Read an archive; returns (params, model config, metadata dict).

    Validates the magic string, the format version, the tensor-name set
    against the config (unknown or missing names are errors, never
    ignored) and every tensor shape, which pins embedding row counts to
    the declared vocabulary sizes.
    """
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.read(len(ARCHIVE_MAGIC)) != ARCHIVE_MAGIC:
        raise BadMagicError(f"{path}: not a model archive (bad magic)")
    (version,) = r.unpack("<I")
    if version != ARCHIVE_VERSION:
        raise ArchiveValidationError(f"{path}: unsupported format version {version}")
    (mlen,) = r.unpack("<Q")
    meta = json.loads(r.read(mlen).decode("utf-8"))
    cfg = ModelConfig.from_dict(meta["model"])
    expected = param_shapes(cfg)
    (count,) = r.unpack("<Q")
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.read(nlen).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _DTYPE_BY_CODE:
            raise ArchiveValidationError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        dtype = _DTYPE_BY_CODE[code]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = r.read(n * dtype.itemsize)
        if name not in expected:
            raise UnknownTensorError(f"{path}: unexpected tensor {name!r}")
        if tuple(shape) != tuple(expected[name]):
            raise ArchiveValidationError(
                f"{path}: tensor {name!r} has shape {tuple(shape)}, "
                f"config requires {tuple(expected[name])}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        params[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    if r.off != len(r.buf):
        raise ArchiveValidationError(f"{path}: {len(r.buf) - r.off} trailing bytes")
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ArchiveValidationError(f"{path}: missing tensors {missing}")
    return params, cfg, meta
