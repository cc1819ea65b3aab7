"""Corpus JSONL format, fingerprints and atomic file output."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import EventSequence, InvalidSequenceError

FORMAT_VERSION = 1


class CorpusFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def sequence_to_dict(seq: EventSequence) -> dict:
    return {
        "horizon": float(seq.horizon),
        "target_type": int(seq.target_type),
        "num_types": int(seq.num_types),
        "events": [{"t": float(t), "k": int(k), "v": float(v)}
                   for t, k, v in zip(seq.times, seq.types, seq.values)],
    }


def sequence_from_dict(d: dict) -> EventSequence:
    try:
        events = d["events"]
        times = np.array([float(e["t"]) for e in events], dtype=float)
        types = np.array([int(e["k"]) for e in events], dtype=np.int64)
        values = np.array([float(e.get("v", 0.0)) for e in events], dtype=float)
        return EventSequence(times, types, values, horizon=float(d["horizon"]),
                             num_types=int(d["num_types"]), target_type=int(d["target_type"]))
    except (KeyError, TypeError) as exc:
        raise InvalidSequenceError(f"malformed sequence record: {exc!r}") from None


def dumps_corpus(corpus: Iterable[EventSequence]) -> str:
    return "".join(json.dumps(sequence_to_dict(s), sort_keys=True) + "\n" for s in corpus)


def loads_corpus(text: str) -> list[EventSequence]:
    """Parse JSONL; every error carries the 1-based line number."""
    corpus = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"invalid JSON: {exc.msg}", lineno) from None
        try:
            seq = sequence_from_dict(record)
        except InvalidSequenceError as exc:
            raise CorpusFormatError(str(exc), lineno) from None
        if corpus and (seq.num_types, seq.target_type) != (corpus[0].num_types, corpus[0].target_type):
            raise CorpusFormatError("num_types/target_type differ from the first sequence", lineno)
        corpus.append(seq)
    return corpus


def read_corpus(path: str | os.PathLike) -> list[EventSequence]:
    return loads_corpus(Path(path).read_text())


def write_corpus(path: str | os.PathLike, corpus: Iterable[EventSequence]) -> None:
    atomic_write(path, dumps_corpus(corpus))


def corpus_fingerprint(corpus: Sequence[EventSequence]) -> dict:
    digest = hashlib.sha256(dumps_corpus(corpus).encode()).hexdigest()
    return {"count": len(corpus), "sha256": digest}


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def atomic_write(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def find_manifest(corpus_path: str | os.PathLike) -> Path | None:
    """Manifest next to a corpus: ``<stem>.manifest.json`` or ``manifest.json``."""
    p = Path(corpus_path)
    for cand in (p.with_name(p.stem + ".manifest.json"), p.with_name("manifest.json")):
        if cand.exists():
            return cand
    return None


def load_names(corpus_path: str | os.PathLike, num_types: int) -> list[str]:
    from .dsl import default_names

    m = find_manifest(corpus_path)
    if m is None:
        return default_names(num_types)
    names = json.loads(m.read_text()).get("names")
    if not names:
        return default_names(num_types)
    if len(names) != num_types:
        raise CorpusFormatError(f"manifest {m} lists {len(names)} names for {num_types} types")
    return list(names)
