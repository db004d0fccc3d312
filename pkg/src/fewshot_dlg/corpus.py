"""Dialogue corpus handling: loading, normalization, tokenization, sampling.

The internal canonical schema is NORMALIZED_JSON; the SMD and MetaLWOz
loaders are adapters onto it.  All corpus objects are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

from .errors import EmptyDialogue, ParseError, SchemaError, UnknownDomain

logger = logging.getLogger(__name__)

# Special tokens, in vocabulary index order.
PAD = "<pad>"
UNK = "<unk>"
BOS = "<bos>"
EOS = "<eos>"
USR = "<usr>"
SYS = "<sys>"
KB_OPEN = "<kb>"
KB_CLOSE = "</kb>"
SPECIALS = (PAD, UNK, BOS, EOS, USR, SYS, KB_OPEN, KB_CLOSE)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class Speaker(enum.Enum):
    USER = "USER"
    SYSTEM = "SYSTEM"


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, breaking punctuation into its own tokens.

    Deterministic; empty text yields an empty list.
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Turn:
    speaker: Speaker
    text: str

    @cached_property
    def tokens(self) -> tuple[str, ...]:
        return tuple(tokenize(self.text))


@dataclass(frozen=True)
class KBRecord:
    """One knowledge-base row as an ordered list of (key, value) pairs."""

    attributes: tuple[tuple[str, str], ...]

    def __post_init__(self):
        for key, _ in self.attributes:
            if not key:
                raise ValueError("KB attribute keys must be nonempty")

    @property
    def values(self) -> tuple[str, ...]:
        return tuple(v for _, v in self.attributes)


@dataclass(frozen=True)
class Dialogue:
    id: str
    domain: str
    turns: tuple[Turn, ...]
    kb: tuple[KBRecord, ...] = ()

    def __post_init__(self):
        if not self.domain:
            raise ValueError("dialogue domain must be nonempty")


@dataclass(frozen=True)
class Corpus:
    name: str
    dialogues: tuple[Dialogue, ...]

    @cached_property
    def domains(self) -> frozenset[str]:
        return frozenset(d.domain for d in self.dialogues)

    def restrict(self, domain: str) -> "Corpus":
        return Corpus(self.name, tuple(d for d in self.dialogues if d.domain == domain))

    def without_domains(self, domains) -> "Corpus":
        drop = set(domains)
        return Corpus(self.name, tuple(d for d in self.dialogues if d.domain not in drop))

    def __len__(self) -> int:
        return len(self.dialogues)


@dataclass(frozen=True)
class TrainingInstance:
    """One (context, user query, system response, KB, domain) tuple."""

    context: tuple[tuple[Speaker, tuple[str, ...]], ...]
    x_usr: tuple[str, ...]
    x_sys: tuple[str, ...]
    kb: tuple[str, ...]
    domain: str
    kb_values: tuple[str, ...] = ()


@dataclass(frozen=True)
class FewShotSpec:
    target_domain: str
    ratio: float
    seed: int

    def __post_init__(self):
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"few-shot ratio must be in (0, 1], got {self.ratio}")


def serialize_kb(kb) -> list[str]:
    """Render KB rows as token sequences bracketed by the KB sentinels.

    Each record becomes ``<kb> key-tokens value-tokens ... </kb>``; records
    keep source order so the copy mechanism sees unambiguous row boundaries.
    """
    out: list[str] = []
    for record in kb:
        out.append(KB_OPEN)
        for key, value in record.attributes:
            out.extend(tokenize(key))
            out.extend(tokenize(value))
        out.append(KB_CLOSE)
    return out


class Vocab:
    """Token-to-id mapping with fixed special tokens at the first indices."""

    def __init__(self, tokens):
        self.tokens: tuple[str, ...] = tuple(tokens)
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocab must start with the special tokens")
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocab contains duplicate tokens")
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def encode_seq(self, seq) -> list[int]:
        return [self.encode(t) for t in seq]

    def decode(self, idx: int) -> str:
        return self.tokens[idx]

    def content_hash(self) -> str:
        digest = hashlib.blake2b("\n".join(self.tokens).encode("utf-8"), digest_size=16)
        return digest.hexdigest()

    def save(self, path):
        Path(path).write_text(
            json.dumps({"tokens": list(self.tokens)}, ensure_ascii=False), encoding="utf-8"
        )

    @classmethod
    def load(cls, path) -> "Vocab":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["tokens"])


def build_vocab(corpus: Corpus, min_freq: int = 1) -> Vocab:
    """Count tokens over turns and KB cells; keep those with frequency >= min_freq.

    Ordering is (frequency desc, token asc) so identical corpora always
    produce the identical vocabulary.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    for dialogue in corpus.dialogues:
        for turn in dialogue.turns:
            counts.update(turn.tokens)
        for record in dialogue.kb:
            for key, value in record.attributes:
                counts.update(tokenize(key))
                counts.update(tokenize(value))
    for special in SPECIALS:
        counts.pop(special, None)
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    return Vocab(SPECIALS + tuple(kept))


def to_training_instances(dialogue: Dialogue) -> list[TrainingInstance]:
    """Extract one instance per system turn that has a preceding user turn.

    For a system turn at position i, the nearest earlier user turn is the
    query and everything strictly before that query is the context.
    """
    kb_tokens = tuple(serialize_kb(dialogue.kb))
    kb_values = tuple(v for record in dialogue.kb for v in record.values)
    instances: list[TrainingInstance] = []
    for i, turn in enumerate(dialogue.turns):
        if turn.speaker is not Speaker.SYSTEM:
            continue
        usr_idx = None
        for j in range(i - 1, -1, -1):
            if dialogue.turns[j].speaker is Speaker.USER:
                usr_idx = j
                break
        if usr_idx is None:
            continue
        context = tuple(
            (t.speaker, t.tokens) for t in dialogue.turns[:usr_idx]
        )
        instances.append(
            TrainingInstance(
                context=context,
                x_usr=dialogue.turns[usr_idx].tokens,
                x_sys=turn.tokens,
                kb=kb_tokens,
                domain=dialogue.domain,
                kb_values=kb_values,
            )
        )
    if not instances:
        raise EmptyDialogue(f"dialogue {dialogue.id!r} has no user-preceded system turn")
    return instances


def corpus_instances(corpus: Corpus) -> list[TrainingInstance]:
    """All training instances of a corpus; unusable dialogues are skipped with a warning."""
    out: list[TrainingInstance] = []
    for dialogue in corpus.dialogues:
        try:
            out.extend(to_training_instances(dialogue))
        except EmptyDialogue:
            logger.warning(
                "skipping dialogue %s (%s): no user-preceded system turn",
                dialogue.id,
                dialogue.domain,
            )
    return out


def sample_few_shot(corpus: Corpus, spec: FewShotSpec) -> Corpus:
    """Seeded uniform sample of round(ratio * N) dialogues from the target domain.

    Rounding is half-up with a minimum of one dialogue; the same seed always
    selects the same dialogues.
    """
    if spec.target_domain not in corpus.domains:
        raise UnknownDomain(f"domain {spec.target_domain!r} not in corpus {corpus.name!r}")
    pool = [d for d in corpus.dialogues if d.domain == spec.target_domain]
    n = max(1, math.floor(spec.ratio * len(pool) + 0.5))
    order = list(range(len(pool)))
    random.Random(spec.seed).shuffle(order)
    chosen = sorted(order[:n])
    return Corpus(
        f"{corpus.name}@{spec.target_domain}",
        tuple(pool[i] for i in chosen),
    )


# Transfer-corpus domains known to overlap each main-corpus target domain.
DEFAULT_EXCLUSIONS: dict[str, frozenset[str]] = {
    "navigate": frozenset({"STORE_DETAILS"}),
    "weather": frozenset({"WEATHER_CHECK"}),
    "schedule": frozenset({"UPDATE_CALENDAR", "APPOINTMENT_REMINDER"}),
}


def exclude_overlap(
    transfer: Corpus, target_domain: str, exclusion_map: dict[str, frozenset[str]] | None = None
) -> Corpus:
    """Drop transfer domains that overlap the target domain."""
    mapping = DEFAULT_EXCLUSIONS if exclusion_map is None else exclusion_map
    if target_domain not in mapping:
        raise UnknownDomain(
            f"no exclusion mapping for target domain {target_domain!r}; supply one"
        )
    return transfer.without_domains(mapping[target_domain])


class CorpusFormat(enum.Enum):
    SMD_JSON = "smd"
    METALWOZ_JSON = "metalwoz"
    NORMALIZED_JSON = "normalized"


def load_corpus(path, format: CorpusFormat) -> Corpus:
    """Load a corpus file, normalizing to the internal Dialogue type."""
    path = Path(path)
    if format is CorpusFormat.SMD_JSON:
        return _load_smd(path)
    if format is CorpusFormat.METALWOZ_JSON:
        return _load_metalwoz(path)
    if format is CorpusFormat.NORMALIZED_JSON:
        return _load_normalized(path)
    raise ValueError(f"unsupported corpus format: {format}")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


def _require(record, key, path, locus):
    if key not in record:
        raise SchemaError(f"{path}: {locus}: missing field {key!r}")
    return record[key]


def _load_smd(path: Path) -> Corpus:
    """Adapter for the in-car assistant dataset's driver/assistant structure."""
    data = _read_json(path)
    if not isinstance(data, list):
        raise ParseError(f"{path}: expected a top-level list of dialogues")
    dialogues = []
    for i, entry in enumerate(data):
        locus = f"dialogue {i}"
        scenario = _require(entry, "scenario", path, locus)
        task = _require(scenario, "task", path, locus)
        domain = _require(task, "intent", path, locus)
        did = str(scenario.get("uuid", i))
        turns = []
        for j, raw_turn in enumerate(_require(entry, "dialogue", path, locus)):
            speaker_tag = _require(raw_turn, "turn", path, f"{locus}, turn {j}")
            if speaker_tag == "driver":
                speaker = Speaker.USER
            elif speaker_tag == "assistant":
                speaker = Speaker.SYSTEM
            else:
                raise SchemaError(f"{path}: {locus}, turn {j}: unknown speaker {speaker_tag!r}")
            data_block = _require(raw_turn, "data", path, f"{locus}, turn {j}")
            turns.append(Turn(speaker, _require(data_block, "utterance", path, f"{locus}, turn {j}")))
        kb_block = scenario.get("kb") or {}
        columns = kb_block.get("column_names") or []
        records = []
        for item in kb_block.get("items") or []:
            if columns:
                attrs = tuple((c, str(item[c])) for c in columns if c in item)
            else:
                attrs = tuple((str(k), str(v)) for k, v in item.items())
            records.append(KBRecord(attrs))
        dialogues.append(Dialogue(did, domain, tuple(turns), tuple(records)))
    return Corpus(path.stem, tuple(dialogues))


def _load_metalwoz(path: Path) -> Corpus:
    """Adapter for the multi-domain transfer dataset (JSON-lines, bot speaks first)."""
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        entries = _read_json(path)
    else:
        entries = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc.msg}") from exc
    dialogues = []
    for i, entry in enumerate(entries):
        locus = f"record {i}"
        domain = _require(entry, "domain", path, locus)
        raw_turns = _require(entry, "turns", path, locus)
        did = str(entry.get("id", i))
        turns = tuple(
            Turn(Speaker.SYSTEM if j % 2 == 0 else Speaker.USER, utterance)
            for j, utterance in enumerate(raw_turns)
        )
        dialogues.append(Dialogue(did, domain, turns))
    return Corpus(path.stem, tuple(dialogues))


def _load_normalized(path: Path) -> Corpus:
    data = _read_json(path)
    name = _require(data, "name", path, "root")
    dialogues = []
    for i, entry in enumerate(_require(data, "dialogues", path, "root")):
        locus = f"dialogue {i}"
        turns = tuple(
            Turn(
                Speaker(_require(t, "speaker", path, f"{locus}, turn {j}")),
                _require(t, "text", path, f"{locus}, turn {j}"),
            )
            for j, t in enumerate(_require(entry, "turns", path, locus))
        )
        records = tuple(
            KBRecord(
                tuple(
                    (_require(a, "key", path, locus), _require(a, "value", path, locus))
                    for a in record
                )
            )
            for record in entry.get("kb", [])
        )
        dialogues.append(
            Dialogue(
                str(_require(entry, "id", path, locus)),
                _require(entry, "domain", path, locus),
                turns,
                records,
            )
        )
    return Corpus(name, tuple(dialogues))


def corpus_to_dict(corpus: Corpus) -> dict:
    """Canonical-order plain-data form of a corpus (the NORMALIZED_JSON schema)."""
    return {
        "name": corpus.name,
        "dialogues": [
            {
                "id": d.id,
                "domain": d.domain,
                "turns": [{"speaker": t.speaker.value, "text": t.text} for t in d.turns],
                "kb": [
                    [{"key": k, "value": v} for k, v in record.attributes]
                    for record in d.kb
                ],
            }
            for d in corpus.dialogues
        ],
    }


def save_corpus(corpus: Corpus, path) -> None:
    """Write NORMALIZED_JSON; canonical key order and UTF-8 make saves byte-stable."""
    payload = json.dumps(corpus_to_dict(corpus), ensure_ascii=False, indent=2) + "\n"
    Path(path).write_text(payload, encoding="utf-8")
