"""Deterministic synthetic corpora for tests, smoke runs, and calibration.

All builders share one dialogue skeleton (greeting, one or two ask/answer
rounds over a per-dialogue KB, closing) while every domain uses its own
surface lexicon.  Domains therefore share latent structure but no words,
which is the regime the two-stage training protocol targets.
"""

from __future__ import annotations

import random

from .corpus import Corpus, Dialogue, KBRecord, Speaker, Turn

VALUE_ALPHABET = "abcdefghijkmnpqrstuvwxyz23456789"

TASK_DOMAINS = ("navigate", "weather", "schedule")

TRANSFER_DOMAINS = (
    "STORE_DETAILS",
    "WEATHER_CHECK",
    "UPDATE_CALENDAR",
    "APPOINTMENT_REMINDER",
    "CONTACT_MANAGER",
    "ALARM_SET",
    "SKI_BOT",
    "ORDER_PIZZA",
    "BANK_BOT",
    "GAME_RULES",
)

_INTENTS = ("greet", "welcome", "ask", "give", "thanks", "bye")
_VARIANTS = 3


def _lexicon(prefix: str) -> dict:
    words = {
        intent: [f"{prefix}{intent}{v}" for v in range(_VARIANTS)] for intent in _INTENTS
    }
    words["slots"] = [f"{prefix}slota", f"{prefix}slotb"]
    return words


def _value(prefix: str, rng: random.Random) -> str:
    return prefix + "".join(rng.choice(VALUE_ALPHABET) for _ in range(4))


def _scripted_dialogue(
    dialogue_id: str,
    domain: str,
    lex: dict,
    value_prefix: str,
    rng: random.Random,
    with_kb: bool,
) -> Dialogue:
    slot = rng.choice(lex["slots"])
    value = _value(value_prefix, rng)
    turns = [
        Turn(Speaker.USER, rng.choice(lex["greet"])),
        Turn(Speaker.SYSTEM, rng.choice(lex["welcome"])),
        Turn(Speaker.USER, f"{rng.choice(lex['ask'])} {slot}"),
        Turn(Speaker.SYSTEM, f"{rng.choice(lex['give'])} {value}"),
        Turn(Speaker.USER, rng.choice(lex["thanks"])),
        Turn(Speaker.SYSTEM, rng.choice(lex["bye"])),
    ]
    kb = (KBRecord(((slot, value),)),) if with_kb else ()
    return Dialogue(dialogue_id, domain, tuple(turns), kb)


def build_task_corpus(dialogues_per_domain: int = 100, seed: int = 7) -> Corpus:
    """Three KB-grounded task domains with disjoint lexicons (2 source + 1 target)."""
    rng = random.Random(seed)
    prefixes = {"navigate": "nav", "weather": "wea", "schedule": "sch"}
    dialogues = []
    for domain in TASK_DOMAINS:
        lex = _lexicon(prefixes[domain])
        for i in range(dialogues_per_domain):
            dialogues.append(
                _scripted_dialogue(
                    f"{domain}-{i}", domain, lex, prefixes[domain], rng, with_kb=True
                )
            )
    return Corpus("synthetic-task", tuple(dialogues))


def build_transfer_corpus(dialogues_per_domain: int = 20, seed: int = 11) -> Corpus:
    """Multi-domain KB-free transfer corpus with the shared dialogue skeleton."""
    rng = random.Random(seed)
    dialogues = []
    for di, domain in enumerate(TRANSFER_DOMAINS):
        lex = _lexicon(f"t{di}")
        for i in range(dialogues_per_domain):
            dialogues.append(
                _scripted_dialogue(
                    f"{domain}-{i}", domain, lex, f"t{di}", rng, with_kb=False
                )
            )
    return Corpus("synthetic-transfer", tuple(dialogues))


TEMPLATE_CLASSES = (
    ("hello", "there", "friend", "!"),
    ("what", "time", "is", "the", "meeting", "?"),
    ("set", "an", "alarm", "for", "me", "."),
    ("thanks", "bye", "!"),
)

_FILLERS = (("oh",), ("well",), ("hmm",), ("so",), ())


def build_template_corpus(per_class: int = 40, seed: int = 3) -> tuple[Corpus, list[int]]:
    """Utterances drawn from four templated classes, with class labels.

    Each dialogue holds one user turn; labels align with dialogue order.
    """
    rng = random.Random(seed)
    utterances: list[str] = []
    labels: list[int] = []
    for ci, template in enumerate(TEMPLATE_CLASSES):
        for _ in range(per_class):
            text = " ".join(rng.choice(_FILLERS) + template)
            utterances.append(text)
            labels.append(ci)
    order = list(range(len(utterances)))
    rng.shuffle(order)
    dialogues = tuple(
        Dialogue(str(j), "templates", (Turn(Speaker.USER, utterances[i]),))
        for j, i in enumerate(order)
    )
    return Corpus("synthetic-templates", dialogues), [labels[i] for i in order]


def build_copy_corpus(n_dialogues: int = 200, seed: int = 5) -> tuple[Corpus, list[str]]:
    """Single-exchange dialogues whose response echoes a per-dialogue KB value."""
    rng = random.Random(seed)
    dialogues = []
    values = []
    for i in range(n_dialogues):
        value = "".join(rng.choice(VALUE_ALPHABET) for _ in range(4))
        values.append(value)
        dialogues.append(
            Dialogue(
                str(i),
                "copytask",
                (
                    Turn(Speaker.USER, "what is the code ?"),
                    Turn(Speaker.SYSTEM, f"the code is {value} ."),
                ),
                (KBRecord((("code", value),)),),
            )
        )
    return Corpus("synthetic-copy", tuple(dialogues)), values
