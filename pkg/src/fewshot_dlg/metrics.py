"""Corpus BLEU and entity F1, plus multi-run aggregation.

All functions are pure; scores are returned as percentages in [0, 100].
"""

from __future__ import annotations

import math
import statistics
from collections import Counter
from dataclasses import dataclass, field

from .errors import EmptyInput


@dataclass(frozen=True)
class EvalPair:
    reference: tuple[str, ...]
    hypothesis: tuple[str, ...]
    kb_entities: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.reference:
            raise ValueError("reference must be nonempty")


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(pairs) -> float:
    """Corpus-level BLEU-4, uniform weights, no smoothing.

    Brevity penalty is 1 when the hypothesis length exceeds the reference
    length, else exp(1 - r/h).  Any zero n-gram precision zeroes the score.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("corpus_bleu needs at least one pair")
    clipped = [0] * 4
    totals = [0] * 4
    hyp_len = 0
    ref_len = 0
    for pair in pairs:
        hyp = list(pair.hypothesis)
        ref = list(pair.reference)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hyp_counts = _ngrams(hyp, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += sum(hyp_counts.values())
            clipped[n - 1] += sum(
                min(c, ref_counts[g]) for g, c in hyp_counts.items()
            )
    precisions = [c / t if t > 0 else 0.0 for c, t in zip(clipped, totals)]
    if any(p == 0.0 for p in precisions):
        return 0.0
    log_mean = sum(math.log(p) for p in precisions) / 4.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_mean)


def _contains_subseq(tokens: tuple[str, ...], needle: tuple[str, ...]) -> bool:
    n = len(needle)
    if n == 0 or n > len(tokens):
        return False
    return any(tokens[i : i + n] == needle for i in range(len(tokens) - n + 1))


def _mentioned_entities(tokens, entities) -> set[str]:
    found = set()
    toks = tuple(tokens)
    for ent in entities:
        if _contains_subseq(toks, tuple(ent.split())):
            found.add(ent)
    return found


def entity_f1(pairs) -> tuple[float, float, float]:
    """Micro-averaged (precision, recall, F1) over KB entities, as percentages.

    An entity counts as mentioned when its canonical tokens occur as a
    contiguous subsequence.  The gold set comes from the reference, the
    predicted set from the hypothesis, both against the pair's KB entities.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("entity_f1 needs at least one pair")
    hits = 0
    n_pred = 0
    n_gold = 0
    for pair in pairs:
        gold = _mentioned_entities(pair.reference, pair.kb_entities)
        pred = _mentioned_entities(pair.hypothesis, pair.kb_entities)
        hits += len(gold & pred)
        n_pred += len(pred)
        n_gold += len(gold)
    precision = hits / n_pred if n_pred else 0.0
    recall = hits / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return 100.0 * precision, 100.0 * recall, 100.0 * f1


def aggregate_runs(values) -> tuple[float, float]:
    """Arithmetic mean and sample standard deviation (n-1); std is 0 for n=1."""
    values = list(values)
    if not values:
        raise EmptyInput("aggregate_runs needs at least one value")
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


@dataclass
class MetricCell:
    mean: float
    std: float

    def __str__(self) -> str:
        return f"{self.mean:.1f}±{self.std:.1f}"


@dataclass
class EvalReport:
    """Per-(row, domain, metric) aggregation with the per-run breakdown."""

    rows: list[str] = field(default_factory=list)
    domains: list[str] = field(default_factory=list)
    cells: dict[tuple[str, str, str], MetricCell] = field(default_factory=dict)
    per_run: list[dict] = field(default_factory=list)

    def add(self, row: str, domain: str, metric: str, values) -> None:
        if row not in self.rows:
            self.rows.append(row)
        if domain not in self.domains:
            self.domains.append(domain)
        mean, std = aggregate_runs(values)
        self.cells[(row, domain, metric)] = MetricCell(mean, std)

    def format_table(self) -> str:
        headers = ["Model"]
        for domain in self.domains:
            headers.append(f"{domain} BLEU, %")
            headers.append(f"{domain} Entity F1, %")
        lines = [[h for h in headers]]
        for row in self.rows:
            cells = [row]
            for domain in self.domains:
                for metric in ("bleu", "entity_f1"):
                    cell = self.cells.get((row, domain, metric))
                    cells.append(str(cell) if cell else "-")
            lines.append(cells)
        widths = [max(len(line[i]) for line in lines) for i in range(len(headers))]
        rendered = []
        for line in lines:
            rendered.append("  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip())
        return "\n".join(rendered) + "\n"
