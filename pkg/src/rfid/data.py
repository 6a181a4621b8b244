"""Corpus types, answer normalization, rationale labeling, tokenization and
synthetic multi-passage QA generation."""

from __future__ import annotations

import enum
import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = frozenset(string.punctuation)


class CorpusError(ValueError):
    """A corpus record or file could not be ingested."""


class ConfigurationError(ValueError):
    """A configuration is invalid or infeasible."""


class CompatibilityError(ValueError):
    """A corpus does not fit a checkpoint (K, L or vocabulary differ)."""


class MatchPolicy(str, enum.Enum):
    TOKEN = "token"
    SUBSTRING = "substring"


@dataclass(frozen=True)
class Passage:
    title: str
    context: str

    def __post_init__(self):
        if not self.title.strip() or not self.context.strip():
            raise CorpusError("passage title and context must be non-empty")

    @property
    def text(self) -> str:
        return f"{self.title} {self.context}"


@dataclass(frozen=True)
class QAExample:
    id: str
    question: str
    answers: tuple[str, ...]
    passages: tuple[Passage, ...]
    labels: tuple[bool, ...]

    def __post_init__(self):
        if not self.answers:
            raise CorpusError(f"{self.id}: answers must be non-empty")
        if len(self.labels) != len(self.passages):
            raise CorpusError(f"{self.id}: {len(self.labels)} labels for {len(self.passages)} passages")

    @property
    def K(self) -> int:
        return len(self.passages)

    @classmethod
    def build(cls, id, question, answers, passages, policy=MatchPolicy.TOKEN) -> "QAExample":
        """Construct an example, computing rationale labels from the answers."""
        answers = tuple(answers)
        passages = tuple(passages)
        labels = tuple(label_rationale(p, answers, policy) for p in passages)
        return cls(str(id), question, answers, passages, labels)


def normalize_answer(text: str) -> str:
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _contains_tokens(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    n = len(needle)
    return any(list(haystack[i:i + n]) == list(needle) for i in range(len(haystack) - n + 1))


def label_rationale(passage: Passage, answers: Iterable[str], policy: MatchPolicy = MatchPolicy.TOKEN) -> bool:
    """True if any gold answer occurs as a span of the passage (title + context).

    Answers that normalize to the empty string are ignored.
    """
    text = normalize_answer(passage.text)
    tokens = text.split()
    for answer in answers:
        norm = normalize_answer(answer)
        if not norm:
            continue
        if policy == MatchPolicy.SUBSTRING:
            if norm in text:
                return True
        elif _contains_tokens(tokens, norm.split()):
            return True
    return False


def format_input(question: str, passage: Passage) -> str:
    return f"Question : {question} ; Title : {passage.title} ; Context : {passage.context}"


class Vocabulary:
    """Whitespace-token vocabulary with reserved PAD/BOS/EOS/UNK at ids 0-3."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if not token or any(ch.isspace() for ch in token):
            raise ValueError(f"invalid token {token!r}")
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    @classmethod
    def from_corpus(cls, examples: Iterable[QAExample], min_count: int = 1) -> "Vocabulary":
        """Collect tokens of all formatted inputs and answers, most frequent first."""
        counts: Counter[str] = Counter()
        for ex in examples:
            counts.update(ex.question.split())
            for p in ex.passages:
                counts.update(format_input(ex.question, p).split())
            for a in ex.answers:
                counts.update(a.split())
        kept = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                      key=lambda t: (-counts[t], t))
        return cls(kept)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != RESERVED:
            raise CorpusError(f"{path}: first four lines must be {RESERVED}")
        return cls(lines[4:])


@dataclass(frozen=True)
class TokenizedPair:
    ids: np.ndarray
    attention_mask: np.ndarray


def tokenize(text: str, vocab: Vocabulary, L: int) -> TokenizedPair:
    ids = vocab.encode(text.split())[:L]
    n = len(ids)
    padded = np.full(L, PAD_ID, dtype=np.int64)
    padded[:n] = ids
    mask = np.zeros(L, dtype=bool)
    mask[:n] = True
    return TokenizedPair(padded, mask)


def encode_target(answer: str, vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing pair: decoder input ``BOS y1..yn`` and gold ``y1..yn EOS``, PAD-filled."""
    ids = vocab.encode(answer.split())[:max_len - 1]
    dec_in = np.full(max_len, PAD_ID, dtype=np.int64)
    gold = np.full(max_len, PAD_ID, dtype=np.int64)
    dec_in[0] = BOS_ID
    dec_in[1:len(ids) + 1] = ids
    gold[:len(ids)] = ids
    gold[len(ids)] = EOS_ID
    return dec_in, gold


# -- JSONL I/O ---------------------------------------------------------------

def _parse_record(obj, K: int, policy: MatchPolicy, line_no: int) -> QAExample:
    if not isinstance(obj, dict):
        raise CorpusError(f"line {line_no}: record is not an object")
    for key in ("question", "answers", "ctxs"):
        if key not in obj:
            raise CorpusError(f"line {line_no}: missing field {key!r}")
    answers = obj["answers"]
    if not isinstance(answers, list) or not answers or not all(isinstance(a, str) for a in answers):
        raise CorpusError(f"line {line_no}: 'answers' must be a non-empty list of strings")
    ctxs = obj["ctxs"]
    if not isinstance(ctxs, list) or len(ctxs) < K:
        n = len(ctxs) if isinstance(ctxs, list) else 0
        raise CorpusError(f"line {line_no}: {n} contexts, need at least K={K}")
    try:
        passages = [Passage(str(c["title"]), str(c["text"])) for c in ctxs[:K]]
    except (KeyError, TypeError) as e:
        raise CorpusError(f"line {line_no}: context missing field {e}") from None
    except CorpusError as e:
        raise CorpusError(f"line {line_no}: {e}") from None
    return QAExample.build(obj.get("id", str(line_no)), str(obj["question"]), answers, passages, policy)


def read_corpus(path, K: int, policy: MatchPolicy = MatchPolicy.TOKEN) -> tuple[list[QAExample], list[CorpusError]]:
    """Parse a DPR-style JSONL file, keeping the first ``K`` contexts per record.

    Returns the accepted examples and one error per rejected record.
    """
    examples, rejected = [], []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                rejected.append(CorpusError(f"line {line_no}: malformed JSON ({e.msg})"))
                continue
            try:
                examples.append(_parse_record(obj, K, policy, line_no))
            except CorpusError as e:
                rejected.append(e)
    return examples, rejected


def load_corpus(path, K: int, policy: MatchPolicy = MatchPolicy.TOKEN, skip_invalid: bool = False) -> list[QAExample]:
    examples, rejected = read_corpus(path, K, policy)
    for err in rejected:
        logger.warning("%s: rejected %s", path, err)
    if rejected and not skip_invalid:
        raise CorpusError(f"{path}: {len(rejected)} invalid record(s); first: {rejected[0]}")
    return examples


def labels_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name.split(".")[0] + ".labels.jsonl")


def write_corpus(path, examples: Sequence[QAExample]) -> None:
    """Write examples as JSONL plus the ``<name>.labels.jsonl`` audit sidecar."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"id": ex.id, "question": ex.question, "answers": list(ex.answers),
                   "ctxs": [{"title": p.title, "text": p.context} for p in ex.passages]}
            fh.write(json.dumps(rec) + "\n")
    with open(labels_path(path), "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"id": ex.id, "labels": list(ex.labels)}) + "\n")


# -- synthetic corpus ----------------------------------------------------------

ATTRIBUTES = ("birth", "founding", "opening", "release", "launch", "wedding",
              "coronation", "election", "discovery", "debut", "merger", "closing")
MONTHS = ("january", "february", "march", "april", "may", "june", "july",
          "august", "september", "october", "november", "december")
_ONSETS = "bcdfgklmnprstvz"
_VOWELS = "aeiou"
_CODAS = ("", "n", "r", "l", "x")


def _name_pool(size: int) -> list[str]:
    pool = [o + v + c + v2 for o in _ONSETS for v in _VOWELS for c in _CODAS for v2 in ("", "o", "a")]
    # drop anything colliding with articles or template words
    pool = [w for w in pool if w not in {"a", "an", "the", "is", "of"}]
    if size > len(pool):
        raise ConfigurationError(f"name pool size {size} exceeds {len(pool)} available names")
    return pool[:size]


@dataclass(frozen=True)
class SynthesisConfig:
    """Knobs for the synthetic corpus.

    ``distractor_confusability`` is the fraction of the entity's name tokens
    that every distractor entity reuses; the remaining name tokens and the
    stated value are fresh.
    """
    n_examples: int = 2500
    K: int = 4
    num_rational_range: tuple[int, int] = (1, 1)
    distractor_confusability: float = 0.7
    entity_len: int = 3
    name_pool_size: int = 120
    n_years: int = 60
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.num_rational_range
        if self.K < 1 or not 0 <= lo <= hi <= self.K:
            raise ConfigurationError(f"num_rational_range {self.num_rational_range} invalid for K={self.K}")
        if not 0.0 <= self.distractor_confusability <= 1.0:
            raise ConfigurationError("distractor_confusability must lie in [0, 1]")
        if self.entity_len < 1 or self.n_examples < 1 or self.n_years < 1:
            raise ConfigurationError("entity_len, n_examples and n_years must be positive")
        if self.n_shared == self.entity_len and self.num_rational_range != (self.K, self.K):
            raise ConfigurationError("confusability 1.0 makes distractor entities identical to the real one")

    @property
    def n_shared(self) -> int:
        return int(round(self.distractor_confusability * self.entity_len))

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisConfig":
        d = dict(d)
        if "num_rational_range" in d:
            d["num_rational_range"] = tuple(d["num_rational_range"])
        return cls(**d)


def _question(attr: str, entity: Sequence[str]) -> str:
    return f"what is the {attr} date of {' '.join(entity)}"


def _passage(attr: str, entity: Sequence[str], value: Sequence[str]) -> Passage:
    name = " ".join(entity)
    return Passage(name, f"the {attr} date of {name} is {' '.join(value)}")


def generate_synthetic_corpus(cfg: SynthesisConfig) -> list[QAExample]:
    """Templated (entity, attribute) questions over K passages.

    Rational passages restate the question's entity with the gold date;
    distractors describe a look-alike entity with a different date, so the
    only reliable cue is matching the full entity name against the question.
    All passages share one template, hence identical token lengths.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xDA7A]))
    names = _name_pool(cfg.name_pool_size)
    years = [str(1900 + i) for i in range(cfg.n_years)]
    n_fresh = cfg.entity_len - cfg.n_shared
    if cfg.name_pool_size < cfg.entity_len + n_fresh:
        raise ConfigurationError("name pool too small for entity length")
    lo, hi = cfg.num_rational_range
    if (len(MONTHS) - 1) * (len(years) - 1) < cfg.K - lo:
        raise ConfigurationError("value pool too small for the number of distractors")
    n_keys = len(ATTRIBUTES) * _n_entities(cfg.name_pool_size, cfg.entity_len)
    if cfg.n_examples > n_keys:
        raise ConfigurationError(f"{cfg.n_examples} examples requested but only {n_keys} (entity, attribute) pairs exist")

    seen: set = set()
    examples = []
    width = len(str(cfg.n_examples - 1))
    for i in range(cfg.n_examples):
        while True:
            idx = rng.choice(len(names), size=cfg.entity_len, replace=False)
            entity = tuple(names[j] for j in idx)
            attr = ATTRIBUTES[rng.integers(len(ATTRIBUTES))]
            if (entity, attr) not in seen:
                seen.add((entity, attr))
                break
        gold = (MONTHS[rng.integers(len(MONTHS))], years[rng.integers(len(years))])
        # wrong dates differ from the gold date in both tokens
        months = [m for m in MONTHS if m != gold[0]]
        other_years = [y for y in years if y != gold[1]]
        wrong_ids = rng.choice(len(months) * len(other_years), size=cfg.K - lo, replace=False)
        wrong = [(months[v % len(months)], other_years[v // len(months)]) for v in wrong_ids]
        r = int(rng.integers(lo, hi + 1))
        rational_slots = set(rng.choice(cfg.K, size=r, replace=False).tolist())
        used = set(idx.tolist())
        others = [j for j in range(len(names)) if j not in used]
        passages, truth, w = [], [], 0
        for k in range(cfg.K):
            if k in rational_slots:
                passages.append(_passage(attr, entity, gold))
                truth.append(True)
                continue
            keep = set(rng.choice(cfg.entity_len, size=cfg.n_shared, replace=False).tolist())
            fresh = iter(rng.choice(others, size=n_fresh, replace=False).tolist())
            look_alike = tuple(entity[p] if p in keep else names[next(fresh)] for p in range(cfg.entity_len))
            passages.append(_passage(attr, look_alike, wrong[w]))
            truth.append(False)
            w += 1
        ex = QAExample(f"syn-{cfg.seed}-{i:0{width}d}", _question(attr, entity), (" ".join(gold),),
                       tuple(passages), tuple(truth))
        examples.append(ex)
    return examples


def _n_entities(pool: int, length: int) -> int:
    n = 1
    for i in range(length):
        n *= pool - i
    return n


def split_corpus(examples: Sequence[QAExample], fractions=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    n = len(examples)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    return list(examples[:n_train]), list(examples[n_train:n_train + n_dev]), list(examples[n_train + n_dev:])
