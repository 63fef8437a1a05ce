"""Synthetic chained-arithmetic tasks, GSM-style ingestion and tokenization."""

from __future__ import annotations

import json
import logging
import random
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

COT = "<COT>"
ANS = "<ANS>"
EOS = "<EOS>"
PAUSE = "<pause>"
PAD = "<pad>"
SPECIALS = (PAD, COT, ANS, EOS, PAUSE)

KEYWORDS = ("add", "sub", "mul")
OP_WORD = {"+": "add", "-": "sub", "*": "mul"}
SYNTHETIC_CHARS = tuple("0123456789+-*=; ?")


class Tokenizer:
    """Character-level tokenizer with multi-character atoms.

    Atoms (special markers and keywords) are matched greedily before single
    characters, so ``detokenize(tokenize(s)) == s`` for any string over the
    symbol table.
    """

    def __init__(self, chars: Sequence[str], atoms: Sequence[str] = ()):
        symbols = list(SPECIALS) + list(atoms) + list(chars)
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in tokenizer table")
        self.symbols = symbols
        self.ids = {s: i for i, s in enumerate(symbols)}
        multi = sorted((s for s in symbols if len(s) > 1), key=len, reverse=True)
        self._pattern = re.compile("|".join(re.escape(s) for s in multi) + "|." if multi else ".", re.S)

    @classmethod
    def synthetic(cls) -> "Tokenizer":
        return cls(SYNTHETIC_CHARS, KEYWORDS)

    @classmethod
    def ascii(cls) -> "Tokenizer":
        return cls(tuple(string.printable[:95]) + ("\n",))

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def cot_id(self) -> int:
        return self.ids[COT]

    @property
    def ans_id(self) -> int:
        return self.ids[ANS]

    @property
    def eos_id(self) -> int:
        return self.ids[EOS]

    @property
    def pause_id(self) -> int:
        return self.ids[PAUSE]

    def tokenize(self, text: str) -> list[int]:
        out = []
        for m in self._pattern.finditer(text):
            sym = m.group(0)
            if sym not in self.ids:
                raise ValueError(f"unknown symbol {sym!r}")
            out.append(self.ids[sym])
        return out

    def detokenize(self, tokens: Iterable[int]) -> str:
        try:
            return "".join(self.symbols[t] for t in tokens)
        except IndexError as exc:
            raise ValueError("token id out of range") from exc

    def to_json(self) -> dict:
        return {"symbols": self.symbols}

    @classmethod
    def from_json(cls, obj: dict) -> "Tokenizer":
        symbols = obj["symbols"]
        if tuple(symbols[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("tokenizer table does not start with the special markers")
        rest = symbols[len(SPECIALS):]
        atoms = [s for s in rest if len(s) > 1]
        chars = [s for s in rest if len(s) == 1]
        tok = cls(chars, atoms)
        if tok.symbols != symbols:
            raise ValueError("tokenizer table must list atoms before characters")
        return tok


@dataclass
class ReasoningInstance:
    """One (query, chain, answer) triple.

    ``query`` holds the question tokens. ``chain`` starts with the ``<COT>``
    marker followed by the reasoning text, and ``answer`` starts with
    ``<ANS>`` and ends with ``<EOS>``; the concatenation ``query + chain +
    answer`` is exactly what a chain-of-thought model is trained on.
    """

    id: str
    question: str
    chain_text: str
    answer_text: str
    query: list[int] = field(default_factory=list)
    chain: list[int] = field(default_factory=list)
    answer: list[int] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.query)

    @property
    def m(self) -> int:
        return len(self.chain)

    @property
    def o(self) -> int:
        return len(self.answer)

    def full_sequence(self) -> list[int]:
        return self.query + self.chain + self.answer

    def to_json(self) -> dict:
        return {"id": self.id, "question": self.question, "chain": self.chain_text, "answer": self.answer_text}


def encode(inst_id: str, question: str, chain: str, answer: str, tok: Tokenizer) -> ReasoningInstance:
    return ReasoningInstance(
        id=inst_id,
        question=question,
        chain_text=chain,
        answer_text=answer,
        query=tok.tokenize(question),
        chain=[tok.cot_id] + tok.tokenize(chain),
        answer=[tok.ans_id] + tok.tokenize(answer) + [tok.eos_id],
    )


def _apply(op: str, x: int, y: int) -> int:
    if op == "+":
        return x + y
    if op == "-":
        return x - y
    if op == "*":
        return x * y
    raise ValueError(f"unknown operator {op!r}")


def gen_arithmetic(
    seed: int,
    num_steps: int,
    value_range: tuple[int, int] = (1, 9),
    max_value: int = 99,
    tok: Tokenizer | None = None,
) -> ReasoningInstance:
    """A chained arithmetic problem of ``num_steps`` sequential operations.

    Operands are drawn from ``value_range`` (inclusive) and every intermediate
    value stays in ``[0, max_value]``. The question reads ``"3 add 4 mul 2"``,
    the chain lists ``"3+4=7;7*2=14"`` and the answer is ``"14"``.
    """
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    lo, hi = value_range
    if not 0 <= lo <= hi <= max_value:
        raise ValueError("value_range must lie inside [0, max_value]")
    tok = tok or Tokenizer.synthetic()
    rng = random.Random(seed)
    x = rng.randint(lo, hi)
    words = [str(x)]
    steps = []
    for _ in range(num_steps):
        choices = {}
        for op in "+-*":
            ys = [y for y in range(lo, hi + 1) if 0 <= _apply(op, x, y) <= max_value]
            if ys:
                choices[op] = ys
        op = rng.choice(sorted(choices))
        y = rng.choice(choices[op])
        z = _apply(op, x, y)
        steps.append(f"{x}{op}{y}={z}")
        words += [OP_WORD[op], str(y)]
        x = z
    return encode(f"s{seed}-{num_steps}", " ".join(words), ";".join(steps), str(x), tok)


STEP_RE = re.compile(r"^(\d+)([+\-*])(\d+)=(\d+)$")


def evaluate_chain(chain: str) -> int | None:
    """Brute-force check of a chain: every step must be arithmetically right
    and consume the previous result. Returns the final value or ``None``."""
    prev = None
    for step in chain.split(";"):
        m = STEP_RE.match(step)
        if not m:
            return None
        x, op, y, z = int(m.group(1)), m.group(2), int(m.group(3)), int(m.group(4))
        if prev is not None and x != prev:
            return None
        if _apply(op, x, y) != z:
            return None
        prev = z
    return prev


def gen_corpus(
    seed: int,
    size: int,
    steps: Sequence[int] = (2, 3, 4),
    value_range: tuple[int, int] = (1, 9),
    max_value: int = 99,
    tok: Tokenizer | None = None,
) -> list[ReasoningInstance]:
    """``size`` distinct instances; per-instance seeds come from ``seed``."""
    tok = tok or Tokenizer.synthetic()
    rng = random.Random(seed)
    seen = set()
    out = []
    while len(out) < size:
        s = rng.randrange(2**31)
        inst = gen_arithmetic(s, rng.choice(list(steps)), value_range, max_value, tok)
        if inst.question in seen:
            continue
        seen.add(inst.question)
        out.append(inst)
    return out


CALC_RE = re.compile(r"<<[^>]*>>")


def normalize_answer(text: str) -> str:
    return re.sub(r"[\s,]", "", text)


def load_gsm_jsonl(path: str | Path, tok: Tokenizer | None = None) -> list[ReasoningInstance]:
    """Read GSM8K-format lines ``{"question", "answer"}`` where the answer
    holds the reasoning, a ``####`` delimiter and the final value.

    Calculator annotations ``<<...>>`` are removed from the chain. Lines that
    fail to parse or contain symbols outside the tokenizer are skipped with a
    warning.
    """
    tok = tok or Tokenizer.ascii()
    out: list[ReasoningInstance] = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                question = row["question"].strip()
                body, final = row["answer"].split("####")
                chain = CALC_RE.sub("", body).strip()
                answer = normalize_answer(final)
                if not question or not chain or not answer:
                    raise ValueError("empty field")
                out.append(encode(str(row.get("id", lineno)), question, chain, answer, tok))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                skipped += 1
                log.warning("skipping line %d of %s: %s", lineno, path, exc)
    if skipped:
        log.warning("%s: skipped %d malformed line(s)", path, skipped)
    return out


def write_jsonl(path: str | Path, instances: Iterable[ReasoningInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), sort_keys=True) + "\n")


def read_jsonl(path: str | Path, tok: Tokenizer) -> list[ReasoningInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out.append(encode(row["id"], row["question"], row["chain"], row["answer"], tok))
    return out
