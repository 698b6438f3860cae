"""Perplexity, log-likelihood choice scoring, and prompt assembly.

Text is tokenized at the byte level (UTF-8, vocab 256) so the bundled
models need no learned vocabulary.  Prompts follow the three-block
scaffold shipped under ``mqnt/templates``::

    ### Instruction ###
    <task instruction>
    ### Format ###
    <format line, placeholders shown verbatim>
    ### Input ###
    <input line ending at the answer cue>

Few-shot exemplars are inserted as filled copies of the format line,
one per line, between the format block and the input block.  The format
line itself keeps its ``{{Slot}}`` markers: showing the slot names is
part of the instruction, only exemplar and input lines are filled.

All metric reductions go through ``math.fsum`` so results are
independent of accumulation order.
"""

import math
import re
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.special import log_softmax

from .errors import (
    ContextLengthError,
    ShotError,
    SizeError,
    TemplateError,
    VocabularyError,
)

VOCAB_SIZE = 256

TASKS = ("EQA", "SA", "NLI", "TD", "CDS", "generic_mc")

# few-shot counts used when the caller does not pass an explicit count
SHOT_DEFAULTS = {
    "EQA": 1,
    "SA": 3,
    "NLI": 3,
    "TD": 2,
    "CDS": 5,
    "generic_mc": 5,
}

_FORMAT_MARK = "### Format ###\n"
_INPUT_MARK = "### Input ###\n"
_INSTRUCTION_MARK = "### Instruction ###\n"
_SLOT_RE = re.compile(r"\{\{([^{}]+)\}\}")


def encode(text):
    """UTF-8 bytes of ``text`` as an int64 token array."""
    raw = text.encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode(tokens):
    """Inverse of :func:`encode`.  Tokens must lie in [0, 256)."""
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= VOCAB_SIZE):
        raise VocabularyError("token outside byte range [0, 256)")
    return bytes(arr.astype(np.uint8).tolist()).decode("utf-8")


def _fill(text, values, where):
    """Substitute every {{Slot}} in ``text`` from the ``values`` mapping."""

    def sub(match):
        name = match.group(1)
        if name not in values:
            raise TemplateError(f"missing slot '{name}' in {where}")
        return str(values[name])

    out = _SLOT_RE.sub(sub, text)
    if _SLOT_RE.search(out):
        raise TemplateError(f"unresolved placeholder after filling {where}")
    return out


@dataclass(frozen=True)
class PromptTemplate:
    """One task's prompt scaffold.

    ``format_text`` placeholders name the exemplar slots, ``input_text``
    placeholders name the per-item slots.  ``has_instruction_header`` is
    False only for scaffolds whose instruction line stands alone (the
    Chinese-exam task ships without the ### Instruction ### header).
    """

    task: str
    instruction_text: str
    format_text: str
    input_text: str
    has_instruction_header: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise TemplateError(f"unknown task '{self.task}'")

    @property
    def slots(self):
        """Ordered exemplar slot names from the format line."""
        return tuple(_SLOT_RE.findall(self.format_text))

    @property
    def input_slots(self):
        """Ordered item slot names from the input line."""
        return tuple(_SLOT_RE.findall(self.input_text))

    def scaffold_text(self):
        """The zero-exemplar scaffold, byte-identical to the data file."""
        head = _INSTRUCTION_MARK if self.has_instruction_header else ""
        return (
            head
            + self.instruction_text
            + "\n"
            + _FORMAT_MARK
            + self.format_text
            + "\n"
            + _INPUT_MARK
            + self.input_text
        )

    @classmethod
    def parse(cls, task, text):
        head, sep, rest = text.partition(_FORMAT_MARK)
        if not sep:
            raise TemplateError(f"template '{task}' has no format block")
        fmt, sep, input_text = rest.partition("\n" + _INPUT_MARK)
        if not sep:
            raise TemplateError(f"template '{task}' has no input block")
        has_header = head.startswith(_INSTRUCTION_MARK)
        if has_header:
            head = head[len(_INSTRUCTION_MARK):]
        if not head.endswith("\n"):
            raise TemplateError(f"template '{task}' instruction not newline-terminated")
        return cls(
            task=task,
            instruction_text=head[:-1],
            format_text=fmt,
            input_text=input_text,
            has_instruction_header=has_header,
        )

    @classmethod
    def load(cls, task):
        """Load the bundled scaffold for ``task`` from package data."""
        if task not in TASKS:
            raise TemplateError(f"unknown task '{task}'")
        path = resources.files("mqnt").joinpath(f"templates/{task.lower()}.txt")
        return cls.parse(task, path.read_text(encoding="utf-8"))


def render_prompt_text(template, item_fields, shots=None, exemplars=()):
    """Assemble one prompt string.

    Parameters
    ----------
    template : PromptTemplate
    item_fields : mapping filling the input-line slots
    shots : exemplar count; None picks the task default
    exemplars : records (or mappings) supplying format-line slot values

    The result is scaffold head + ``shots`` filled format lines (each
    newline-terminated) + the input block, ending at the answer cue with
    no trailing newline.
    """
    if shots is None:
        shots = SHOT_DEFAULTS[template.task]
    if shots < 0:
        raise ShotError("shots must be >= 0")
    if shots > len(exemplars):
        raise ShotError(
            f"{template.task} needs {shots} exemplars, only {len(exemplars)} available"
        )
    head = _INSTRUCTION_MARK if template.has_instruction_header else ""
    parts = [
        head,
        template.instruction_text,
        "\n",
        _FORMAT_MARK,
        template.format_text,
        "\n",
    ]
    for ex in exemplars[:shots]:
        values = ex.fields if hasattr(ex, "fields") else ex
        parts.append(_fill(template.format_text, values, f"{template.task} exemplar"))
        parts.append("\n")
    parts.append(_INPUT_MARK)
    parts.append(_fill(template.input_text, item_fields, f"{template.task} input"))
    return "".join(parts)


def render_prompt(template, item_fields, shots=None, exemplars=()):
    """Tokenized :func:`render_prompt_text`."""
    return encode(render_prompt_text(template, item_fields, shots, exemplars))


@dataclass(frozen=True)
class EvalItem:
    """One multiple-choice scoring unit: rendered context + choices."""

    context: np.ndarray
    choices: tuple
    gold_index: int

    def __post_init__(self):
        object.__setattr__(self, "context", np.asarray(self.context, dtype=np.int64))
        object.__setattr__(
            self,
            "choices",
            tuple(np.asarray(c, dtype=np.int64) for c in self.choices),
        )
        if len(self.choices) < 2:
            raise ValueError("EvalItem needs at least 2 choices")
        if not 0 <= self.gold_index < len(self.choices):
            raise ValueError("gold_index out of range")
        for c in self.choices:
            if c.size == 0:
                raise ValueError("empty choice sequence")


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float
    n_items: int

    def __post_init__(self):
        if self.name not in ("ppl", "accuracy"):
            raise ValueError(f"unknown metric '{self.name}'")
        if self.n_items < 1:
            raise ValueError("n_items must be >= 1")
        if self.name == "accuracy" and not 0.0 <= self.value <= 1.0:
            raise ValueError("accuracy outside [0, 1]")
        if self.name == "ppl" and self.value < 1.0:
            raise ValueError("perplexity below 1")

    def to_dict(self):
        return {"name": self.name, "value": self.value, "n_items": self.n_items}


def perplexity(model, corpus, context_len=None):
    """exp of mean negative log-likelihood per predicted token.

    The corpus is cut into non-overlapping windows of ``context_len``
    tokens; the first token of each window is never predicted.  A
    trailing single-token window contributes nothing.
    """
    tokens = np.asarray(corpus, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size < 2:
        raise SizeError("perplexity needs a flat corpus of at least 2 tokens")
    if context_len is None:
        context_len = model.config.context_len
    if context_len < 2:
        raise SizeError("context_len must be >= 2")
    nlls = []
    for start in range(0, tokens.size, context_len):
        window = tokens[start : start + context_len]
        if window.size < 2:
            continue
        logp = log_softmax(model.forward(window), axis=-1)
        picked = logp[np.arange(window.size - 1), window[1:]]
        nlls.extend((-picked).tolist())
    mean_nll = math.fsum(nlls) / len(nlls)
    return MetricValue("ppl", math.exp(mean_nll), n_items=len(nlls))


def score_choice(model, context, choice, context_len=None):
    """Log-likelihood of ``choice`` tokens after ``context``.

    Returns ``(sum_logprob, per_token_logprob)``.  Token at combined
    position p is read from the logits row max(p-1, 0), so a choice
    starting a sequence is scored from the model's first output row.
    """
    ctx = np.asarray(context, dtype=np.int64)
    ch = np.asarray(choice, dtype=np.int64)
    if ch.size == 0:
        raise ValueError("empty choice")
    if context_len is None:
        context_len = model.config.context_len
    combined = np.concatenate([ctx, ch])
    if combined.size > context_len:
        raise ContextLengthError(
            f"context + choice is {combined.size} tokens, limit {context_len}"
        )
    logp = log_softmax(model.forward(combined), axis=-1)
    rows = np.maximum(np.arange(ctx.size, combined.size) - 1, 0)
    picked = logp[rows, ch]
    total = math.fsum(picked.tolist())
    return total, total / ch.size


def score_item(model, item, normalization="per_token", context_len=None):
    """Per-choice scores for one :class:`EvalItem` under a normalization."""
    if normalization not in ("sum", "per_token"):
        raise ValueError(f"unknown normalization '{normalization}'")
    scores = np.empty(len(item.choices))
    for j, ch in enumerate(item.choices):
        total, per_tok = score_choice(model, item.context, ch, context_len)
        scores[j] = per_tok if normalization == "per_token" else total
    return scores


def build_eval_items(records, template, choices, shots=None, exemplars=()):
    """Render records into :class:`EvalItem` units.

    ``records`` need ``fields`` (input-line slot values) and ``gold``
    (choice index); ``choices`` are the candidate answer strings shared
    by the task, each scored as its own token continuation.
    """
    choice_tokens = tuple(encode(c) for c in choices)
    items = []
    for rec in records:
        ctx = render_prompt(template, rec.fields, shots, exemplars)
        items.append(EvalItem(ctx, choice_tokens, int(rec.gold)))
    return items


def mc_accuracy(
    model,
    records,
    template,
    choices,
    shots=None,
    exemplars=(),
    normalization="per_token",
    context_len=None,
):
    """Fraction of items whose argmax choice is the gold choice.

    Ties go to the lowest choice index.  Items are independent, so the
    per-item loop may be fanned out; the reduction is a plain count.
    """
    items = build_eval_items(records, template, choices, shots, exemplars)
    correct = 0
    for item in items:
        scores = score_item(model, item, normalization, context_len)
        if int(np.argmax(scores)) == item.gold_index:
            correct += 1
    return MetricValue("accuracy", correct / len(items), n_items=len(items))
