import math
from pathlib import Path

import numpy as np
import pytest

from mqnt.errors import (
    ContextLengthError,
    ShotError,
    SizeError,
    TemplateError,
    VocabularyError,
)
from mqnt.evaluation import (
    SHOT_DEFAULTS,
    TASKS,
    VOCAB_SIZE,
    EvalItem,
    MetricValue,
    PromptTemplate,
    build_eval_items,
    decode,
    encode,
    mc_accuracy,
    perplexity,
    render_prompt,
    render_prompt_text,
    score_choice,
    score_item,
)
from mqnt.grids import QuantConfig
from mqnt.model import ModelConfig, TinyDecoder
from mqnt.quantizers import MethodSpec, compose_quantize

import prompt_fixtures as pf

GOLDEN = Path(__file__).parent / "golden" / "prompts"


# ----------------------------------------------------------- stub models


class Cfg:
    def __init__(self, context_len=4096, vocab_size=VOCAB_SIZE):
        self.context_len = context_len
        self.vocab_size = vocab_size


class UniformModel:
    """All-zero logits: every token equally likely."""

    def __init__(self, vocab=VOCAB_SIZE, context_len=4096):
        self.config = Cfg(context_len, vocab)

    def forward(self, tokens):
        return np.zeros((len(tokens), self.config.vocab_size))


class OracleModel:
    """Puts a huge logit on the true next token at every position."""

    def __init__(self, corpus, vocab=VOCAB_SIZE):
        self.config = Cfg(4096, vocab)
        self._next = {i: t for i, t in enumerate(np.asarray(corpus)[1:])}

    def forward(self, tokens):
        out = np.zeros((len(tokens), self.config.vocab_size))
        for i in range(len(tokens) - 1):
            out[i, tokens[i + 1]] = 60.0
        return out


class TableModel:
    """Logits depend on absolute position only (causally consistent)."""

    def __init__(self, table, context_len=None):
        self.table = np.asarray(table, dtype=float)
        self.config = Cfg(context_len or len(self.table), self.table.shape[1])

    def forward(self, tokens):
        return self.table[: len(tokens)].copy()


class BiasModel:
    """Adds a fixed per-token bias to uniform logits at every row."""

    def __init__(self, bias, context_len=4096):
        self.bias = np.asarray(bias, dtype=float)
        self.config = Cfg(context_len, len(self.bias))

    def forward(self, tokens):
        return np.tile(self.bias, (len(tokens), 1))


def ref_log_softmax(row):
    m = max(row)
    lse = m + math.log(math.fsum(math.exp(v - m) for v in row))
    return [v - lse for v in row]


class Rec:
    def __init__(self, fields, gold):
        self.fields = fields
        self.gold = gold


# ------------------------------------------------------------- tokenizer


def test_encode_ascii_bytes():
    np.testing.assert_array_equal(encode("Ab"), [65, 98])


def test_encode_decode_round_trip_multibyte():
    s = "答案: C // done"
    assert decode(encode(s)) == s
    assert encode(s).dtype == np.int64


def test_decode_range_check():
    with pytest.raises(VocabularyError):
        decode([65, 256])


# -------------------------------------------------------------- templates


@pytest.mark.parametrize("task", TASKS)
def test_template_scaffold_round_trip(task):
    from importlib import resources

    tpl = PromptTemplate.load(task)
    raw = resources.files("mqnt").joinpath(f"templates/{task.lower()}.txt").read_bytes()
    assert tpl.scaffold_text().encode("utf-8") == raw


def test_template_slots_sa():
    tpl = PromptTemplate.load("SA")
    assert tpl.slots == ("Text", "Prediction")
    assert tpl.input_slots == ("input",)
    assert tpl.has_instruction_header


def test_template_cds_headerless():
    tpl = PromptTemplate.load("CDS")
    assert not tpl.has_instruction_header
    assert tpl.instruction_text == "以下是中国考试的单项选择题，请选出其中的正确答案。"
    assert tpl.input_slots == ("input_1", "input_2", "input_3", "input_4", "input_5")


def test_template_unknown_task():
    with pytest.raises(TemplateError):
        PromptTemplate.load("QA")


def test_shot_defaults():
    assert SHOT_DEFAULTS["EQA"] == 1
    assert SHOT_DEFAULTS["SA"] == 3
    assert SHOT_DEFAULTS["NLI"] == 3
    assert SHOT_DEFAULTS["TD"] == 2
    assert SHOT_DEFAULTS["CDS"] == 5
    assert SHOT_DEFAULTS["generic_mc"] == 5


# -------------------------------------------------------------- rendering


@pytest.mark.parametrize("fname,task,item,shots,exemplars", pf.GOLDEN_RENDERS)
def test_render_matches_golden(fname, task, item, shots, exemplars):
    tpl = PromptTemplate.load(task)
    text = render_prompt_text(tpl, item, shots=shots, exemplars=exemplars)
    assert text.encode("utf-8") == (GOLDEN / fname).read_bytes()


def test_render_default_shots_consume_pool():
    tpl = PromptTemplate.load("TD")
    text = render_prompt_text(tpl, pf.TD_ITEM, shots=None, exemplars=pf.TD_EXEMPLARS)
    # TD defaults to 2-shot: two filled lines between format and input
    body = text.split("### Format ###\n")[1].split("### Input ###\n")[0]
    lines = body.split("\n")[1:-1]  # drop the format line and trailing ''
    assert len(lines) == 2
    assert lines[0] == "Text: thanks for the detailed writeup // Prediction: benign"


def test_render_zero_shot_has_no_exemplar_lines():
    tpl = PromptTemplate.load("SA")
    text = render_prompt_text(tpl, pf.SA_ZERO_SHOT_ITEM, shots=0, exemplars=pf.SA_EXEMPLARS)
    assert "### Format ###\nText: {{Text}} // Prediction: {{Prediction}}\n### Input ###\n" in text
    assert text.startswith("### Instruction ###\nSolve the sentiment analysis task.")
    assert text.endswith("Prediction:")


def test_render_missing_slot():
    tpl = PromptTemplate.load("SA")
    with pytest.raises(TemplateError):
        render_prompt_text(tpl, {"wrong": "x"}, shots=0)


def test_render_rejects_injected_placeholder():
    tpl = PromptTemplate.load("SA")
    with pytest.raises(TemplateError):
        render_prompt_text(tpl, {"input": "sneaky {{Text}} value"}, shots=0)


def test_render_shot_errors():
    tpl = PromptTemplate.load("SA")
    with pytest.raises(ShotError):
        render_prompt_text(tpl, pf.SA_ITEM, shots=4, exemplars=pf.SA_EXEMPLARS)
    with pytest.raises(ShotError):
        render_prompt_text(tpl, pf.SA_ITEM, shots=-1)


def test_render_injective_on_distinct_items():
    tpl = PromptTemplate.load("SA")
    seen = set()
    for i in range(50):
        seen.add(render_prompt_text(tpl, {"input": f"clip number {i}"}, shots=0))
    assert len(seen) == 50


def test_render_prompt_tokenizes():
    tpl = PromptTemplate.load("SA")
    text = render_prompt_text(tpl, pf.SA_ITEM, shots=0)
    np.testing.assert_array_equal(render_prompt(tpl, pf.SA_ITEM, shots=0), encode(text))


# ------------------------------------------------------------- perplexity


def test_perplexity_uniform_equals_vocab():
    mv = perplexity(UniformModel(), np.arange(50) % VOCAB_SIZE, context_len=16)
    assert mv.name == "ppl"
    assert abs(mv.value - VOCAB_SIZE) < 1e-6


def test_perplexity_oracle_is_one():
    corpus = np.array([3, 1, 4, 1, 5, 9, 2, 6])
    mv = perplexity(OracleModel(corpus), corpus, context_len=100)
    assert mv.value == pytest.approx(1.0, abs=1e-9)


def test_perplexity_three_token_hand_computed():
    rng = np.random.default_rng(7)
    table = rng.normal(size=(3, 5))
    corpus = [2, 0, 4]
    mv = perplexity(TableModel(table), corpus, context_len=8)
    nll0 = -ref_log_softmax(table[0])[0]
    nll1 = -ref_log_softmax(table[1])[4]
    want = math.exp((nll0 + nll1) / 2.0)
    assert mv.value == pytest.approx(want, rel=1e-12)
    assert mv.n_items == 2


def test_perplexity_window_accounting():
    # length 5 with context 2: windows [0:2],[2:4],[4:5]; the 1-token
    # tail predicts nothing, window heads are never predicted
    rng = np.random.default_rng(8)
    mv = perplexity(TableModel(rng.normal(size=(2, 6))), [1, 2, 3, 4, 5], context_len=2)
    assert mv.n_items == 2


def test_perplexity_corpus_too_short():
    with pytest.raises(SizeError):
        perplexity(UniformModel(), [5])
    with pytest.raises(SizeError):
        perplexity(UniformModel(), [])


def test_perplexity_fp_matches_passthrough_quantized():
    cfg = ModelConfig(vocab_size=64, context_len=32, d_model=16, n_layers=1, n_heads=2, d_ff=32)
    rng = np.random.default_rng(9)
    corpus = rng.integers(0, 64, size=70)
    m = TinyDecoder(cfg, seed=5)
    before = perplexity(m, corpus, context_len=16)
    spec = MethodSpec(method="rtn", cfg=QuantConfig(w_bits=16, a_bits=16, group_size=8))
    compose_quantize(m, [corpus[:12].tolist()], spec)
    assert len(m.quantized_layers()) == len(m.layer_refs())
    after = perplexity(m, corpus, context_len=16)
    assert after.value == before.value


# ------------------------------------------------------------ choice score


def test_score_choice_empty_context_single_token():
    rng = np.random.default_rng(10)
    table = rng.normal(size=(4, 7))
    total, per_tok = score_choice(TableModel(table), [], [3])
    want = ref_log_softmax(table[0])[3]
    assert total == pytest.approx(want, rel=1e-12)
    assert per_tok == total


def test_score_choice_two_token_hand_sum():
    rng = np.random.default_rng(11)
    table = rng.normal(size=(5, 6))
    total, per_tok = score_choice(TableModel(table), [1], [4, 2])
    want = ref_log_softmax(table[0])[4] + ref_log_softmax(table[1])[2]
    assert total == pytest.approx(want, rel=1e-12)
    assert per_tok == pytest.approx(want / 2.0, rel=1e-12)


def test_score_choice_deterministic():
    cfg = ModelConfig(vocab_size=32, context_len=24, d_model=16, n_layers=1, n_heads=2, d_ff=32)
    m = TinyDecoder(cfg, seed=6)
    a = score_choice(m, [1, 2, 3], [4, 5])
    b = score_choice(m, [1, 2, 3], [4, 5])
    assert a == b


def test_score_choice_additive_under_split():
    cfg = ModelConfig(vocab_size=32, context_len=24, d_model=16, n_layers=1, n_heads=2, d_ff=32)
    m = TinyDecoder(cfg, seed=12)
    ctx, first, second = [7, 3], [9, 4], [1, 8, 2]
    whole, _ = score_choice(m, ctx, first + second)
    head, _ = score_choice(m, ctx, first)
    tail, _ = score_choice(m, ctx + first, second)
    assert whole == pytest.approx(head + tail, rel=1e-12, abs=1e-12)


def test_score_choice_context_overflow():
    m = UniformModel(context_len=4)
    with pytest.raises(ContextLengthError):
        score_choice(m, [1, 2, 3], [4, 5])


def test_score_choice_rejects_empty_choice():
    with pytest.raises(ValueError):
        score_choice(UniformModel(), [1], [])


def test_score_item_normalizations_can_disagree():
    # lp(5) ~ -2.18, lp(7) ~ -1.18: the 4-token choice wins per-token
    # (-1.18 > -2.18) but loses on sums (4 * -1.18 < -2.18)
    bias = np.zeros(16)
    bias[5] = 1.0
    bias[7] = 2.0
    model = BiasModel(bias)
    item = EvalItem(context=[0, 1], choices=[[5], [7, 7, 7, 7]], gold_index=0)
    by_sum = score_item(model, item, normalization="sum")
    by_tok = score_item(model, item, normalization="per_token")
    assert int(np.argmax(by_sum)) == 0
    assert int(np.argmax(by_tok)) == 1
    with pytest.raises(ValueError):
        score_item(model, item, normalization="mean")


# ------------------------------------------------------------- mc accuracy


def sa_records(golds):
    return [Rec({"input": f"sample {i}"}, g) for i, g in enumerate(golds)]


def test_mc_accuracy_rigged_oracle():
    choices = [" negative", " positive", " neutral"]
    bias = np.zeros(VOCAB_SIZE)
    bias[ord("p")] = 30.0  # only " positive" starts with 'p' after the space
    tpl = PromptTemplate.load("SA")
    mv = mc_accuracy(BiasModel(bias), sa_records([1, 1, 1, 1]), tpl, choices, shots=0)
    assert mv.name == "accuracy"
    assert mv.value == 1.0
    assert mv.n_items == 4

    mv = mc_accuracy(BiasModel(bias), sa_records([0, 1, 2, 1]), tpl, choices, shots=0)
    assert mv.value == 0.5


def test_mc_accuracy_uniform_ties_pick_lowest_index():
    # equal-length choices tie exactly under uniform logits
    choices = [" A", " B", " C", " D"]
    tpl = PromptTemplate.load("generic_mc")
    recs = [
        Rec(
            {
                "input_1": f"question {i}",
                "input_2": "one",
                "input_3": "two",
                "input_4": "six",
                "input_5": "ten",
            },
            g,
        )
        for i, g in enumerate([0, 1, 2, 3])
    ]
    mv = mc_accuracy(UniformModel(), recs, tpl, choices, shots=0)
    assert mv.value == pytest.approx(0.25)


def test_mc_accuracy_ten_items_hand_enumerated():
    rng = np.random.default_rng(13)
    table = rng.normal(size=(512, VOCAB_SIZE))
    model = TableModel(table)
    tpl = PromptTemplate.load("SA")
    choices = [" negative", " positive", " neutral"]
    golds = rng.integers(0, 3, size=10).tolist()
    recs = sa_records(golds)

    correct = 0
    for rec in recs:
        ctx = render_prompt(tpl, rec.fields, shots=0)
        per_tok = []
        for ch in choices:
            toks = encode(ch)
            lps = []
            for j, t in enumerate(toks):
                row = max(len(ctx) + j - 1, 0)
                lps.append(ref_log_softmax(table[row])[t])
            per_tok.append(math.fsum(lps) / len(toks))
        best = max(range(3), key=lambda k: (per_tok[k], -k))
        correct += best == rec.gold
    want = correct / 10.0

    mv = mc_accuracy(model, recs, tpl, choices, shots=0)
    assert mv.value == pytest.approx(want, abs=1e-12)
    assert mv.n_items == 10


def test_mc_accuracy_shot_shortage():
    tpl = PromptTemplate.load("SA")
    with pytest.raises(ShotError):
        mc_accuracy(UniformModel(), sa_records([0]), tpl, [" a", " b"], shots=2, exemplars=pf.SA_EXEMPLARS[:1])


def test_mc_accuracy_argmax_invariant_under_monotone_transform():
    rng = np.random.default_rng(14)
    for _ in range(100):
        scores = rng.normal(size=rng.integers(2, 6))
        base = int(np.argmax(scores))
        for f in (lambda s: 2.0 * s + 3.0, np.exp, lambda s: s**3):
            assert int(np.argmax(f(scores))) == base


def test_build_eval_items_shapes():
    tpl = PromptTemplate.load("SA")
    items = build_eval_items(sa_records([0, 2]), tpl, [" negative", " positive", " neutral"], shots=0)
    assert len(items) == 2
    assert items[0].gold_index == 0 and items[1].gold_index == 2
    assert all(len(it.choices) == 3 for it in items)
    np.testing.assert_array_equal(items[0].choices[1], encode(" positive"))


# ------------------------------------------------------------- validation


def test_eval_item_validation():
    with pytest.raises(ValueError):
        EvalItem(context=[1], choices=[[2]], gold_index=0)
    with pytest.raises(ValueError):
        EvalItem(context=[1], choices=[[2], [3]], gold_index=2)
    with pytest.raises(ValueError):
        EvalItem(context=[1], choices=[[2], []], gold_index=0)


def test_metric_value_validation():
    MetricValue("accuracy", 0.5, 10)
    MetricValue("ppl", 1.0, 1)
    with pytest.raises(ValueError):
        MetricValue("accuracy", 1.2, 10)
    with pytest.raises(ValueError):
        MetricValue("ppl", 0.9, 10)
    with pytest.raises(ValueError):
        MetricValue("accuracy", 0.5, 0)
    with pytest.raises(ValueError):
        MetricValue("f1", 0.5, 1)
