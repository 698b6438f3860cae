"""Deterministic bundled corpora and task datasets.

Desk-scale stand-ins for the external benchmark suites: every dataset
is generated from word banks with a seeded generator, so the same id
and split always reproduce the same records.  The banks are disjoint
across datasets on purpose; cross-dataset calibration is only a real
shift if the byte statistics actually differ.

Datasets
--------
sst_films    SA over film-review snippets
amz_gadgets  SA over gadget-review snippets (different vocabulary)
civq_forum   TD over forum comments
mnli_pairs   NLI premise/hypothesis pairs built from scene triples
ceval_mc     CDS Chinese single-choice questions, 3 subject tags
arc_mc       generic_mc English trivia, 4 options

``build_lm_corpus`` emits a byte-token stream of simple declarative
sentences; the tiny decoder overfits it quickly enough that quantizers
separate by perplexity.
"""

import hashlib

import numpy as np

from .calibration import DatasetHandle, Record
from .evaluation import encode

SA_CHOICES = [" negative", " positive", " neutral"]
TD_CHOICES = [" benign", " toxic"]
NLI_CHOICES = [" entailment", " neutral", " contradiction"]
MC_CHOICES = [" A", " B", " C", " D"]

# --------------------------------------------------------------- word banks

_FILM = {
    "negative": ["a limp, joyless slog", "tedious from its first scene",
                 "the plot drags and the jokes land flat", "a hollow remake nobody asked for",
                 "clumsy pacing sinks every scene"],
    "positive": ["a warm, generous piece of filmmaking", "crisp dialogue and a daring finale",
                 "the cast glows in every frame", "an inventive, big-hearted picture",
                 "quietly devastating and beautifully shot"],
    "neutral": ["a film that exists", "screened at two festivals this spring",
                "roughly two hours long with credits", "based on a mid-list novel",
                "features several speaking roles"],
}

_GADGET = {
    "negative": ["battery died within a week", "the hinge snapped on day two",
                 "firmware update bricked the unit", "rattles and overheats under light load",
                 "support never answered my ticket"],
    "positive": ["charges fast and pairs instantly", "solid aluminium build, great value",
                 "the display is bright and accurate", "setup took under a minute",
                 "still flawless after a year of use"],
    "neutral": ["ships in a brown box", "weighs about two hundred grams",
                "available in grey and silver", "uses a standard cable",
                "manual comes in six languages"],
}

_FORUM = {
    "benign": ["thanks for the detailed writeup", "this matches what i measured on my end",
               "could you share the config you used", "great summary, bookmarking this thread",
               "updated the wiki with these steps"],
    "toxic": ["you are a waste of everyone's time", "only an idiot would post this garbage",
              "delete your account and log off forever", "this thread is brain rot, as is its author",
              "nobody wants your worthless opinions here"],
}

_SCENES = [
    ("A man", "is playing a guitar", "on stage", "is performing music"),
    ("A woman", "is riding a bicycle", "down the hill", "is moving outdoors"),
    ("A child", "is drawing a horse", "at the table", "is making a picture"),
    ("A chef", "is plating a dessert", "in the kitchen", "is preparing food"),
    ("A runner", "is crossing the bridge", "at dawn", "is exercising"),
    ("A teacher", "is reading a poem", "to the class", "is speaking aloud"),
    ("A farmer", "is loading the cart", "near the barn", "is working outside"),
    ("A painter", "is mixing the colors", "by the window", "is preparing paint"),
]
_NLI_NEUTRAL_TAILS = ["looks tired today", "bought new shoes last week",
                      "plans to travel in june", "hums an old tune"]

# question, correct, three distractors
_CEVAL = {
    "history": [
        ("唐朝的都城是哪里？", "长安", ["洛阳", "南京", "开封"]),
        ("活字印刷术是谁发明的？", "毕昇", ["蔡伦", "张衡", "鲁班"]),
        ("丝绸之路开辟于哪个朝代？", "汉朝", ["秦朝", "宋朝", "明朝"]),
        ("科举制度创立于哪个朝代？", "隋朝", ["唐朝", "元朝", "清朝"]),
        ("郑和下西洋发生在哪个朝代？", "明朝", ["宋朝", "元朝", "清朝"]),
    ],
    "physics": [
        ("光在真空中的速度约是多少？", "每秒三十万公里", ["每秒三千公里", "每秒三百公里", "每秒三万公里"]),
        ("水的沸点在标准大气压下是多少？", "一百摄氏度", ["九十摄氏度", "八十摄氏度", "一百一十摄氏度"]),
        ("声音不能在哪种介质中传播？", "真空", ["空气", "水", "钢铁"]),
        ("电流的单位是什么？", "安培", ["伏特", "欧姆", "瓦特"]),
        ("杠杆原理是谁提出的？", "阿基米德", ["牛顿", "伽利略", "欧拉"]),
    ],
    "math": [
        ("三加五等于几？", "八", ["六", "七", "九"]),
        ("十二除以四等于几？", "三", ["二", "四", "六"]),
        ("一个三角形的内角和是多少度？", "一百八十度", ["九十度", "二百七十度", "三百六十度"]),
        ("七乘以六等于几？", "四十二", ["三十六", "四十八", "五十四"]),
        ("二的三次方等于几？", "八", ["六", "九", "十六"]),
    ],
}

_ARC = [
    ("Which gas do plants absorb for photosynthesis?", "carbon dioxide", ["oxygen", "nitrogen", "helium"]),
    ("What force pulls objects toward the ground?", "gravity", ["friction", "magnetism", "inertia"]),
    ("Which organ pumps blood through the body?", "the heart", ["the liver", "the lung", "the kidney"]),
    ("What is frozen water called?", "ice", ["steam", "salt", "sand"]),
    ("Which planet is closest to the sun?", "Mercury", ["Mars", "Venus", "Jupiter"]),
    ("What do bees collect from flowers?", "nectar", ["bark", "soil", "rain"]),
    ("Which metal is liquid at room temperature?", "mercury", ["iron", "copper", "gold"]),
    ("What instrument measures temperature?", "a thermometer", ["a barometer", "a compass", "a ruler"]),
]

_LM_SUBJECTS = ["the mill", "the river", "a small boat", "the old bridge", "the market",
                "a grey cat", "the baker", "the garden", "the clock tower", "a narrow road"]
_LM_VERBS = ["stands near", "turns past", "waits by", "runs along", "faces",
             "follows", "shades", "crosses", "borders", "watches"]
_LM_OBJECTS = ["the square", "the water", "the field", "the wall", "the gate",
               "the orchard", "the quay", "the lane", "the hill", "the yard"]


def _seed_for(dataset_id, split):
    # stable across runs and machines: derive from the names, not hash()
    h = hashlib.sha256(f"{dataset_id}/{split}".encode()).digest()
    return int.from_bytes(h[:8], "little")


_FILM_PRE = ["", "honestly, ", "by the end, ", "for all its effort, "]
_GADGET_PRE = ["", "after two weeks, ", "for the price, ", "out of the box, "]
_FORUM_PRE = ["", "fwiw ", "real talk: ", "mod note: "]


def _sentiment_records(bank, prefixes, labels, n, rng):
    recs = []
    for _ in range(n):
        gold = int(rng.integers(0, len(labels)))
        pre = prefixes[int(rng.integers(0, len(prefixes)))]
        text = pre + bank[labels[gold]][int(rng.integers(0, len(bank[labels[gold]])))]
        fields = {"Text": text, "Prediction": labels[gold], "input": text}
        recs.append(Record(tokens=encode(text), fields=fields, gold=gold))
    return recs


def _nli_records(n, rng):
    recs = []
    for _ in range(n):
        actor, action, place, general = _SCENES[int(rng.integers(0, len(_SCENES)))]
        premise = f"{actor} {action} {place}."
        gold = int(rng.integers(0, 3))
        if gold == 0:
            hypothesis = f"{actor} {general}."
        elif gold == 1:
            tail = _NLI_NEUTRAL_TAILS[int(rng.integers(0, len(_NLI_NEUTRAL_TAILS)))]
            hypothesis = f"{actor} {tail}."
        else:
            hypothesis = f"{actor} is not {action.split(' ', 1)[1]}."
        label = ["entailment", "neutral", "contradiction"][gold]
        fields = {
            "Premise": premise,
            "Hypothesis": hypothesis,
            "Prediction": label,
            "input_1": premise,
            "input_2": hypothesis,
        }
        recs.append(Record(tokens=encode(premise + " " + hypothesis), fields=fields, gold=gold))
    return recs


def _mc_records(bank_rows, n, rng, subject=None, chinese=False):
    recs = []
    for _ in range(n):
        question, correct, wrong = bank_rows[int(rng.integers(0, len(bank_rows)))]
        options = [correct] + list(wrong)
        order = rng.permutation(4)
        options = [options[j] for j in order]
        gold = int(np.where(order == 0)[0][0])
        letters = ["A", "B", "C", "D"]
        fields = {
            "Question": question,
            "A": options[0],
            "B": options[1],
            "C": options[2],
            "D": options[3],
            "Answer": letters[gold],
            "input_1": question,
            "input_2": options[0],
            "input_3": options[1],
            "input_4": options[2],
            "input_5": options[3],
        }
        sep = "答案" if chinese else "Answer"
        text = f"{question} {sep}: {letters[gold]}"
        recs.append(Record(tokens=encode(text), fields=fields, gold=gold, subject=subject))
    return recs


def _build(dataset_id, split, n, seed):
    rng = np.random.default_rng(seed)
    if dataset_id == "sst_films":
        labels = ["negative", "positive", "neutral"]
        return _sentiment_records(_FILM, _FILM_PRE, labels, n, rng), "SA", SA_CHOICES
    if dataset_id == "amz_gadgets":
        labels = ["negative", "positive", "neutral"]
        return _sentiment_records(_GADGET, _GADGET_PRE, labels, n, rng), "SA", SA_CHOICES
    if dataset_id == "civq_forum":
        recs = []
        for _ in range(n):
            gold = int(rng.integers(0, 2))
            label = ["benign", "toxic"][gold]
            pre = _FORUM_PRE[int(rng.integers(0, len(_FORUM_PRE)))]
            text = pre + _FORUM[label][int(rng.integers(0, len(_FORUM[label])))]
            recs.append(Record(tokens=encode(text), gold=gold,
                               fields={"Text": text, "Prediction": label, "input": text}))
        return recs, "TD", TD_CHOICES
    if dataset_id == "mnli_pairs":
        return _nli_records(n, rng), "NLI", NLI_CHOICES
    if dataset_id == "ceval_mc":
        subjects = sorted(_CEVAL)
        recs = []
        for i in range(n):
            subject = subjects[i % len(subjects)]
            recs.extend(_mc_records(_CEVAL[subject], 1, rng, subject=subject, chinese=True))
        return recs, "CDS", MC_CHOICES
    if dataset_id == "arc_mc":
        return _mc_records(_ARC, n, rng), "generic_mc", MC_CHOICES
    raise KeyError(f"unknown bundled dataset {dataset_id!r}")


_DEFAULT_N = {
    "sst_films": 48,
    "amz_gadgets": 48,
    "civq_forum": 48,
    "mnli_pairs": 48,
    "ceval_mc": 48,
    "arc_mc": 48,
}


def dataset_ids():
    return tuple(sorted(_DEFAULT_N))


def build_dataset(dataset_id, split="test", n=None, seed=None):
    """Materialize one bundled dataset as a DatasetHandle."""
    if n is None:
        n = _DEFAULT_N[dataset_id]
    if seed is None:
        seed = _seed_for(dataset_id, split)
    records, task, choices = _build(dataset_id, split, n, seed)
    return DatasetHandle(dataset_id=dataset_id, split=split, records=records,
                         task=task, choices=list(choices))


def build_lm_corpus(n_tokens=24000, seed=0):
    """Byte-token stream of short declarative sentences."""
    rng = np.random.default_rng(seed)
    parts = []
    total = 0
    while total < n_tokens:
        s = _LM_SUBJECTS[int(rng.integers(0, 10))]
        v = _LM_VERBS[int(rng.integers(0, 10))]
        o = _LM_OBJECTS[int(rng.integers(0, 10))]
        sent = f"{s} {v} {o}. "
        parts.append(sent)
        total += len(sent.encode("utf-8"))
    return encode("".join(parts))[:n_tokens]


def _digest(handle):
    h = hashlib.sha256()
    for r in handle.records:
        h.update(r.tokens.astype(np.int64).tobytes())
        h.update(str(r.gold).encode())
        h.update((r.subject or "").encode())
    return h.hexdigest()


def manifest():
    """Record counts and content digests of every bundled test split."""
    out = {}
    for did in dataset_ids():
        handle = build_dataset(did)
        out[did] = {
            "dataset_id": did,
            "n_records": len(handle),
            "task": handle.task,
            "n_choices": len(handle.choices),
            "sha256": _digest(handle),
        }
    return out
