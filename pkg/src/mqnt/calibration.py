"""Calibration-set construction under controlled distribution shift.

Two sampling protocols: take the first n records of a train/validation
split, or carve a reserve block out of a test split (sample `reserve`
indices without replacement with the pinned generator, remove all of
them from the test split, use the first n sampled records for
calibration and keep the rest of the block as the few-shot exemplar
pool).  Scenario enumeration builds the (calibration source x test
source) grids for iid, cross-dataset, and cross-subject comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import CalibrationSizeError
from .rng import SplitMix64, sample_without_replacement

SHIFT_KINDS = ("iid", "cross_dataset", "cross_subject")
SPLITS = ("train", "validation", "test")


@dataclass
class Record:
    """One dataset item: its token sequence plus whatever the prompt
    templates need (named fields, gold choice index, subject tag)."""

    tokens: np.ndarray
    fields: dict = field(default_factory=dict)
    gold: Optional[int] = None
    subject: Optional[str] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)


@dataclass
class DatasetHandle:
    dataset_id: str
    split: str
    records: list
    subject_tag: Optional[str] = None
    task: str = "lm"
    choices: list = field(default_factory=list)
    exemplar_pool: list = field(default_factory=list)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if not self.records:
            raise ValueError(f"dataset {self.dataset_id!r} has no records")

    def __len__(self):
        return len(self.records)

    def subjects(self) -> list:
        seen = []
        for r in self.records:
            if r.subject is not None and r.subject not in seen:
                seen.append(r.subject)
        return seen

    def filter_subject(self, tag: str) -> "DatasetHandle":
        recs = [r for r in self.records if r.subject == tag]
        if not recs:
            raise ValueError(f"no records with subject {tag!r} in {self.dataset_id}")
        return replace(self, records=recs, subject_tag=tag, exemplar_pool=[
            r for r in self.exemplar_pool if r.subject == tag
        ])


@dataclass(frozen=True)
class Provenance:
    dataset_id: str
    policy: str
    seed: int
    indices: tuple

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "policy": self.policy,
            "seed": self.seed,
            "indices": list(self.indices),
        }


@dataclass
class CalibrationSet:
    sequences: list
    provenance: Provenance

    def __len__(self):
        return len(self.sequences)


@dataclass(frozen=True)
class CalibrationPolicy:
    mode: str = "carve_from_test"
    n: int = 128
    reserve: int = 300
    seed: int = 42

    def __post_init__(self):
        if self.mode not in ("from_train", "carve_from_test"):
            raise ValueError(f"unknown calibration mode {self.mode!r}")
        if self.n < 0 or self.reserve < 0:
            raise ValueError("n and reserve must be >= 0")
        if self.mode == "carve_from_test" and self.n > self.reserve:
            raise ValueError("carve mode needs n <= reserve")


@dataclass
class ScenarioSpec:
    calib_source: DatasetHandle
    test_source: DatasetHandle
    shift: str
    shots: Optional[int] = None

    def __post_init__(self):
        if self.shift not in SHIFT_KINDS:
            raise ValueError(f"unknown shift {self.shift!r}")
        same_id = self.calib_source.dataset_id == self.test_source.dataset_id
        same_subject = self.calib_source.subject_tag == self.test_source.subject_tag
        if self.shift == "iid" and not (same_id and same_subject):
            raise ValueError("iid scenario needs identical calibration and test sources")
        if self.shift == "cross_dataset" and same_id:
            raise ValueError("cross_dataset scenario needs distinct dataset_ids")
        if self.shift == "cross_subject" and not (same_id and not same_subject):
            raise ValueError("cross_subject needs same dataset, different subjects")
        if self.shots is not None and self.shots < 0:
            raise ValueError("shots must be >= 0")


def build_calibration_set(src: DatasetHandle, policy: CalibrationPolicy):
    """Build a calibration set and the test handle that remains usable
    for evaluation afterwards.  See the module docstring for the two
    protocols; n=0 returns an empty set and leaves the source untouched."""
    records = src.records
    if policy.n == 0:
        prov = Provenance(src.dataset_id, policy.mode, policy.seed, ())
        return CalibrationSet(sequences=[], provenance=prov), src

    if policy.mode == "from_train":
        if src.split == "test":
            raise CalibrationSizeError(
                f"from_train needs a train or validation split, got {src.split!r}"
            )
        if len(records) < policy.n:
            raise CalibrationSizeError(
                f"{src.dataset_id}/{src.split} has {len(records)} records, "
                f"need {policy.n} (deficit {policy.n - len(records)})"
            )
        chosen = records[: policy.n]
        prov = Provenance(src.dataset_id, "from_train", policy.seed, tuple(range(policy.n)))
        out_handle = replace(src, exemplar_pool=list(records[policy.n :]))
        return CalibrationSet([r.tokens for r in chosen], prov), out_handle

    # carve_from_test
    if src.split != "test":
        raise CalibrationSizeError(f"carve_from_test needs a test split, got {src.split!r}")
    if len(records) < policy.reserve:
        raise CalibrationSizeError(
            f"{src.dataset_id}/test has {len(records)} records, need "
            f"{policy.reserve} to reserve (deficit {policy.reserve - len(records)})"
        )
    indices = sample_without_replacement(len(records), policy.reserve, policy.seed)
    carved = [records[i] for i in indices]
    calib_records = carved[: policy.n]
    pool = carved[policy.n :]
    removed = set(indices)
    remaining = [r for i, r in enumerate(records) if i not in removed]
    if not remaining:
        raise CalibrationSizeError(
            f"carving {policy.reserve} records would empty {src.dataset_id}/test"
        )
    prov = Provenance(src.dataset_id, "carve_from_test", policy.seed, tuple(indices[: policy.n]))
    out_handle = replace(src, records=remaining, exemplar_pool=pool)
    return CalibrationSet([r.tokens for r in calib_records], prov), out_handle


def build_c4_style_segments(corpus, n: int, seg_len: int, seed: int, corpus_id: str = "corpus"):
    """n contiguous segments of exactly seg_len tokens at generator-chosen
    offsets (uniform over valid starts, drawn with replacement)."""
    tokens = np.asarray(corpus, dtype=np.int64)
    if tokens.size < seg_len:
        raise CalibrationSizeError(
            f"corpus has {tokens.size} tokens, segments need {seg_len} "
            f"(deficit {seg_len - tokens.size})"
        )
    rng = SplitMix64(seed)
    n_starts = tokens.size - seg_len + 1
    starts = [rng.next_below(n_starts) for _ in range(n)]
    seqs = [tokens[s : s + seg_len].copy() for s in starts]
    prov = Provenance(corpus_id, "c4_style_segments", seed, tuple(starts))
    return CalibrationSet(seqs, prov)


def enumerate_scenarios(datasets, shift_kinds, shots: Optional[int] = None):
    """Every (calibration source, test source) pair consistent with the
    requested shift kinds; same-source diagonal cells come out flagged
    iid.  cross_subject pairs subjects within each multi-subject dataset."""
    if not datasets:
        raise ValueError("need at least one dataset")
    out = []
    for kind in shift_kinds:
        if kind == "iid":
            for d in datasets:
                out.append(ScenarioSpec(d, d, "iid", shots))
        elif kind == "cross_dataset":
            for calib in datasets:
                for test in datasets:
                    shift = "iid" if calib.dataset_id == test.dataset_id else "cross_dataset"
                    out.append(ScenarioSpec(calib, test, shift, shots))
        elif kind == "cross_subject":
            for d in datasets:
                tags = d.subjects()
                parts = [d.filter_subject(t) for t in tags]
                for calib in parts:
                    for test in parts:
                        shift = "iid" if calib.subject_tag == test.subject_tag else "cross_subject"
                        out.append(ScenarioSpec(calib, test, shift, shots))
        else:
            raise ValueError(f"unknown shift kind {kind!r}")
    return out
