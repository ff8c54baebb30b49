"""Conversion-cohort construction from longitudinal visit records.

A subject enters the cohort only if the screening visit (month 0) is MCI.
Visits of subjects who later receive an AD diagnosis become *converged*
examples when the first AD visit lies within the prediction horizon; visits
of subjects who never convert become *stable* examples only when at least
``horizon_months`` of follow-up remain after them (later visits are censored).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import pandas as pd

from .audit import AuditLog

REQUIRED_COLUMNS = ("subject_id", "month", "diagnosis", "volume_path")


class CohortError(ValueError):
    pass


class TimelineRejected(CohortError):
    def __init__(self, subject_id: str, reason: str):
        super().__init__(f"subject {subject_id}: {reason}")
        self.subject_id = subject_id
        self.reason = reason


class Diagnosis(str, Enum):
    NC = "NC"
    MCI = "MCI"
    AD = "AD"


class Label(IntEnum):
    STABLE = 0
    CONVERGED = 1


@dataclass(frozen=True)
class VisitRecord:
    subject_id: str
    month: int
    diagnosis: Diagnosis
    clinical: Mapping[str, Any] = field(default_factory=dict)
    volume_ref: str | None = None

    def __post_init__(self):
        try:
            object.__setattr__(self, "diagnosis", Diagnosis(self.diagnosis))
        except ValueError:
            raise CohortError(
                f"subject {self.subject_id}: unknown diagnosis {self.diagnosis!r}"
            ) from None
        if int(self.month) != self.month or self.month < 0:
            raise CohortError(f"subject {self.subject_id}: invalid month {self.month!r}")
        object.__setattr__(self, "month", int(self.month))
        object.__setattr__(self, "subject_id", str(self.subject_id))


@dataclass(frozen=True)
class SubjectTimeline:
    subject_id: str
    visits: tuple[VisitRecord, ...]

    def __post_init__(self):
        months = [v.month for v in self.visits]
        if any(b <= a for a, b in zip(months, months[1:])):
            raise CohortError(f"subject {self.subject_id}: months not strictly increasing: {months}")
        if any(v.subject_id != self.subject_id for v in self.visits):
            raise CohortError(f"subject {self.subject_id}: visits from another subject")

    @classmethod
    def from_visits(cls, visits: Iterable[VisitRecord]) -> "SubjectTimeline":
        visits = sorted(visits, key=lambda v: v.month)
        if not visits:
            raise CohortError("empty timeline")
        return cls(visits[0].subject_id, tuple(visits))

    @property
    def diagnoses(self) -> list[Diagnosis]:
        return [v.diagnosis for v in self.visits]


@dataclass(frozen=True)
class CohortConfig:
    horizon_months: int = 60
    treat_reversion_as_stable: bool = True
    # visits without an MRI or without any clinical value are dropped before labeling
    require_volume: bool = True
    require_clinical: bool = True

    def __post_init__(self):
        if int(self.horizon_months) != self.horizon_months or self.horizon_months <= 0:
            raise CohortError(f"horizon_months must be a positive integer, got {self.horizon_months}")


@dataclass(frozen=True)
class ConversionExample:
    subject_id: str
    month: int
    label: Label
    months_to_conversion: int | None = None
    clinical: Mapping[str, Any] = field(default_factory=dict)
    volume_ref: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        if self.label is Label.CONVERGED:
            if self.months_to_conversion is None or self.months_to_conversion <= 0:
                raise CohortError("converged example needs a positive months_to_conversion")
        elif self.months_to_conversion is not None:
            raise CohortError("stable example cannot carry months_to_conversion")

    def to_dict(self) -> dict[str, Any]:
        return {
            "subject_id": self.subject_id,
            "month": self.month,
            "label": int(self.label),
            "months_to_conversion": self.months_to_conversion,
            "clinical": {k: _json_scalar(v) for k, v in self.clinical.items()},
            "volume_ref": self.volume_ref,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ConversionExample":
        clinical = {k: (math.nan if v is None else v) for k, v in d.get("clinical", {}).items()}
        return cls(
            subject_id=str(d["subject_id"]),
            month=int(d["month"]),
            label=Label(d["label"]),
            months_to_conversion=d.get("months_to_conversion"),
            clinical=clinical,
            volume_ref=d.get("volume_ref"),
        )


@dataclass
class CohortStats:
    subjects: dict[str, int]
    samples: dict[str, int]
    n_input_subjects: int
    n_excluded_subjects: int
    audit: list[dict[str, Any]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "subjects": dict(self.subjects),
            "samples": dict(self.samples),
            "n_input_subjects": self.n_input_subjects,
            "n_excluded_subjects": self.n_excluded_subjects,
            "audit": list(self.audit),
        }


def _json_scalar(v):
    if v is None:
        return None
    if isinstance(v, float) and math.isnan(v):
        return None
    if hasattr(v, "item"):
        v = v.item()
        if isinstance(v, float) and math.isnan(v):
            return None
    return v


def screen_subjects(
    timelines: Iterable[SubjectTimeline],
) -> tuple[list[SubjectTimeline], list[dict[str, str]]]:
    """Keep timelines whose month-0 diagnosis is MCI; report the rest."""
    kept, excluded = [], []
    for tl in sorted(timelines, key=lambda t: t.subject_id):
        first = tl.visits[0]
        if first.month != 0:
            reason = "missing screening visit"
        elif first.diagnosis is Diagnosis.NC:
            reason = "screening NC"
        elif first.diagnosis is Diagnosis.AD:
            reason = "screening AD"
        else:
            kept.append(tl)
            continue
        excluded.append({"subject_id": tl.subject_id, "reason": reason})
    return kept, excluded


def label_timeline(timeline: SubjectTimeline, cfg: CohortConfig) -> list[ConversionExample]:
    """Turn one screened MCI timeline into labeled examples.

    Raises TimelineRejected for an AD diagnosis followed by a non-AD one, and
    for MCI->NC reversion when ``cfg.treat_reversion_as_stable`` is off.
    """
    visits = timeline.visits
    horizon = cfg.horizon_months
    dx = timeline.diagnoses

    if Diagnosis.AD in dx:
        first_ad = dx.index(Diagnosis.AD)
        if any(d is not Diagnosis.AD for d in dx[first_ad:]):
            raise TimelineRejected(timeline.subject_id, "diagnosis reversal after AD")
        t_ad = visits[first_ad].month
        return [
            ConversionExample(
                v.subject_id, v.month, Label.CONVERGED, t_ad - v.month, v.clinical, v.volume_ref
            )
            for v in visits[:first_ad]
            if v.diagnosis is Diagnosis.MCI and 0 < t_ad - v.month <= horizon
        ]

    if Diagnosis.NC in dx and not cfg.treat_reversion_as_stable:
        raise TimelineRejected(timeline.subject_id, "reversion to NC")
    t_last = visits[-1].month
    return [
        ConversionExample(v.subject_id, v.month, Label.STABLE, None, v.clinical, v.volume_ref)
        for v in visits
        if v.diagnosis is Diagnosis.MCI and t_last - v.month >= horizon
    ]


def read_visit_table(path: str | Path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"subject_id": str, "volume_path": str, "diagnosis": str})
    return df


def clinical_columns(table: pd.DataFrame) -> list[str]:
    return [c for c in table.columns if c not in REQUIRED_COLUMNS]


def visits_from_table(table: pd.DataFrame) -> list[VisitRecord]:
    missing = [c for c in REQUIRED_COLUMNS if c not in table.columns]
    if missing:
        raise CohortError(f"visit table is missing columns: {missing}")
    dup = table.duplicated(subset=["subject_id", "month"], keep=False)
    if dup.any():
        keys = sorted({(str(s), int(m)) for s, m in table.loc[dup, ["subject_id", "month"]].itertuples(index=False)})
        raise CohortError(f"duplicate (subject_id, month) rows: {keys}")

    feats = clinical_columns(table)
    records = []
    for row in table.to_dict(orient="records"):
        vol = row.get("volume_path")
        if vol is None or (isinstance(vol, float) and math.isnan(vol)) or str(vol).strip() == "":
            vol = None
        records.append(
            VisitRecord(
                subject_id=str(row["subject_id"]),
                month=row["month"],
                diagnosis=str(row["diagnosis"]).strip(),
                clinical={k: row[k] for k in feats},
                volume_ref=vol,
            )
        )
    return records


def _has_clinical(v: VisitRecord) -> bool:
    if not v.clinical:
        return False
    return any(not (x is None or (isinstance(x, float) and math.isnan(x))) for x in v.clinical.values())


def build_conversion_dataset(
    table: pd.DataFrame | str | Path,
    cfg: CohortConfig | None = None,
    audit: AuditLog | None = None,
) -> tuple[list[ConversionExample], CohortStats]:
    cfg = cfg or CohortConfig()
    audit = audit if audit is not None else AuditLog()
    if not isinstance(table, pd.DataFrame):
        table = read_visit_table(table)

    records = visits_from_table(table)
    complete = []
    for v in records:
        if cfg.require_volume and v.volume_ref is None:
            audit.add("visit dropped", subject_id=v.subject_id, month=v.month, reason="no volume")
        elif cfg.require_clinical and not _has_clinical(v):
            audit.add("visit dropped", subject_id=v.subject_id, month=v.month, reason="no clinical data")
        else:
            complete.append(v)

    by_subject: dict[str, list[VisitRecord]] = {}
    for v in complete:
        by_subject.setdefault(v.subject_id, []).append(v)
    timelines = [SubjectTimeline.from_visits(vs) for _, vs in sorted(by_subject.items())]
    n_input = len({v.subject_id for v in records})

    kept, excluded = screen_subjects(timelines)
    for e in excluded:
        audit.add("subject excluded", **e)
    n_excluded = n_input - len(kept)

    examples: list[ConversionExample] = []
    for tl in kept:
        try:
            examples.extend(label_timeline(tl, cfg))
        except TimelineRejected as err:
            audit.add("subject excluded", subject_id=err.subject_id, reason=err.reason)

    subjects = {"stable": 0, "converged": 0}
    samples = {"stable": 0, "converged": 0}
    seen: set[tuple[str, int]] = set()
    for ex in examples:
        name = ex.label.name.lower()
        samples[name] += 1
        seen.add((ex.subject_id, int(ex.label)))
    for _, lab in seen:
        subjects[Label(lab).name.lower()] += 1

    stats = CohortStats(subjects, samples, n_input, n_excluded, list(audit.entries))
    return examples, stats


def examples_frame(examples: Sequence[ConversionExample]) -> pd.DataFrame:
    """Flatten examples into one row per visit (clinical features as columns)."""
    rows = []
    for ex in examples:
        row = {
            "subject_id": ex.subject_id,
            "month": ex.month,
            "label": int(ex.label),
            "months_to_conversion": ex.months_to_conversion,
            "volume_ref": ex.volume_ref,
        }
        row.update(ex.clinical)
        rows.append(row)
    cols = ["subject_id", "month", "label", "months_to_conversion", "volume_ref"]
    return pd.DataFrame(rows, columns=None if rows else cols)


def save_cohort(examples: Sequence[ConversionExample], stats: CohortStats, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "examples.json").write_text(json.dumps([e.to_dict() for e in examples], indent=1))
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=1, default=str))
    log = AuditLog()
    log.entries = list(stats.audit)
    log.write(out / "audit.ndjson")


def load_examples(path: str | Path) -> list[ConversionExample]:
    return [ConversionExample.from_dict(d) for d in json.loads(Path(path).read_text())]
