"""Longitudinal dataset container, CSV ingestion, centering, and validation.

A dataset is a collection of visit blocks: one block per (subject, visit)
pair, holding a T x p matrix of observations (rows are time points) and a
length-q covariate vector.  Blocks are kept sorted by (subject_id,
visit_index) so that every downstream computation sees a canonical,
reproducible ordering.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np


class DataFormatError(ValueError):
    """Raised when an input file violates the documented CSV layout."""


@dataclass(frozen=True)
class VisitBlock:
    """Observations and covariates for one (subject, visit) pair."""

    subject_id: str
    visit_index: int
    observations: np.ndarray  # (T, p), rows in temporal order
    covariates: np.ndarray    # (q,)
    centered: bool = False

    @property
    def n_obs(self) -> int:
        return self.observations.shape[0]

    @property
    def p(self) -> int:
        return self.observations.shape[1]

    @property
    def q(self) -> int:
        return self.covariates.shape[0]


@dataclass(frozen=True)
class LongitudinalDataset:
    """Immutable set of visit blocks grouped by subject.

    ``blocks`` is sorted by (subject_id, visit_index); ``subjects`` lists the
    distinct subject ids in the same order in which their blocks appear.
    """

    blocks: tuple[VisitBlock, ...]
    subjects: tuple[str, ...]
    n: int
    p: int
    q: int
    centered: bool

    @classmethod
    def from_blocks(cls, blocks) -> "LongitudinalDataset":
        blocks = list(blocks)
        if not blocks:
            raise ValueError("dataset requires at least one visit block")
        p = blocks[0].p
        q = blocks[0].q
        for b in blocks:
            if b.p != p:
                raise ValueError(
                    f"inconsistent outcome dimension: block ({b.subject_id}, "
                    f"{b.visit_index}) has p={b.p}, expected {p}"
                )
            if b.q != q:
                raise ValueError(
                    f"inconsistent covariate dimension: block ({b.subject_id}, "
                    f"{b.visit_index}) has q={b.q}, expected {q}"
                )
        keys = [(b.subject_id, b.visit_index) for b in blocks]
        if len(set(keys)) != len(keys):
            seen = set()
            dup = next(k for k in keys if k in seen or seen.add(k))
            raise ValueError(f"duplicate (subject, visit) pair: {dup}")
        blocks.sort(key=lambda b: (b.subject_id, b.visit_index))
        subjects = tuple(dict.fromkeys(b.subject_id for b in blocks))
        centered = all(b.centered for b in blocks)
        return cls(
            blocks=tuple(blocks),
            subjects=subjects,
            n=len(subjects),
            p=p,
            q=q,
            centered=centered,
        )

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def total_observations(self) -> int:
        return sum(b.n_obs for b in self.blocks)

    def blocks_for(self, subject_id: str) -> tuple[VisitBlock, ...]:
        return tuple(b for b in self.blocks if b.subject_id == subject_id)

    def visits_per_subject(self) -> np.ndarray:
        counts = {s: 0 for s in self.subjects}
        for b in self.blocks:
            counts[b.subject_id] += 1
        return np.array([counts[s] for s in self.subjects], dtype=np.int64)


@dataclass
class ValidationReport:
    """Outcome of dataset validation: hard errors and advisory warnings."""

    errors: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def _parse_float(text: str, path: str, line_no: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(
            f"{path}:{line_no}: column {col!r}: cannot parse {text!r} as a number"
        ) from None
    if not math.isfinite(value):
        raise DataFormatError(
            f"{path}:{line_no}: column {col!r}: non-finite value {text!r}"
        )
    return value


def _read_rows(path: str):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}:1: file is empty") from None
        rows = [(line_no, row) for line_no, row in enumerate(reader, start=2) if row]
    return header, rows


def load_dataset(data_path: str, covariate_path: str) -> LongitudinalDataset:
    """Read the observations and covariates CSV files into a dataset.

    The observations file has header ``subject_id,visit,y1,...,yp`` with one
    row per time point; rows belonging to one (subject, visit) pair must be
    contiguous.  The covariate file has header ``subject_id,visit,x1,...,xq``
    with exactly one row per (subject, visit) pair present in the
    observations file.
    """
    header, rows = _read_rows(data_path)
    if len(header) < 3 or header[0] != "subject_id" or header[1] != "visit":
        raise DataFormatError(
            f"{data_path}:1: expected header 'subject_id,visit,y1,...', got {header!r}"
        )
    y_cols = header[2:]
    p = len(y_cols)

    groups: dict[tuple[str, int], list[list[float]]] = {}
    order: list[tuple[str, int]] = []
    current: tuple[str, int] | None = None
    for line_no, row in rows:
        if len(row) != 2 + p:
            raise DataFormatError(
                f"{data_path}:{line_no}: expected {2 + p} fields, got {len(row)}"
            )
        try:
            visit = int(row[1])
        except ValueError:
            raise DataFormatError(
                f"{data_path}:{line_no}: cannot parse visit index {row[1]!r}"
            ) from None
        key = (row[0], visit)
        values = [
            _parse_float(row[2 + j], data_path, line_no, y_cols[j]) for j in range(p)
        ]
        if key != current:
            if key in groups:
                raise DataFormatError(
                    f"{data_path}:{line_no}: rows for (subject {key[0]!r}, visit "
                    f"{key[1]}) are not contiguous (duplicate group)"
                )
            groups[key] = []
            order.append(key)
            current = key
        groups[key].append(values)

    cov_header, cov_rows = _read_rows(covariate_path)
    if len(cov_header) < 2 or cov_header[0] != "subject_id" or cov_header[1] != "visit":
        raise DataFormatError(
            f"{covariate_path}:1: expected header 'subject_id,visit,x1,...', "
            f"got {cov_header!r}"
        )
    x_cols = cov_header[2:]
    q = len(x_cols)
    covariates: dict[tuple[str, int], np.ndarray] = {}
    for line_no, row in cov_rows:
        if len(row) != 2 + q:
            raise DataFormatError(
                f"{covariate_path}:{line_no}: expected {2 + q} fields, got {len(row)}"
            )
        try:
            visit = int(row[1])
        except ValueError:
            raise DataFormatError(
                f"{covariate_path}:{line_no}: cannot parse visit index {row[1]!r}"
            ) from None
        key = (row[0], visit)
        if key in covariates:
            raise DataFormatError(
                f"{covariate_path}:{line_no}: duplicate covariate row for "
                f"(subject {key[0]!r}, visit {key[1]})"
            )
        if key not in groups:
            raise DataFormatError(
                f"{covariate_path}:{line_no}: (subject {key[0]!r}, visit {key[1]}) "
                f"does not appear in {data_path}"
            )
        covariates[key] = np.array(
            [_parse_float(row[2 + j], covariate_path, line_no, x_cols[j]) for j in range(q)]
        )

    missing = [key for key in order if key not in covariates]
    if missing:
        sid, visit = missing[0]
        raise DataFormatError(
            f"{covariate_path}: missing covariate row for (subject {sid!r}, "
            f"visit {visit})"
        )

    blocks = [
        VisitBlock(
            subject_id=sid,
            visit_index=visit,
            observations=np.array(groups[(sid, visit)], dtype=np.float64),
            covariates=covariates[(sid, visit)],
            centered=False,
        )
        for sid, visit in order
    ]
    return LongitudinalDataset.from_blocks(blocks)


def save_dataset(ds: LongitudinalDataset, data_path: str, covariate_path: str) -> None:
    """Write a dataset back to the two-file CSV layout read by load_dataset.

    Values are written with 17 significant digits so the round trip is exact
    for 64-bit floats.
    """
    with open(data_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "visit"] + [f"y{j + 1}" for j in range(ds.p)])
        for b in ds.blocks:
            for row in b.observations:
                writer.writerow([b.subject_id, b.visit_index] + [f"{v:.17g}" for v in row])
    with open(covariate_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "visit"] + [f"x{j + 1}" for j in range(ds.q)])
        for b in ds.blocks:
            writer.writerow(
                [b.subject_id, b.visit_index] + [f"{v:.17g}" for v in b.covariates]
            )


def center_dataset(ds: LongitudinalDataset) -> LongitudinalDataset:
    """Remove the column means of every visit block.

    Idempotent up to floating-point accumulation (1e-12 relative to the
    column scale).
    """
    blocks = [
        replace(
            b,
            observations=b.observations - b.observations.mean(axis=0, keepdims=True),
            centered=True,
        )
        for b in ds.blocks
    ]
    return LongitudinalDataset.from_blocks(blocks)


def validate_dataset(ds: LongitudinalDataset) -> ValidationReport:
    """Check every dataset invariant and report violations.

    Errors make the dataset unusable for fitting; warnings flag conditions
    (such as the high-dimensional regime) that change which estimators are
    appropriate.
    """
    report = ValidationReport()
    if ds.n_blocks == 0:
        report.errors.append(("dataset", "no visit blocks"))
        return report
    min_T = min(b.n_obs for b in ds.blocks)
    for b in ds.blocks:
        loc = f"(subject {b.subject_id!r}, visit {b.visit_index})"
        if b.n_obs < 2:
            report.errors.append((loc, "T_iv >= 2 required"))
        if not np.all(np.isfinite(b.observations)):
            report.errors.append((loc, "non-finite observation value"))
        if not np.all(np.isfinite(b.covariates)):
            report.errors.append((loc, "non-finite covariate value"))
        if b.n_obs >= 2:
            spans = b.observations.max(axis=0) - b.observations.min(axis=0)
            for j in np.nonzero(spans == 0.0)[0]:
                report.warnings.append(f"{loc}: column y{j + 1} is constant")
    if ds.p > min_T:
        report.warnings.append(
            f"high-dimensional regime (p={ds.p} > min T_iv={min_T}): "
            "shrinkage estimator required"
        )
    return report
