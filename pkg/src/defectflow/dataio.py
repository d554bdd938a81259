"""Dataset ingestion, log transforms, summaries, and scenario construction."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PREDICTOR_NAMES = ("commits", "insertions", "age", "devs")
COLUMN_NAMES = ("project", "language") + PREDICTOR_NAMES + ("bugs",)
QUANTILE_PROBS = (0.0, 0.25, 0.5, 0.75, 1.0)

STRICT = "strict"
OFFSET = "offset"


class DataError(ValueError):
    """Raised for malformed input data; messages carry CSV line numbers."""


@dataclass(frozen=True)
class RawRecord:
    """One commit-aggregate observation as read from the CSV."""

    project: str
    language: str
    commits: float
    insertions: float
    age: float
    devs: float
    bugs: float


@dataclass(frozen=True)
class PreparedRow:
    """One observation after indexing and log transform.

    ``x`` holds the natural logarithm of (commits, insertions, age, devs).
    """

    project_index: int
    language_index: int
    x: tuple[float, float, float, float]
    bugs: int


@dataclass(frozen=True)
class Design:
    """Model inputs in array form: one row per observation."""

    x: np.ndarray  # (n, 4) log predictors
    language_index: np.ndarray  # (n,) int
    project_index: np.ndarray  # (n,) int
    n_languages: int
    n_projects: int

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]


def toy_design(n: int) -> Design:
    """Predictor-free design used by the toy height model."""
    return Design(np.zeros((n, 4)), np.zeros(n, dtype=int), np.zeros(n, dtype=int), 1, 1)


@dataclass(frozen=True)
class Dataset:
    """Prepared observations plus index -> label maps."""

    rows: tuple[PreparedRow, ...]
    language_names: tuple[str, ...]
    project_names: tuple[str, ...]

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_languages(self) -> int:
        return len(self.language_names)

    @property
    def n_projects(self) -> int:
        return len(self.project_names)

    def design(self) -> Design:
        x = np.array([r.x for r in self.rows], dtype=float)
        lang = np.array([r.language_index for r in self.rows], dtype=int)
        proj = np.array([r.project_index for r in self.rows], dtype=int)
        return Design(x, lang, proj, self.n_languages, self.n_projects)

    def bugs(self) -> np.ndarray:
        return np.array([r.bugs for r in self.rows], dtype=float)

    def language_index(self, name: str) -> int:
        try:
            return self.language_names.index(name)
        except ValueError:
            raise DataError(f"unknown language {name!r}") from None

    def fingerprint(self) -> str:
        """Content hash of the prepared data, used to pin fits to their dataset."""
        payload = {
            "languages": list(self.language_names),
            "projects": list(self.project_names),
            "rows": [
                [r.project_index, r.language_index, list(r.x), r.bugs] for r in self.rows
            ],
        }
        blob = json.dumps(payload, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Scenario:
    """What-if inputs in natural units (counts, lines, days, people)."""

    commits: float
    insertions: float
    age: float
    devs: float
    language: str | None = None
    label: str = ""

    def __post_init__(self) -> None:
        for name in PREDICTOR_NAMES:
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"scenario {name} must be strictly positive, got {value}")

    def log_predictors(self) -> np.ndarray:
        return np.log([self.commits, self.insertions, self.age, self.devs])


@dataclass(frozen=True)
class DataSummary:
    """Moments, quantiles, and group occupancy used by checks and scenarios."""

    n_rows: int
    bug_mean: float
    bug_variance: float
    predictor_quantiles: np.ndarray  # (4, 5) log scale at QUANTILE_PROBS
    rows_per_language: dict[str, int]
    rows_per_project: dict[int, int]  # histogram: rows-per-project -> project count
    n_projects: int = 0

    def single_row_project_fraction(self) -> float:
        return self.rows_per_project.get(1, 0) / max(self.n_projects, 1)

    def to_json_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "bug_mean": self.bug_mean,
            "bug_variance": self.bug_variance,
            "quantile_probs": list(QUANTILE_PROBS),
            "predictor_quantiles": {
                name: [float(v) for v in self.predictor_quantiles[i]]
                for i, name in enumerate(PREDICTOR_NAMES)
            },
            "rows_per_language": dict(self.rows_per_language),
            "rows_per_project_histogram": {str(k): v for k, v in sorted(self.rows_per_project.items())},
            "n_projects": self.n_projects,
            "single_row_project_fraction": self.single_row_project_fraction(),
        }

    def to_csv_rows(self) -> list[list]:
        rows: list[list] = [["statistic", "value"]]
        rows.append(["n_rows", self.n_rows])
        rows.append(["bug_mean", self.bug_mean])
        rows.append(["bug_variance", self.bug_variance])
        for i, name in enumerate(PREDICTOR_NAMES):
            for p, q in zip(QUANTILE_PROBS, self.predictor_quantiles[i]):
                rows.append([f"log_{name}_q{p:g}", float(q)])
        for lang, count in self.rows_per_language.items():
            rows.append([f"rows[{lang}]", count])
        return rows


def _parse_number(text: str, column: str, line_no: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"non-numeric {column} {text!r} at line {line_no}") from None
    if not np.isfinite(value):
        raise DataError(f"non-finite {column} at line {line_no}")
    if value < 0:
        raise DataError(f"negative {column} at line {line_no}")
    return value


def load_csv(path: str | Path) -> list[RawRecord]:
    """Read the commit-aggregate CSV into records, validating field by field.

    The header must contain exactly the seven expected column names. Counts
    must be nonnegative, ``bugs`` must be an integer not exceeding ``commits``.
    All errors are reported with their 1-based line number.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    records: list[RawRecord] = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames
        if header is None:
            raise DataError("empty file: missing header row")
        if set(header) != set(COLUMN_NAMES) or len(header) != len(COLUMN_NAMES):
            missing = set(COLUMN_NAMES) - set(header)
            extra = set(header) - set(COLUMN_NAMES)
            detail = []
            if missing:
                detail.append(f"missing column(s) {sorted(missing)}")
            if extra:
                detail.append(f"unexpected column(s) {sorted(extra)}")
            raise DataError("bad header: " + "; ".join(detail))
        for row in reader:
            line_no = reader.line_num
            if None in row.values() or None in row:
                raise DataError(f"wrong number of fields at line {line_no}")
            project = row["project"].strip()
            language = row["language"].strip()
            if not project or not language:
                raise DataError(f"empty project or language at line {line_no}")
            commits = _parse_number(row["commits"], "commits", line_no)
            insertions = _parse_number(row["insertions"], "insertions", line_no)
            age = _parse_number(row["age"], "age", line_no)
            devs = _parse_number(row["devs"], "devs", line_no)
            bugs = _parse_number(row["bugs"], "bugs", line_no)
            if bugs != int(bugs):
                raise DataError(f"bugs must be an integer at line {line_no}")
            if bugs > commits:
                raise DataError(f"bugs exceed commits at line {line_no}")
            records.append(RawRecord(project, language, commits, insertions, age, devs, bugs))
    return records


def prepare(records: Sequence[RawRecord], policy: str = STRICT) -> Dataset:
    """Log-transform predictors and assign dense first-appearance indices.

    ``policy`` controls nonpositive predictors: ``strict`` rejects them,
    ``offset`` maps every predictor x to ln(x + 0.5).
    """
    if not records:
        raise DataError("no records to prepare")
    if policy not in (STRICT, OFFSET):
        raise DataError(f"unknown zero-handling policy {policy!r}")
    languages: dict[str, int] = {}
    projects: dict[str, int] = {}
    seen_pairs: set[tuple[str, str]] = set()
    rows: list[PreparedRow] = []
    for rec in records:
        pair = (rec.project, rec.language)
        if pair in seen_pairs:
            raise DataError(f"duplicate (project, language) pair {pair}")
        seen_pairs.add(pair)
        if rec.language not in languages:
            languages[rec.language] = len(languages)
        if rec.project not in projects:
            projects[rec.project] = len(projects)
        raw = (rec.commits, rec.insertions, rec.age, rec.devs)
        if policy == STRICT:
            for name, value in zip(PREDICTOR_NAMES, raw):
                if value <= 0:
                    raise DataError(
                        f"nonpositive {name} for ({rec.project}, {rec.language}) "
                        "under strict policy; rerun with the log-offset policy "
                        "if this is expected"
                    )
            x = tuple(float(np.log(v)) for v in raw)
        else:
            x = tuple(float(np.log(v + 0.5)) for v in raw)
        rows.append(PreparedRow(projects[rec.project], languages[rec.language], x, int(rec.bugs)))
    return Dataset(tuple(rows), tuple(languages), tuple(projects))


def summarize(dataset: Dataset) -> DataSummary:
    """Sample moments of bugs, type-7 predictor quantiles, group occupancy."""
    if dataset.n_rows == 0:
        raise DataError("cannot summarize an empty dataset")
    bugs = dataset.bugs()
    x = dataset.design().x
    quantiles = np.quantile(x, QUANTILE_PROBS, axis=0, method="linear").T  # (4, 5)
    rows_per_language = {name: 0 for name in dataset.language_names}
    project_counts = np.zeros(dataset.n_projects, dtype=int)
    for row in dataset.rows:
        rows_per_language[dataset.language_names[row.language_index]] += 1
        project_counts[row.project_index] += 1
    histogram: dict[int, int] = {}
    for count in project_counts:
        histogram[int(count)] = histogram.get(int(count), 0) + 1
    variance = float(np.var(bugs, ddof=1)) if len(bugs) > 1 else 0.0
    return DataSummary(
        n_rows=dataset.n_rows,
        bug_mean=float(np.mean(bugs)),
        bug_variance=variance,
        predictor_quantiles=quantiles,
        rows_per_language=rows_per_language,
        rows_per_project=histogram,
        n_projects=dataset.n_projects,
    )


def quantile_scenario(summary: DataSummary, q: float) -> Scenario:
    """Scenario whose predictors sit at the q-quantile of each log predictor."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile probability must be in [0, 1], got {q}")
    probs = np.asarray(QUANTILE_PROBS)
    values = []
    for i in range(4):
        log_q = float(np.interp(q, probs, summary.predictor_quantiles[i]))
        values.append(float(np.exp(log_q)))
    return Scenario(*values, label=f"q={q:g}")


def write_csv(path: str | Path, rows: Iterable[Sequence]) -> None:
    """Write rows to CSV with deterministic float formatting."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        for row in rows:
            writer.writerow([_format_cell(cell) for cell in row])


def _format_cell(cell) -> str:
    if isinstance(cell, (float, np.floating)):
        return repr(float(cell))
    if isinstance(cell, (int, np.integer)):
        return str(int(cell))
    return str(cell)
