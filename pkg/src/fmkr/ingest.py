"""Flow/syslog parsing, timestamp fusion and support/query routing.

Flow files are CSV with a header ``ts,f0,...,f{d-1},label``. Syslog files are
line oriented: ``<timestamp> <free text> label=<STAGE>``, where the timestamp
is epoch seconds or ISO-8601. Fused exports reuse the flow layout with the
concatenated feature columns plus a ``matched`` 0/1 column.
"""

from __future__ import annotations

import bisect
import csv
import dataclasses
import datetime as _dt
import enum
import io
import os
import string
import zlib
from collections import Counter
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from fmkr.stages import StageLabel

FLOW_DIM = 80
SYSLOG_DIM = 14
N_HASH_BUCKETS = 8

_PUNCT = frozenset(string.punctuation)


class ParseError(ValueError):
    """A row or line could not be parsed. ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ParsedRecords(list):
    """List of parsed records that also carries row-level errors.

    Only populated in collect mode (``strict=False``); in strict mode the first
    bad row raises instead.
    """

    def __init__(self, records: Iterable = (), errors: Iterable[ParseError] = ()):
        super().__init__(records)
        self.errors: list[ParseError] = list(errors)


def _frozen_vector(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclasses.dataclass(frozen=True, eq=False)
class FlowRecord:
    timestamp: float
    features: np.ndarray
    label: StageLabel

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen_vector(self.features))
        object.__setattr__(self, "label", StageLabel.parse(self.label))
        if not np.isfinite(self.timestamp):
            raise ValueError(f"non-finite timestamp {self.timestamp!r}")

    def __eq__(self, other):
        if not isinstance(other, FlowRecord):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.label == other.label
            and np.array_equal(self.features, other.features)
        )


@dataclasses.dataclass(frozen=True, eq=False)
class SyslogRecord:
    timestamp: float
    features: np.ndarray
    label: StageLabel
    raw: str = ""

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen_vector(self.features))
        object.__setattr__(self, "label", StageLabel.parse(self.label))
        if not np.isfinite(self.timestamp):
            raise ValueError(f"non-finite timestamp {self.timestamp!r}")

    def __eq__(self, other):
        if not isinstance(other, SyslogRecord):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.label == other.label
            and self.raw == other.raw
            and np.array_equal(self.features, other.features)
        )


@dataclasses.dataclass(frozen=True, eq=False)
class FusedSample:
    """A flow row joined with its nearest syslog row (or zero padding)."""

    timestamp: float
    features: np.ndarray
    label: StageLabel
    syslog_matched: bool
    syslog_dim: int = SYSLOG_DIM

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen_vector(self.features))
        object.__setattr__(self, "label", StageLabel.parse(self.label))

    def __eq__(self, other):
        if not isinstance(other, FusedSample):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.label == other.label
            and self.syslog_matched == other.syslog_matched
            and self.syslog_dim == other.syslog_dim
            and np.array_equal(self.features, other.features)
        )

    def __hash__(self):
        return hash((self.timestamp, int(self.label), self.syslog_matched, self.features.tobytes()))


class LabelFusionRule(str, enum.Enum):
    FLOW_WINS = "flow-wins"
    MAX_SEVERITY = "max-severity"


@dataclasses.dataclass(frozen=True)
class AlignConfig:
    window: float = 2.0
    label_fusion_rule: LabelFusionRule = LabelFusionRule.MAX_SEVERITY

    def __post_init__(self):
        if not self.window > 0:
            raise ValueError(f"window must be > 0, got {self.window!r}")
        object.__setattr__(self, "label_fusion_rule", LabelFusionRule(self.label_fusion_rule))


@dataclasses.dataclass
class MetaDataset:
    """Support pool (no DE) and query pool (DE only).

    ``counts_scope`` records whether ``class_counts`` covers the union of both
    pools (``"all"``) or only the support pool (``"support"``).
    """

    support: list[FusedSample]
    query: list[FusedSample]
    class_counts: dict[StageLabel, int]
    counts_scope: str = "all"

    @property
    def feature_dim(self) -> int:
        pool = self.support or self.query
        if not pool:
            raise ValueError("empty dataset")
        return len(pool[0].features)

    def arrays(self, pool: str = "support") -> tuple[np.ndarray, np.ndarray]:
        """Stack one pool (``support``, ``query`` or ``all``) into ``(X, y)``."""
        samples = {"support": self.support, "query": self.query,
                   "all": self.support + self.query}[pool]
        return samples_to_arrays(samples, dim=self.feature_dim)


def samples_to_arrays(samples: Sequence, dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack records/samples into a float matrix and an integer label vector."""
    if not samples:
        return np.zeros((0, dim or 0)), np.zeros(0, dtype=np.int64)
    X = np.vstack([s.features for s in samples])
    y = np.array([int(s.label) for s in samples], dtype=np.int64)
    return X, y


def dataset_from_arrays(X, y, syslog_dim: int = 0, timestamps=None) -> MetaDataset:
    """Wrap plain ``(X, y)`` arrays as fused samples and route them.

    ``syslog_dim`` trailing columns are treated as syslog features; a sample
    counts as matched when any of them is non-zero.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    ts = np.zeros(len(X)) if timestamps is None else np.asarray(timestamps, dtype=np.float64)
    samples = []
    for t, row, lab in zip(ts, X, y):
        matched = bool(syslog_dim) and bool(np.any(row[len(row) - syslog_dim:]))
        samples.append(FusedSample(float(t), row, StageLabel.parse(lab), matched, syslog_dim))
    return split_support_query(samples)


# ---------------------------------------------------------------------------
# Flow files
# ---------------------------------------------------------------------------

def _flow_header(dim: int) -> list[str]:
    return ["ts", *(f"f{i}" for i in range(dim)), "label"]


def parse_flow_file(path, flow_dim: int = FLOW_DIM, strict: bool = True) -> ParsedRecords:
    """Read a flow-feature CSV into :class:`FlowRecord` objects.

    Args:
        path: CSV file whose header names ``ts``, ``f0..f{flow_dim-1}`` and
            ``label`` in any order.
        flow_dim: expected number of feature columns.
        strict: raise on the first malformed row. With ``strict=False`` bad
            rows are skipped and reported on ``result.errors``.

    Raises:
        ParseError: bad header, or a bad row in strict mode.
    """
    if flow_dim < 1:
        raise ValueError("flow_dim must be positive")
    path = str(path)
    out = ParsedRecords()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        header = [h.strip() for h in header]
        try:
            ts_col = header.index("ts")
            label_col = header.index("label")
            feat_cols = [header.index(f"f{i}") for i in range(flow_dim)]
        except ValueError as exc:
            raise ParseError(f"bad header: {exc}", line=1, path=path) from None
        if len(header) != flow_dim + 2:
            raise ParseError(
                f"header has {len(header)} columns, expected {flow_dim + 2}", line=1, path=path)
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != len(header):
                    raise ParseError(
                        f"expected {len(header)} columns, got {len(row)}", line=lineno, path=path)
                try:
                    ts = float(row[ts_col])
                    feats = [float(row[c]) for c in feat_cols]
                except ValueError as exc:
                    raise ParseError(f"non-numeric field: {exc}", line=lineno, path=path) from None
                try:
                    label = StageLabel.parse(row[label_col])
                except ValueError:
                    raise ParseError(f"unknown label {row[label_col].strip()!r}",
                                     line=lineno, path=path) from None
                if not np.isfinite(ts):
                    raise ParseError(f"non-finite timestamp {row[ts_col]!r}", line=lineno, path=path)
                out.append(FlowRecord(ts, feats, label))
            except ParseError as err:
                if strict:
                    raise
                out.errors.append(err)
    return out


def _write_atomic_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_flow_file(path, records: Sequence[FlowRecord]) -> None:
    """Write flow records in the format :func:`parse_flow_file` reads.

    Floats are written with ``repr`` so a round trip is bit exact.
    """
    dim = len(records[0].features) if records else FLOW_DIM
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_flow_header(dim))
    for r in records:
        if len(r.features) != dim:
            raise ValueError("records have inconsistent feature dimensions")
        w.writerow([repr(float(r.timestamp)), *(repr(float(v)) for v in r.features), r.label.name])
    _write_atomic_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Syslog files
# ---------------------------------------------------------------------------

def featurize_syslog_line(text: str) -> np.ndarray:
    """Map one syslog message to a fixed 14-dim vector.

    Layout: ``[n_chars, n_tokens, digit_frac, upper_frac, n_punct,
    distinct_token_frac, bucket_0 .. bucket_7]``. Ratios over an empty
    denominator are 0. Buckets are CRC32 token hashes mod 8, counted and
    divided by the token count, so they do not depend on ``PYTHONHASHSEED``.
    """
    vec = np.zeros(SYSLOG_DIM, dtype=np.float64)
    n_chars = len(text)
    tokens = text.split()
    n_tok = len(tokens)
    vec[0] = n_chars
    vec[1] = n_tok
    if n_chars:
        vec[2] = sum(ch.isdigit() for ch in text) / n_chars
        vec[3] = sum(ch.isupper() for ch in text) / n_chars
    vec[4] = sum(ch in _PUNCT for ch in text)
    if n_tok:
        vec[5] = len(set(tokens)) / n_tok
        for tok in tokens:
            vec[6 + zlib.crc32(tok.encode("utf-8")) % N_HASH_BUCKETS] += 1.0
        vec[6:] /= n_tok
    return vec


def parse_timestamp(token: str) -> float:
    """Epoch seconds or ISO-8601 (naive values are taken as UTC)."""
    try:
        ts = float(token)
    except ValueError:
        iso = token[:-1] + "+00:00" if token.endswith("Z") else token
        try:
            when = _dt.datetime.fromisoformat(iso)
        except ValueError:
            raise ValueError(f"unparseable timestamp {token!r}") from None
        if when.tzinfo is None:
            when = when.replace(tzinfo=_dt.timezone.utc)
        ts = when.timestamp()
    if not np.isfinite(ts):
        raise ValueError(f"non-finite timestamp {token!r}")
    return ts


def parse_syslog_line(line: str, lineno: int | None = None, path: str | None = None) -> SyslogRecord:
    raw = line.rstrip("\r\n")
    parts = raw.split()
    if not parts:
        raise ParseError("empty line", line=lineno, path=path)
    try:
        ts = parse_timestamp(parts[0])
    except ValueError as exc:
        raise ParseError(str(exc), line=lineno, path=path) from None
    if len(parts) < 2 or not parts[-1].lower().startswith("label="):
        raise ParseError("missing trailing label=<STAGE> token", line=lineno, path=path)
    try:
        label = StageLabel.parse(parts[-1].split("=", 1)[1])
    except ValueError:
        raise ParseError(f"unknown label {parts[-1]!r}", line=lineno, path=path) from None
    text = " ".join(parts[1:-1])
    return SyslogRecord(ts, featurize_syslog_line(text), label, raw=raw)


def parse_syslog_file(path, strict: bool = True) -> ParsedRecords:
    """Read a syslog file; blank lines are ignored.

    The free text between the timestamp and the label token is featurized with
    :func:`featurize_syslog_line`; the label token itself is never featurized.
    """
    path = str(path)
    out = ParsedRecords()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(parse_syslog_line(line, lineno, path))
            except ParseError as err:
                if strict:
                    raise
                out.errors.append(err)
    return out


def format_syslog_line(timestamp: float, text: str, label: StageLabel) -> str:
    return f"{timestamp!r} {text} label={StageLabel.parse(label).name}"


def write_syslog_file(path, lines: Iterable[tuple[float, str, StageLabel]]) -> None:
    body = "".join(format_syslog_line(t, text, lab) + "\n" for t, text, lab in lines)
    _write_atomic_text(path, body)


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def _check_dims(records: Sequence, kind: str) -> int | None:
    dims = {len(r.features) for r in records}
    if len(dims) > 1:
        raise ValueError(f"{kind} records have mixed feature dimensions {sorted(dims)}")
    return dims.pop() if dims else None


def _fuse_label(flow_label: StageLabel, syslog_label: StageLabel, rule: LabelFusionRule) -> StageLabel:
    if rule is LabelFusionRule.FLOW_WINS:
        return flow_label
    return max(flow_label, syslog_label)


def align_and_fuse(flows: Sequence[FlowRecord], syslogs: Sequence[SyslogRecord],
                   cfg: AlignConfig = AlignConfig(), syslog_dim: int | None = None) -> list[FusedSample]:
    """Pair every flow with its nearest syslog record inside ``cfg.window``.

    Output holds one sample per flow, ordered by flow timestamp (ties keep
    input order). A flow pairs with the syslog of minimal ``|dt|`` subject to
    ``|dt| <= window``; equal distances go to the earlier syslog, then to the
    earlier one in input order. A syslog may pair with many flows. Unmatched
    flows get zero syslog features and keep their own label.

    ``syslog_dim`` is only needed when ``syslogs`` is empty.
    """
    _check_dims(flows, "flow")
    sdim = _check_dims(syslogs, "syslog")
    if sdim is None:
        sdim = SYSLOG_DIM if syslog_dim is None else syslog_dim
    elif syslog_dim is not None and syslog_dim != sdim:
        raise ValueError(f"syslog_dim={syslog_dim} but records have {sdim}")

    flow_order = sorted(range(len(flows)), key=lambda i: flows[i].timestamp)
    sys_sorted = sorted(syslogs, key=lambda s: s.timestamp)  # stable: file order on ties
    sys_ts = [s.timestamp for s in sys_sorted]
    zeros = np.zeros(sdim)
    rule = cfg.label_fusion_rule
    out = []
    for i in flow_order:
        f = flows[i]
        t = f.timestamp
        pos = bisect.bisect_left(sys_ts, t)
        best = None
        best_d = None
        # nearest earlier timestamp group; take the first record of that group
        if pos > 0:
            j = bisect.bisect_left(sys_ts, sys_ts[pos - 1])
            d = abs(sys_ts[j] - t)
            if d <= cfg.window:
                best, best_d = j, d
        if pos < len(sys_ts):
            d = abs(sys_ts[pos] - t)
            if d <= cfg.window and (best_d is None or d < best_d):
                best, best_d = pos, d
        if best is None:
            feats = np.concatenate([f.features, zeros])
            out.append(FusedSample(t, feats, f.label, False, sdim))
        else:
            s = sys_sorted[best]
            feats = np.concatenate([f.features, s.features])
            out.append(FusedSample(t, feats, _fuse_label(f.label, s.label, rule), True, sdim))
    return out


def split_support_query(samples: Sequence[FusedSample]) -> MetaDataset:
    """Route DE samples to the query pool and everything else to support."""
    support = [s for s in samples if s.label is not StageLabel.DE]
    query = [s for s in samples if s.label is StageLabel.DE]
    counts = Counter(s.label for s in samples)
    return MetaDataset(support, query, {lab: counts[lab] for lab in StageLabel if counts[lab]})


def compute_class_weights(class_counts: Mapping, exact: bool = False) -> dict:
    """Per-class cost ``m_max / m_c``.

    Keys are passed through unchanged. With ``exact=True`` the weights are
    :class:`fractions.Fraction` values; otherwise floats (correctly rounded).
    """
    if not class_counts:
        raise ValueError("class_counts is empty")
    for key, m in class_counts.items():
        if int(m) != m or m < 1:
            raise ValueError(f"count for {key!r} must be a positive integer, got {m!r}")
    m_max = max(int(m) for m in class_counts.values())
    if exact:
        return {key: Fraction(m_max, int(m)) for key, m in class_counts.items()}
    return {key: m_max / int(m) for key, m in class_counts.items()}


# ---------------------------------------------------------------------------
# Fused dataset export
# ---------------------------------------------------------------------------

def write_fused_file(path, samples: Sequence[FusedSample]) -> None:
    """CSV with ``ts,f0..f{D-1},label,matched``."""
    dim = len(samples[0].features) if samples else FLOW_DIM + SYSLOG_DIM
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*_flow_header(dim), "matched"])
    for s in samples:
        w.writerow([repr(float(s.timestamp)), *(repr(float(v)) for v in s.features),
                    s.label.name, int(s.syslog_matched)])
    _write_atomic_text(path, buf.getvalue())


def read_fused_file(path, syslog_dim: int = SYSLOG_DIM) -> list[FusedSample]:
    path = str(path)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        header = [h.strip() for h in header]
        if header[0] != "ts" or header[-2:] != ["label", "matched"]:
            raise ParseError("bad fused header", line=1, path=path)
        dim = len(header) - 3
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(row)}",
                                 line=reader.line_num, path=path)
            try:
                feats = [float(v) for v in row[1:1 + dim]]
                label = StageLabel.parse(row[-2])
                matched = row[-1].strip() == "1"
                out.append(FusedSample(float(row[0]), feats, label, matched, syslog_dim))
            except ValueError as exc:
                raise ParseError(str(exc), line=reader.line_num, path=path) from None
    return out
