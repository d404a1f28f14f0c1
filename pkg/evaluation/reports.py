"""
Evaluation report: flat (protocol, pair, metric, value) rows plus the
recall@1-versus-radius curve.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from datasets.io import atomic_write_csv

REPORT_FIELDS = ['protocol', 'pair', 'metric', 'value']
CURVE_FIELDS = ['protocol', 'pair', 'radius', 'recall_at_1', 'queries']


def _format(value) -> str:
    return str(value) if isinstance(value, int) else repr(float(value))


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    curve: list = field(default_factory=list)

    def add(self, protocol: str, pair: str, metric: str, value):
        self.rows.append({'protocol': protocol, 'pair': pair, 'metric': metric, 'value': value})

    def add_curve_point(self, protocol: str, pair: str, radius: float, recall: float, queries: int):
        self.curve.append({'protocol': protocol, 'pair': pair, 'radius': radius, 'recall_at_1': recall, 'queries': queries})

    def value(self, protocol: str, pair: str, metric: str):
        for row in self.rows:
            if (row['protocol'], row['pair'], row['metric']) == (protocol, pair, metric):
                return row['value']
        raise KeyError((protocol, pair, metric))

    def metrics(self) -> set:
        return {row['metric'] for row in self.rows}

    def extend(self, other: EvalReport):
        self.rows.extend(other.rows)
        self.curve.extend(other.curve)


def write_report(report: EvalReport, path):
    rows = [dict(row, value=_format(row['value'])) for row in report.rows]
    return atomic_write_csv(path, REPORT_FIELDS, rows)


def write_curve(report: EvalReport, path):
    rows = [dict(row, radius=_format(row['radius']), recall_at_1=_format(row['recall_at_1'])) for row in report.curve]
    return atomic_write_csv(path, CURVE_FIELDS, rows)
