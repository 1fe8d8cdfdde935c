"""Training metrics log with a stable, diff-friendly CSV rendering.

Floats are written with repr-round-trip precision via a fixed format so two
runs with the same seed produce byte-identical files. Wall-clock seconds are
zero unless timing is explicitly requested, since they are the one column
that can never be reproducible.
"""

import json
from dataclasses import dataclass, field

__all__ = ["METRICS_HEADER", "LogRecord", "TrainLog", "write_manifest"]

METRICS_HEADER = "phase,pass,layer,epoch,objective,layer_objective,train_acc,val_acc,wall_s"


def _fmt(value):
    return "%.12g" % value


@dataclass
class LogRecord:
    """One metrics row."""

    phase: str
    pass_index: int
    layer: str
    epoch: int
    objective: float
    layer_objective: float
    train_acc: float
    val_acc: float
    wall_s: float = 0.0

    def render(self):
        return ",".join([
            self.phase, str(self.pass_index), self.layer, str(self.epoch),
            _fmt(self.objective), _fmt(self.layer_objective),
            _fmt(self.train_acc), _fmt(self.val_acc), "%.3f" % self.wall_s,
        ])


@dataclass
class TrainLog:
    """Ordered collection of metrics rows."""

    records: list = field(default_factory=list)

    def append(self, record):
        self.records.append(record)

    def extend(self, other):
        self.records.extend(other.records)

    def render(self):
        return "\n".join([METRICS_HEADER] + [r.render() for r in self.records]) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.render())


def write_manifest(path, entries):
    """Write run metadata as sorted-key JSON, one stable rendering per run."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")
