"""
Training metrics as JSON Lines, one :py:class:`MetricsRecord` per line with
exactly these keys::

  {"step": 10, "tokens_seen": 5120, "ce_loss": 4.91, "z_loss": 0.0031,
   "lr": 0.0006, "flops_cum": 123456789, "wall_seconds": 1.52}
"""
import json
import pathlib
from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class MetricsRecord:
    """
    One training-step observation. ``ce_loss`` is in nats per token and
    excludes the z-loss term.
    """
    step: int
    tokens_seen: int
    ce_loss: float
    z_loss: float
    lr: float
    flops_cum: int
    wall_seconds: float

    def to_json(self):
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def read_metrics(path):
    """:returns: list of :py:class:`MetricsRecord` from a JSONL file"""
    with open(path) as f:
        return [MetricsRecord.from_json(line) for line in f if line.strip()]


class MetricsWriter:
    """
    :param str path: JSONL file

    Subscribes to :py:attr:`~resmat.events.TrainEvent.LOG`. With
    ``append=False`` the file is truncated on open; a resumed run appends and
    first drops any records past the resume step.
    """

    def __init__(self, path, append=False, resume_step=None):
        self.path = pathlib.Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if append and resume_step is not None and self.path.exists():
            kept = [r for r in read_metrics(self.path) if r.step <= resume_step]
            self.path.write_text(''.join(r.to_json() + '\n' for r in kept))
        self._f = open(str(self.path), 'a' if append else 'w')

    def write(self, record):
        self._f.write(record.to_json() + '\n')
        self._f.flush()

    def on_log(self, event):
        self.write(event.data)

    def on_finish(self, event):
        self.close()

    @property
    def closed(self):
        return self._f.closed

    def close(self):
        if not self._f.closed:
            self._f.close()
