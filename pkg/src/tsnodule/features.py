"""Memo of frozen-backbone features per (study, time-point, symmetry element).

An eval-mode backbone is a fixed function of its input, and augmentation only
draws from a finite group, so head-only training can look features up instead
of recomputing them. Entries are filled lazily and shared across threads.
"""
from __future__ import annotations

import hashlib
import threading

import numpy as np

from .augment import GROUP
from .backbone import Backbone, TapPoint
from .cohort import StudySet


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


class FeatureCache:
    def __init__(self, backbone: Backbone, source: StudySet, taps, batch: int = 16):
        self.backbone = backbone
        self.digest = params_digest(backbone.params)
        self.source = source
        self.taps = tuple(TapPoint.parse(t) for t in taps)
        self.batch = batch
        self._row = {s: i for i, s in enumerate(source.ids)}
        self._memo: dict[tuple, np.ndarray] = {}
        self._lock = threading.Lock()

    def check(self, backbone: Backbone) -> None:
        if params_digest(backbone.params) != self.digest:
            raise ValueError("feature cache was built from different backbone weights")

    def __len__(self):
        return len(self._memo)

    def _fill(self, keys) -> None:
        for start in range(0, len(keys), self.batch):
            chunk = keys[start:start + self.batch]
            x = np.stack([GROUP[g].apply(getattr(self.source, t)[self._row[sid]]) for sid, t, g in chunk])
            out = self.backbone.extract(x, self.taps)
            with self._lock:
                for i, (sid, t, g) in enumerate(chunk):
                    for tap in self.taps:
                        self._memo[(tap, sid, t, g)] = out[tap][i].reshape(-1).copy()

    def get(self, tap, ids, times, sym) -> np.ndarray:
        """Concatenated per-time features, ``[len(ids), len(times) * width]``."""
        tap = TapPoint.parse(tap)
        if tap not in self.taps:
            raise KeyError(f"tap {tap} not cached (have {[str(t) for t in self.taps]})")
        for sid in ids:
            if sid not in self._row:
                raise KeyError(f"study {sid} is not in the cached cohort")
        wanted = [(sid, t, int(g)) for sid, g in zip(ids, sym) for t in times]
        missing = sorted({k for k in wanted if (tap, *k) not in self._memo})
        if missing:
            self._fill(missing)
        rows = [np.concatenate([self._memo[(tap, sid, t, int(g))] for t in times]) for sid, g in zip(ids, sym)]
        return np.stack(rows)
