"""Study manifests, cohort index files and in-memory patch sets.

A cohort directory holds ``cohort.json`` (manifest paths, generator config,
seed), one ``<id>.json`` manifest per study and two ``.nvol`` volumes each.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .synth import NoduleStudy, SynthConfig, TimePoint, synthesize_study
from .volume import extract_patch, read_volume, write_volume

INDEX_NAME = "cohort.json"
TIMES = ("t1", "t2", "t1t2")


def study_to_dict(study: NoduleStudy) -> dict:
    def tp(t: TimePoint):
        return {"volume": t.volume, "center_voxel": list(t.center_voxel), "diameter_mm": t.diameter_mm}

    return {"study_id": study.study_id, "label": study.label, "interval_days": study.interval_days,
            "t1": tp(study.t1), "t2": tp(study.t2)}


def study_from_dict(d: dict) -> NoduleStudy:
    try:
        def tp(t):
            center = tuple(int(v) for v in t["center_voxel"])
            if len(center) != 3:
                raise FormatError("center_voxel needs 3 coordinates")
            return TimePoint(str(t["volume"]), center, float(t["diameter_mm"]))

        return NoduleStudy(str(d["study_id"]), d["label"], tp(d["t1"]), tp(d["t2"]), int(d["interval_days"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed study manifest: missing or invalid {exc}") from exc


def write_manifest(path, study: NoduleStudy) -> None:
    Path(path).write_text(json.dumps(study_to_dict(study), indent=2))


def read_manifest(path) -> NoduleStudy:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return study_from_dict(data)


def synth_config_to_dict(cfg: SynthConfig) -> dict:
    return dataclasses.asdict(cfg)


def write_cohort(out_dir, cfg: SynthConfig) -> Path:
    """Generate and store the whole synthetic cohort; returns the index path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifests = []
    for i in range(cfg.n_studies):
        study, v1, v2 = synthesize_study(cfg, i)
        write_volume(out / study.t1.volume, v1)
        write_volume(out / study.t2.volume, v2)
        name = f"{study.study_id}.json"
        write_manifest(out / name, study)
        manifests.append(name)
    index = out / INDEX_NAME
    index.write_text(json.dumps({"manifests": manifests, "seed": cfg.seed, "config": synth_config_to_dict(cfg)},
                                indent=2))
    return index


def _index_path(path) -> Path:
    p = Path(path)
    return p / INDEX_NAME if p.is_dir() else p


def read_cohort_index(path) -> dict:
    p = _index_path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{p}: not valid JSON: {exc}") from exc
    if not isinstance(data.get("manifests"), list):
        raise FormatError(f"{p}: cohort index needs a 'manifests' list")
    return data


def study_patches(study: NoduleStudy, root) -> tuple[np.ndarray, np.ndarray]:
    root = Path(root)
    return (extract_patch(read_volume(root / study.t1.volume), study.t1.center_voxel),
            extract_patch(read_volume(root / study.t2.volume), study.t2.center_voxel))


@dataclass
class StudySet:
    """Studies with their normalized ``[1, 32, 32, 32]`` patches at both time-points."""
    ids: list[str]
    labels: np.ndarray
    t1: np.ndarray
    t2: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        if not (len(self.labels) == self.t1.shape[0] == self.t2.shape[0] == n):
            raise ValueError("StudySet fields disagree on the number of studies")

    def __len__(self):
        return len(self.ids)

    def subset(self, ids) -> "StudySet":
        pos = {s: i for i, s in enumerate(self.ids)}
        try:
            rows = np.array([pos[s] for s in ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown study id {exc}") from None
        return StudySet([self.ids[i] for i in rows], self.labels[rows], self.t1[rows], self.t2[rows])

    def streams(self, time: str, rows=None) -> list[np.ndarray]:
        """Model inputs for ``time`` in t1 / t2 / t1t2 (T1 first)."""
        if time not in TIMES:
            raise ValueError(f"time must be one of {TIMES}, got {time!r}")
        sel = slice(None) if rows is None else rows
        return {"t1": [self.t1[sel]], "t2": [self.t2[sel]], "t1t2": [self.t1[sel], self.t2[sel]]}[time]


def load_study_set(path) -> StudySet:
    index = read_cohort_index(path)
    root = _index_path(path).parent
    ids, labels, p1, p2 = [], [], [], []
    for name in index["manifests"]:
        study = read_manifest(root / name)
        a, b = study_patches(study, root)
        ids.append(study.study_id)
        labels.append(study.y)
        p1.append(a)
        p2.append(b)
    return StudySet(ids, np.array(labels), np.stack(p1), np.stack(p2))


def synth_study_set(cfg: SynthConfig) -> StudySet:
    """The same patches ``load_study_set`` would read back, without touching disk."""
    ids, labels, p1, p2 = [], [], [], []
    for i in range(cfg.n_studies):
        study, v1, v2 = synthesize_study(cfg, i)
        ids.append(study.study_id)
        labels.append(study.y)
        p1.append(extract_patch(v1, study.t1.center_voxel))
        p2.append(extract_patch(v2, study.t2.center_voxel))
    return StudySet(ids, np.array(labels), np.stack(p1), np.stack(p2))
