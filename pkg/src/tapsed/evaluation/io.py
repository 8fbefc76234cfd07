"""Tab-separated event files (DCASE layout)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Sequence

from .postprocess import EventInterval


def read_strong_tsv(path) -> Dict[str, List[EventInterval]]:
    """``filename onset offset event_label`` rows, with or without a header.

    Clips listed with empty onset/offset/label are kept with no events.
    """
    out: Dict[str, List[EventInterval]] = {}
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh, delimiter="\t")):
            if not row or (i == 0 and row[0] == "filename"):
                continue
            name = row[0]
            events = out.setdefault(name, [])
            if len(row) < 4 or row[1] == "" or row[3] == "":
                continue
            onset, offset = float(row[1]), float(row[2])
            if not offset > onset:
                raise ValueError(f"{path}:{i + 1}: offset {offset} is not after onset {onset}")
            events.append(EventInterval(row[3], onset, offset))
    return out


def write_strong_tsv(path, events: Dict[str, Sequence[EventInterval]], keep_empty: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["filename", "onset", "offset", "event_label"])
        for name in sorted(events):
            evs = events[name]
            if not evs and keep_empty:
                w.writerow([name, "", "", ""])
            for e in sorted(evs, key=lambda e: (e.onset, e.label)):
                w.writerow([name, f"{e.onset:.3f}", f"{e.offset:.3f}", e.label])


def read_weak_tsv(path) -> Dict[str, List[str]]:
    out: Dict[str, List[str]] = {}
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh, delimiter="\t")):
            if not row or (i == 0 and row[0] == "filename"):
                continue
            labels = row[1].split(",") if len(row) > 1 and row[1] else []
            out[row[0]] = [l for l in labels if l]
    return out


def write_weak_tsv(path, labels: Dict[str, Sequence[str]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["filename", "event_labels"])
        for name in sorted(labels):
            w.writerow([name, ",".join(labels[name])])


def read_unlabeled_tsv(path) -> List[str]:
    names = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        line = line.strip()
        if not line or (i == 0 and line == "filename"):
            continue
        names.append(line.split("\t")[0])
    return names


def write_unlabeled_tsv(path, names: Sequence[str]) -> None:
    Path(path).write_text("filename\n" + "".join(f"{n}\n" for n in sorted(names)))
