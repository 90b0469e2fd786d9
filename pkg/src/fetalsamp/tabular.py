"""CSV conventions shared by every command: fixed columns, 9 significant digits."""

import csv
import math
from pathlib import Path

NA = "n/a"


def fmt(value):
    if value is None:
        return NA
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    value = float(value)
    if math.isnan(value):
        return NA
    return format(value, ".9g")


def parse(value):
    return math.nan if value in (NA, "", "nan") else float(value)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def read_csv(path, required=()):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {missing}")
        return list(reader)


def volume_id(path):
    name = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return Path(path).stem


def list_volumes(directory):
    """Sorted NIfTI files in a directory, keyed by id (file name without extension)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    files = sorted(p for p in directory.iterdir()
                   if p.name.endswith(".nii") or p.name.endswith(".nii.gz"))
    return {volume_id(p): p for p in files}
