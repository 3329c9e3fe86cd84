"""Tab-separated corpus manifests.

Header line, then one row per utterance::

    utt_id  path  phrase  speaker  split  transcript

`path` is relative to the manifest's directory (or absolute) and points
to a .wav file or a .pkft feature file.  `transcript` is a
space-separated phone sequence and may be empty.
"""

import csv
import os
from dataclasses import dataclass, replace

from ..errors import ManifestError

COLUMNS = ("utt_id", "path", "phrase", "speaker", "split", "transcript")
SPLITS = ("train", "enroll", "eval")


@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    path: str
    phrase: str
    speaker: str
    split: str
    transcript: tuple = ()


class Manifest:
    def __init__(self, rows, root="."):
        self.rows = list(rows)
        self.root = str(root)
        self._by_id = {}
        for row in self.rows:
            if row.utt_id in self._by_id:
                raise ManifestError(f"duplicate utterance id {row.utt_id!r}")
            if row.split not in SPLITS:
                raise ManifestError(f"{row.utt_id}: invalid split {row.split!r}")
            self._by_id[row.utt_id] = row

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def __getitem__(self, utt_id):
        return self._by_id[utt_id]

    def __contains__(self, utt_id):
        return utt_id in self._by_id

    def resolve(self, row):
        return row.path if os.path.isabs(row.path) else os.path.join(self.root, row.path)

    def split(self, *names):
        return [r for r in self.rows if r.split in names]

    def phrases(self, *splits):
        rows = self.split(*splits) if splits else self.rows
        return sorted({r.phrase for r in rows})

    def phrase_transcripts(self):
        """First transcript seen for each phrase."""
        out = {}
        for r in self.rows:
            if r.transcript and r.phrase not in out:
                out[r.phrase] = r.transcript
        return out

    def check_files(self):
        missing = [r.utt_id for r in self.rows if not os.path.exists(self.resolve(r))]
        if missing:
            raise ManifestError(f"{len(missing)} manifest paths do not exist, "
                                f"first: {missing[0]!r}")

    def with_paths(self, mapping, root):
        rows = [replace(r, path=mapping[r.utt_id]) for r in self.rows]
        return Manifest(rows, root)


def read_manifest(path, check_files=True):
    root = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if tuple(header[:5]) != COLUMNS[:5]:
            raise ManifestError(f"{path}: bad header {header!r}")
        rows = []
        for lineno, fields in enumerate(reader, 2):
            if not fields or not "".join(fields).strip():
                continue
            if len(fields) not in (5, 6):
                raise ManifestError(f"{path}:{lineno}: expected 5 or 6 columns")
            transcript = tuple(fields[5].split()) if len(fields) == 6 else ()
            rows.append(ManifestRow(*fields[:5], transcript))
    manifest = Manifest(rows, root)
    if check_files:
        manifest.check_files()
    return manifest


def write_manifest(manifest, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in manifest:
            writer.writerow([r.utt_id, r.path, r.phrase, r.speaker, r.split,
                             " ".join(r.transcript)])
