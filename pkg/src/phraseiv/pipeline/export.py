"""Raw i-vector export for external visualization."""

import csv

import numpy as np

from ..errors import ManifestError


def export_ivectors_csv(archive, manifest, out_path):
    """One row per archive entry: id, phrase, speaker, then the R coordinates.

    Keys of the form ``utt|phrase`` (HMM-aligned eval vectors) are looked
    up by their utterance part.
    """
    items = list(archive.items())
    R = len(np.asarray(getattr(items[0][1], "w", items[0][1]))) if items else 0
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["utt_id", "phrase", "speaker"] + [f"w{i}" for i in range(R)])
        for key, vec in items:
            utt = key.split("|", 1)[0]
            if utt not in manifest:
                raise ManifestError(f"i-vector id {key!r} is not in the manifest")
            row = manifest[utt]
            w = np.asarray(getattr(vec, "w", vec), dtype=np.float64)
            writer.writerow([key, row.phrase, row.speaker] + [f"{x:.17g}" for x in w])
