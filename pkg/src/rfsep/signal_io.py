"""On-disk signal libraries: raw little-endian float32 files plus a JSON manifest."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .waveforms import SAMPLE_RATE, WaveformSpec

MANIFEST = "manifest.json"
DTYPE = np.dtype("<f4")


def write_signal(path, samples) -> None:
    np.asarray(samples, dtype=DTYPE).tofile(path)


def read_signal(path, mmap: bool = False) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    if path.stat().st_size % DTYPE.itemsize:
        raise ParameterError(f"{path}: size is not a whole number of float32 samples")
    if mmap:
        return np.memmap(path, dtype=DTYPE, mode="r")
    return np.fromfile(path, dtype=DTYPE)


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        return {"entries": []}
    with open(path) as fh:
        return json.load(fh)


def write_library(directory, prefix: str, items) -> list:
    """Write ``(TimeSignal, WaveformSpec)`` pairs and merge them into the manifest.

    Entries whose file name already appears in the manifest are replaced.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(directory)
    by_file = {e["file"]: e for e in manifest["entries"]}
    new = []
    for i, (sig, spec) in enumerate(items):
        name = f"{prefix}_{i:05d}.f32"
        write_signal(directory / name, sig.samples)
        entry = {
            "file": name,
            "kind": spec.intrapulse_kind.value,
            "spec": spec.to_dict(),
            "seed": spec.seed,
            "sample_rate": sig.sample_rate,
            "length": sig.length,
        }
        by_file[name] = entry
        new.append(entry)
    manifest["entries"] = [by_file[k] for k in sorted(by_file)]
    with open(directory / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return new


class SignalLibrary:
    """Read-only view of a library directory; signals are memory-mapped on access."""

    def __init__(self, directory):
        self.directory = Path(directory)
        if not (self.directory / MANIFEST).is_file():
            raise FileNotFoundError(self.directory / MANIFEST)
        self.entries = read_manifest(self.directory)["entries"]
        if not self.entries:
            raise ParameterError(f"{self.directory}: empty manifest")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> np.ndarray:
        return read_signal(self.directory / self.entries[i]["file"], mmap=True)

    def spec(self, i) -> WaveformSpec:
        return WaveformSpec.from_dict(self.entries[i]["spec"])

    @property
    def sample_rate(self) -> float:
        return float(self.entries[0].get("sample_rate", SAMPLE_RATE))
