"""Feature-matrix file format, dataset manifests and the synthetic corpus.

Feature files («VTTF») are bit-exact: 4-byte magic, three u32 LE header
fields (version=1, T, D), then T*D float32 LE values row-major.  Manifests
are JSON lines with fields id / frame_file / audio_file (nullable) /
captions; file paths are stored relative to the manifest's directory.

The synthetic generator replaces real video datasets at desk scale: each
clip mixes one or two latent concepts, frame rows are noisy concept
embeddings, audio rows (when present) come from a concept-linked audio
embedding, and captions are fixed templates over the concept names.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError, FormatError
from .tensor import RngState

MAGIC = b"VTTF"
VERSION = 1
NOISE_SCALE = 0.1  # noise sigma as a fraction of the concept embedding norm

CONCEPT_NAMES = [
    "dog", "cat", "car", "bird", "boat", "tree", "fish", "horse",
    "train", "kite", "drum", "frog", "lamp", "bell", "ship", "bear",
]

# Caption templates; every video gets all templates for its concept draw,
# so two videos with the same draw share the same caption set.
_ONE_CONCEPT = [
    "a {a} in the video",
    "the {a} is moving around",
    "we can see a {a}",
]
_TWO_CONCEPT = [
    "a {a} and a {b} in the video",
    "the {a} is near the {b}",
    "we can see a {a} with a {b}",
]


@dataclass
class FeatureMatrix:
    """T x D float32 matrix of per-timestep features."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ContractError(f"feature matrix must be T x D with T,D >= 1, "
                                f"got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise DataError("feature matrix contains non-finite values")

    @property
    def t(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass
class VideoSample:
    """One clip: frame features, optional audio features, reference captions."""

    id: str
    frames: FeatureMatrix
    audio: FeatureMatrix | None
    captions: list

    def __post_init__(self):
        if not self.captions:
            raise ContractError(f"video {self.id!r} has no captions")


@dataclass
class ManifestEntry:
    id: str
    frame_file: str
    audio_file: str | None
    captions: list


@dataclass
class DatasetManifest:
    """Entries of one split; ``root`` anchors the relative file paths."""

    entries: list
    split: str
    root: Path

    def __len__(self):
        return len(self.entries)

    def load_samples(self) -> list:
        samples = []
        for e in self.entries:
            frames = read_feature_file(self.root / e.frame_file)
            audio = read_feature_file(self.root / e.audio_file) if e.audio_file else None
            samples.append(VideoSample(e.id, frames, audio, list(e.captions)))
        return samples

    def reference_sets(self) -> list:
        return [list(e.captions) for e in self.entries]


def write_feature_file(path, m: FeatureMatrix) -> None:
    payload = np.ascontiguousarray(m.values, dtype="<f4").tobytes()
    header = MAGIC + struct.pack("<III", VERSION, m.t, m.d)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_feature_file(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, t, d = struct.unpack("<III", blob[4:16])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 16 + 4 * t * d
    if len(blob) != expected:
        raise FormatError(f"{path}: payload length {len(blob) - 16} bytes, "
                          f"expected {4 * t * d} for {t}x{d}")
    values = np.frombuffer(blob, dtype="<f4", offset=16).reshape(t, d)
    if not np.isfinite(values).all():
        raise DataError(f"{path}: non-finite feature values")
    return FeatureMatrix(values.copy())


def dummy_audio(t: int, d_audio: int) -> FeatureMatrix:
    """All-zero stand-in rows for clips without an audio stream."""
    if t < 1:
        raise ContractError("dummy_audio needs t >= 1")
    return FeatureMatrix(np.zeros((t, d_audio), dtype=np.float32))


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write(json.dumps({"id": e.id, "frame_file": e.frame_file,
                                 "audio_file": e.audio_file,
                                 "captions": e.captions}) + "\n")


def load_manifest(path, split: str | None = None) -> DatasetManifest:
    """Parse a JSON-lines manifest and check that referenced files exist."""
    path = Path(path)
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            missing = {"id", "frame_file", "audio_file", "captions"} - obj.keys()
            if missing:
                raise FormatError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            if obj["id"] in seen:
                raise FormatError(f"{path}:{lineno}: duplicate id {obj['id']!r}")
            seen.add(obj["id"])
            entries.append(ManifestEntry(obj["id"], obj["frame_file"],
                                         obj["audio_file"], list(obj["captions"])))
    root = path.parent
    for e in entries:
        for rel in (e.frame_file, e.audio_file):
            if rel and not (root / rel).exists():
                raise FormatError(f"{path}: referenced file {rel!r} does not exist")
    return DatasetManifest(entries, split or path.stem, root)


def captions_for(concepts) -> list:
    names = [CONCEPT_NAMES[c] for c in concepts]
    if len(names) == 1:
        return [t.format(a=names[0]) for t in _ONE_CONCEPT]
    return [t.format(a=names[0], b=names[1]) for t in _TWO_CONCEPT]


def synth_dataset(seed: int, n_videos: int, n_concepts: int, d_vision: int,
                  d_audio: int, out_dir) -> tuple:
    """Generate a deterministic synthetic corpus under ``out_dir``.

    Returns (train, val) manifests with a 90/10 split.  Everything --
    concept draws, noise, audio presence, captions -- is a pure function of
    the seed, so two runs produce byte-identical files.
    """
    if n_concepts < 2:
        raise ContractError("need at least 2 concepts")
    if n_concepts > len(CONCEPT_NAMES):
        raise ContractError(f"at most {len(CONCEPT_NAMES)} concepts supported")
    if n_videos < 10:
        raise ContractError("need at least 10 videos for a 90/10 split")

    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)

    rng = RngState(seed).derive("synth")
    vision_embed = rng.normal((n_concepts, d_vision), std=1.0)
    audio_embed = rng.normal((n_concepts, d_audio), std=1.0)

    entries = []
    for i in range(n_videos):
        vid = f"vid_{i:04d}"
        k = 1 if rng.random() < 0.5 else 2
        concepts = [int(rng.random() * n_concepts)]
        if k == 2:
            second = int(rng.random() * (n_concepts - 1))
            if second >= concepts[0]:
                second += 1
            concepts.append(second)

        t_v = 4 + int(rng.random() * 5)  # 4..8 frame rows
        rows = []
        for t in range(t_v):
            c = concepts[t % len(concepts)]
            base = vision_embed[c]
            rows.append(base + rng.normal((d_vision,),
                                          std=NOISE_SCALE * float(np.linalg.norm(base))))
        frames = FeatureMatrix(np.stack(rows))
        frame_rel = f"features/{vid}_frames.vttf"
        write_feature_file(out_dir / frame_rel, frames)

        has_audio = rng.random() < 0.7
        audio_rel = None
        if has_audio:
            t_a = 1 + int(rng.random() * 3)  # 1..3 audio rows
            base = audio_embed[concepts[0]]
            arows = [base + rng.normal((d_audio,),
                                       std=NOISE_SCALE * float(np.linalg.norm(base)))
                     for _ in range(t_a)]
            audio_rel = f"features/{vid}_audio.vttf"
            write_feature_file(out_dir / audio_rel, FeatureMatrix(np.stack(arows)))

        entries.append(ManifestEntry(vid, frame_rel, audio_rel, captions_for(concepts)))

    n_val = max(1, round(n_videos * 0.1))
    train = DatasetManifest(entries[:-n_val], "train", out_dir)
    val = DatasetManifest(entries[-n_val:], "val", out_dir)
    save_manifest(train, out_dir / "train.jsonl")
    save_manifest(val, out_dir / "val.jsonl")
    return train, val
