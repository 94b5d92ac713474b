"""Synthetic mode-variation sequences, static sequences, mode splits and dataset files.

Each sample is a multichannel sinusoid around a per-sample neutral offset.
The class is carried only by the temporal frequency; the mode of variation is
a fixed transform applied identically to every frame (an additive offset, a
per-channel gain, or an orthogonal mixing of channels), followed by i.i.d.
Gaussian noise. Every sequence starts at its neutral offset, so frame 0
carries the mode but not the class.

The same base signal (identified by its seed) is rendered once under every
mode, so a split that keeps seeds apart keeps "subjects" apart.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fileio import atomic_write

FORMAT_VERSION = 1
MAGIC = b"MVSEQ1"
MODE_KINDS = ("additive_bias", "channel_gain", "linear_transform")
_KIND_ALIASES = {"additive": "additive_bias", "gain": "channel_gain", "linear": "linear_transform",
                 "rotation": "linear_transform"}


class DatasetFormatError(ValueError):
    """Raised when a dataset file pair is corrupt, truncated or of another version."""


@dataclass
class ModeSpec:
    mode_id: int
    kind: str
    payload: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ValueError(f"unknown mode kind {self.kind!r}")
        self.payload = np.asarray(self.payload, dtype=np.float64)
        if self.kind == "linear_transform":
            q = self.payload
            if q.ndim != 2 or q.shape[0] != q.shape[1]:
                raise ValueError(f"mode {self.mode_id}: linear transform must be square, got {q.shape}")
            if np.abs(q.T @ q - np.eye(q.shape[0])).max() >= 1e-9:
                raise ValueError(f"mode {self.mode_id}: linear transform is not orthogonal")
        elif self.payload.ndim != 1:
            raise ValueError(f"mode {self.mode_id}: {self.kind} payload must be a vector")
        if self.kind == "channel_gain" and np.any(self.payload == 0):
            raise ValueError(f"mode {self.mode_id}: zero channel gain is not invertible")

    @property
    def dim(self):
        return self.payload.shape[0]

    def apply(self, frames):
        if self.kind == "additive_bias":
            return frames + self.payload
        if self.kind == "channel_gain":
            return frames * self.payload
        return frames @ self.payload.T

    def invert(self, frames):
        if self.kind == "additive_bias":
            return frames - self.payload
        if self.kind == "channel_gain":
            return frames / self.payload
        return frames @ self.payload

    def to_dict(self):
        return {"mode_id": self.mode_id, "name": self.name, "kind": self.kind,
                "payload": self.payload.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["mode_id"]), d["kind"], np.array(d["payload"], dtype=np.float64), d.get("name", ""))


@dataclass
class GeneratorConfig:
    input_dim: int = 16
    length: int = 24
    num_classes: int = 6
    noise: float = 0.05
    per_cell: int = 40                 # samples per (class, mode)
    modes: tuple = ("identity", "additive", "gain", "linear")
    amplitude: tuple = (0.5, 1.0)      # per-channel amplitude magnitude range
    direction_jitter: float = 0.2      # per-sample deviation from the class pattern
    neutral_scale: float = 0.5         # spread of the shared neutral offset
    subject_scale: float = 0.5         # per-sample deviation from it
    bias_scale: float = 0.6            # std of additive mode offsets
    gain_range: tuple = (0.75, 1.6)

    def validate(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.length < 4:
            raise ValueError(f"sequence length must be >= 4, got {self.length}")
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.per_cell < 1:
            raise ValueError(f"per_cell must be >= 1, got {self.per_cell}")
        if not self.modes:
            raise ValueError("at least one mode is required")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if 2 * self.num_classes >= self.length:
            raise ValueError(f"{self.num_classes} classes need distinct frequencies below Nyquist for length {self.length}")

    def to_dict(self):
        d = asdict(self)
        d["modes"] = list(self.modes)
        d["amplitude"] = list(self.amplitude)
        d["gain_range"] = list(self.gain_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("modes", "amplitude", "gain_range"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


def parse_modes(text):
    """Expand ``"identity,additive:2,gain"`` into a tuple of mode kind tokens."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        kind, _, count = part.partition(":")
        kind = kind.strip()
        if kind != "identity" and kind not in _KIND_ALIASES and kind not in MODE_KINDS:
            raise ValueError(f"unknown mode kind {kind!r}")
        n = int(count) if count else 1
        if n < 1:
            raise ValueError(f"mode count must be >= 1 in {part!r}")
        out.extend([kind] * n)
    if not out:
        raise ValueError("empty mode list")
    return tuple(out)


def build_modes(config, seed):
    """Mode specs for ``config.modes``, payloads drawn from the master seed."""
    specs = []
    D = config.input_dim
    for idx, token in enumerate(config.modes):
        rng = np.random.default_rng([seed, 1, idx])
        if token == "identity":
            specs.append(ModeSpec(idx, "additive_bias", np.zeros(D), "identity"))
            continue
        kind = _KIND_ALIASES.get(token, token)
        if kind == "additive_bias":
            payload = rng.normal(0.0, config.bias_scale, D)
        elif kind == "channel_gain":
            payload = rng.uniform(config.gain_range[0], config.gain_range[1], D)
        else:
            q, r = np.linalg.qr(rng.normal(size=(D, D)))
            payload = q * np.sign(np.diag(r))
        specs.append(ModeSpec(idx, kind, payload, f"{kind}_{idx}"))
    return specs


@dataclass
class SequenceSample:
    frames: np.ndarray        # (T, D_x)
    label: int
    mode_id: int
    seed: int                 # base-signal seed, shared by the renders of one subject
    frequency: float = 0.0    # cycles per frame
    phase: float = 0.0
    index: int = 0

    @property
    def length(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass
class DatasetManifest:
    config: GeneratorConfig
    modes: list
    counts: dict              # (label, mode_id) -> count
    seed: int
    format_version: int = FORMAT_VERSION
    checksum: str = ""

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "modes": [m.to_dict() for m in self.modes],
            "counts": [[k[0], k[1], v] for k, v in sorted(self.counts.items())],
            "total": int(sum(self.counts.values())),
            "frames_checksum": self.checksum,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            config=GeneratorConfig.from_dict(d["config"]),
            modes=[ModeSpec.from_dict(m) for m in d["modes"]],
            counts={(int(a), int(b)): int(c) for a, b, c in d["counts"]},
            seed=int(d["seed"]),
            format_version=int(d["format_version"]),
            checksum=d.get("frames_checksum", ""),
        )


def class_frequency(label, length):
    return (label + 1) / length


def base_seed(master_seed, label, j):
    """Seed of the j-th subject of a class; independent of mode and of generation order."""
    ss = np.random.SeedSequence([master_seed, 2, label, j])
    return int(ss.generate_state(1, np.uint64)[0])


def neutral_offset(config, master_seed):
    rng = np.random.default_rng([master_seed, 3])
    return rng.uniform(-config.neutral_scale, config.neutral_scale, config.input_dim)


def class_directions(config, master_seed):
    """Per-class channel amplitude pattern, shape (C, D_x)."""
    rng = np.random.default_rng([master_seed, 5])
    lo, hi = config.amplitude
    C, D = config.num_classes, config.input_dim
    return rng.uniform(lo, hi, (C, D)) * rng.choice([-1.0, 1.0], (C, D))


def clean_signal(config, label, seed, neutral, directions):
    """Mode-free, noise-free frames of one subject: (T, D_x)."""
    rng = np.random.default_rng(seed)
    D, T = config.input_dim, config.length
    amp = directions[label] * rng.uniform(0.7, 1.0) + rng.normal(0.0, config.direction_jitter, D)
    offset = neutral + rng.normal(0.0, config.subject_scale, D)
    t = np.arange(T)[:, None]
    return offset + amp * np.sin(2.0 * np.pi * class_frequency(label, T) * t)


def render(config, label, seed, mode, neutral, directions, noise=None, replicate=0):
    """Frames of subject ``seed`` of class ``label`` seen through ``mode``.

    ``replicate`` selects an independent noise draw; 0 is the one stored in
    generated datasets.
    """
    sigma = config.noise if noise is None else noise
    frames = mode.apply(clean_signal(config, label, seed, neutral, directions))
    if sigma > 0:
        key = [seed, 4, mode.mode_id] + ([replicate] if replicate else [])
        rng = np.random.default_rng(key)
        frames = frames + rng.normal(0.0, sigma, frames.shape)
    return frames


def generate_dataset(config=None, seed=0):
    """Generate ``per_cell`` samples for every (class, mode) pair.

    Returns ``(samples, manifest)``. Ordering is mode-major, then class, then
    subject index; each sample depends only on its own derived seeds.
    """
    config = config or GeneratorConfig()
    config.validate()
    modes = build_modes(config, seed)
    neutral = neutral_offset(config, seed)
    directions = class_directions(config, seed)
    samples = []
    counts = {}
    for mode in modes:
        for label in range(config.num_classes):
            for j in range(config.per_cell):
                s = base_seed(seed, label, j)
                frames = render(config, label, s, mode, neutral, directions)
                samples.append(SequenceSample(frames, label, mode.mode_id, s,
                                              class_frequency(label, config.length), 0.0, len(samples)))
                counts[(label, mode.mode_id)] = counts.get((label, mode.mode_id), 0) + 1
    return samples, DatasetManifest(config, modes, counts, seed)


def rerender(sample, manifest, mode_id=None, replicate=0, noise=None):
    """Render the subject of ``sample`` again, optionally under another mode or noise draw."""
    mode_id = sample.mode_id if mode_id is None else mode_id
    modes = {m.mode_id: m for m in manifest.modes}
    if mode_id not in modes:
        raise ValueError(f"unknown mode {mode_id}")
    cfg = manifest.config
    frames = render(cfg, sample.label, sample.seed, modes[mode_id], neutral_offset(cfg, manifest.seed),
                    class_directions(cfg, manifest.seed), noise=noise, replicate=replicate)
    return SequenceSample(frames, sample.label, mode_id, sample.seed, sample.frequency, sample.phase, -1)


def make_static_sequence(sample, tau=0, length=30):
    """``length`` copies of frame ``tau`` of the sample, shape (length, D_x)."""
    frames = sample.frames if isinstance(sample, SequenceSample) else np.asarray(sample)
    if not 0 <= tau < frames.shape[0]:
        raise ValueError(f"tau={tau} outside sequence of length {frames.shape[0]}")
    if length < 1:
        raise ValueError(f"static sequence length must be >= 1, got {length}")
    return np.repeat(frames[tau][None, :], length, axis=0)


@dataclass
class Split:
    train: list
    seen_test: list
    unseen_test: dict                       # mode_id -> samples
    empty_unseen: list = field(default_factory=list)


def fold_of(samples, n_folds):
    """Fold index per base seed, assigned round-robin within each class."""
    per_class = {}
    folds = {}
    for s in samples:
        if s.seed in folds:
            continue
        j = per_class.get(s.label, 0)
        folds[s.seed] = j % n_folds
        per_class[s.label] = j + 1
    return folds


def split_by_mode(samples, seen_modes, unseen_modes, n_folds=10, fold=0):
    """Train on seen modes, test on every mode, never sharing a base-signal seed.

    Base seeds are assigned to ``n_folds`` folds; seeds of ``fold`` form the
    test side, all others the train side. Unseen modes with no samples are
    listed in ``Split.empty_unseen``.
    """
    seen, unseen = set(seen_modes), set(unseen_modes)
    if not seen or not unseen:
        raise ValueError("seen and unseen mode sets must both be non-empty")
    if seen & unseen:
        raise ValueError(f"modes {sorted(seen & unseen)} are both seen and unseen")
    if n_folds < 2 or not 0 <= fold < n_folds:
        raise ValueError(f"invalid fold {fold} of {n_folds}")
    folds = fold_of(samples, n_folds)
    train, seen_test = [], []
    unseen_test = {m: [] for m in sorted(unseen)}
    for s in samples:
        is_test = folds[s.seed] == fold
        if s.mode_id in seen:
            (seen_test if is_test else train).append(s)
        elif s.mode_id in unseen and is_test:
            unseen_test[s.mode_id].append(s)
    if not train:
        raise ValueError("training partition is empty")
    if not seen_test:
        raise ValueError("seen-mode test partition is empty")
    empty = [m for m, v in unseen_test.items() if not v]
    return Split(train, seen_test, unseen_test, empty)


def _checksum(payload):
    return hashlib.blake2b(payload, digest_size=8).digest()


def encode_frames(samples):
    parts = [MAGIC, struct.pack("<I", len(samples))]
    for s in samples:
        T, D = s.frames.shape
        parts.append(struct.pack("<IIIIQ", T, D, s.label, s.mode_id, s.seed))
        parts.append(np.ascontiguousarray(s.frames, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


def decode_frames(blob):
    if len(blob) < len(MAGIC) + 4 + 8:
        raise DatasetFormatError("frames file is truncated")
    if blob[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError(f"bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    body, check = blob[:-8], blob[-8:]
    if _checksum(body) != check:
        raise DatasetFormatError("frames checksum mismatch")
    (count,) = struct.unpack_from("<I", body, len(MAGIC))
    pos = len(MAGIC) + 4
    samples = []
    for idx in range(count):
        if pos + 24 > len(body):
            raise DatasetFormatError(f"truncated header of sample {idx}")
        T, D, label, mode_id, seed = struct.unpack_from("<IIIIQ", body, pos)
        pos += 24
        n = T * D * 8
        if pos + n > len(body):
            raise DatasetFormatError(f"truncated frames of sample {idx}")
        frames = np.frombuffer(body, dtype="<f8", count=T * D, offset=pos).reshape(T, D).astype(np.float64)
        pos += n
        samples.append(SequenceSample(frames, label, mode_id, seed, class_frequency(label, T), 0.0, idx))
    if pos != len(body):
        raise DatasetFormatError(f"{len(body) - pos} trailing bytes after {count} samples")
    return samples


def dataset_paths(stem):
    stem = str(stem)
    for ext in (".manifest", ".frames"):
        if stem.endswith(ext):
            stem = stem[: -len(ext)]
    return Path(stem + ".manifest"), Path(stem + ".frames")


def save_dataset(stem, samples, manifest):
    """Write ``<stem>.manifest`` (JSON text) and ``<stem>.frames`` (binary)."""
    mpath, fpath = dataset_paths(stem)
    blob = encode_frames(samples)
    manifest.checksum = blob[-8:].hex()
    atomic_write(fpath, blob)
    atomic_write(mpath, json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return mpath, fpath


def load_dataset(stem):
    mpath, fpath = dataset_paths(stem)
    try:
        doc = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{mpath}: manifest is not valid JSON ({exc})") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"{mpath}: format version {doc.get('format_version')!r}, expected {FORMAT_VERSION}")
    manifest = DatasetManifest.from_dict(doc)
    blob = fpath.read_bytes()
    if manifest.checksum and blob[-8:].hex() != manifest.checksum:
        raise DatasetFormatError(f"{fpath}: checksum does not match the manifest")
    samples = decode_frames(blob)
    counts = {}
    for s in samples:
        counts[(s.label, s.mode_id)] = counts.get((s.label, s.mode_id), 0) + 1
    if counts != manifest.counts:
        raise DatasetFormatError(f"{fpath}: sample counts disagree with the manifest")
    return samples, manifest
