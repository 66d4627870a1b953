"""Synthetic monosyllable-style utterances with known token boundaries.

Each token is a run of frames around a fixed unit-norm prototype vector plus
i.i.d. Gaussian noise; optional silence runs (noise around zero) may appear
before, between, and after tokens. Ground-truth per-token frame ranges and a
silence mask are kept alongside the features so boundary placement can be
scored later.

Dataset directories contain a dataset.json header (format version, config
echo, split sizes) and one binary record file per split; the byte layout is
documented in the README.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

DATASET_FORMAT_VERSION = 1
SPLIT_MAGIC = b"UMDS"
SPLITS = ("train", "dev", "test")


@dataclass
class SynthConfig:
    vocab: int = 20
    d_in: int = 16
    dur: tuple[int, int] = (8, 20)            # token length range, frames
    silence: tuple[int, int] = (4, 12)        # silence length range, frames
    p_silence: float = 0.3                    # per gap (before/between/after tokens)
    noise_std: float = 0.3
    tokens_range: tuple[int, int] = (3, 12)
    p_repeat: float = 0.1                     # adjacent duplicate probability
    seed: int = 0

    def __post_init__(self):
        self.dur = tuple(self.dur)
        self.silence = tuple(self.silence)
        self.tokens_range = tuple(self.tokens_range)
        for name in ("p_silence", "p_repeat"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.dur[0] < 1 or self.dur[0] > self.dur[1]:
            raise ValueError(f"bad duration range {self.dur}")
        if self.tokens_range[0] < 1 or self.tokens_range[0] > self.tokens_range[1]:
            raise ValueError(f"bad token count range {self.tokens_range}")
        if self.vocab < 2:
            raise ValueError("need at least two tokens in the vocabulary")


@dataclass
class Utterance:
    uid: str
    features: np.ndarray                      # (T, d_in)
    tokens: list[int]
    boundaries: list[tuple[int, int]]         # per token, 1-based inclusive frames
    silence_mask: np.ndarray                  # (T,) bool

    def check(self) -> None:
        T = self.features.shape[0]
        assert len(self.tokens) == len(self.boundaries)
        prev_end = 0
        for start, end in self.boundaries:
            assert 1 <= start <= end <= T
            assert start > prev_end, "boundaries must be ordered and disjoint"
            prev_end = end
        assert self.silence_mask.shape == (T,)


@dataclass
class Dataset:
    config: SynthConfig
    train: list[Utterance] = field(default_factory=list)
    dev: list[Utterance] = field(default_factory=list)
    test: list[Utterance] = field(default_factory=list)

    def split(self, name: str) -> list[Utterance]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}, expected one of {SPLITS}")
        return getattr(self, name)


def make_prototypes(vocab: int, d_in: int, seed: int, max_cos: float = 0.8,
                    max_attempts: int = 1000) -> np.ndarray:
    """Unit-norm token prototypes with pairwise |cosine| below max_cos."""
    if vocab < 2:
        raise ValueError("need at least two prototypes")
    rng = np.random.default_rng(seed)
    rows: list[np.ndarray] = []
    for _ in range(vocab):
        for attempt in range(max_attempts):
            cand = rng.normal(size=d_in)
            cand /= np.linalg.norm(cand)
            if all(abs(float(cand @ r)) < max_cos for r in rows):
                rows.append(cand)
                break
        else:
            raise RuntimeError(
                f"could not place {vocab} prototypes with |cos| < {max_cos} in "
                f"{d_in} dimensions after {max_attempts} attempts; increase d_in"
            )
    return np.stack(rows)


def gen_utterance(cfg: SynthConfig, prototypes: np.ndarray, rng: np.random.Generator,
                  uid: str = "") -> Utterance:
    n_tokens = int(rng.integers(cfg.tokens_range[0], cfg.tokens_range[1] + 1))
    tokens: list[int] = []
    for _ in range(n_tokens):
        if tokens and rng.random() < cfg.p_repeat:
            tokens.append(tokens[-1])
        else:
            tokens.append(int(rng.integers(0, cfg.vocab)))

    pieces: list[np.ndarray] = []
    silence_flags: list[np.ndarray] = []
    boundaries: list[tuple[int, int]] = []
    cursor = 0

    def add_silence() -> None:
        nonlocal cursor
        if rng.random() >= cfg.p_silence:
            return
        n = int(rng.integers(cfg.silence[0], cfg.silence[1] + 1))
        pieces.append(np.zeros((n, cfg.d_in)))
        silence_flags.append(np.ones(n, dtype=bool))
        cursor += n

    add_silence()
    for tok in tokens:
        n = int(rng.integers(cfg.dur[0], cfg.dur[1] + 1))
        pieces.append(np.tile(prototypes[tok], (n, 1)))
        silence_flags.append(np.zeros(n, dtype=bool))
        boundaries.append((cursor + 1, cursor + n))
        cursor += n
        add_silence()

    features = np.concatenate(pieces)
    if cfg.noise_std > 0:
        features = features + rng.normal(scale=cfg.noise_std, size=features.shape)
    return Utterance(
        uid=uid,
        features=features,
        tokens=tokens,
        boundaries=boundaries,
        silence_mask=np.concatenate(silence_flags),
    )


def gen_split(cfg: SynthConfig, n_utterances: int, seed: int | None = None) -> Dataset:
    """Deterministic 80/10/10 partition; utterances use per-index derived seeds."""
    if n_utterances < 3:
        raise ValueError("need at least 3 utterances for three partitions")
    root_seed = cfg.seed if seed is None else seed
    prototypes = make_prototypes(cfg.vocab, cfg.d_in, root_seed)
    child_seeds = np.random.SeedSequence(root_seed).spawn(n_utterances)
    utts = [
        gen_utterance(cfg, prototypes, np.random.default_rng(child_seeds[i]), uid=f"u{i:06d}")
        for i in range(n_utterances)
    ]
    n_train = int(n_utterances * 0.8)
    n_dev = int(n_utterances * 0.1)
    return Dataset(
        config=cfg,
        train=utts[:n_train],
        dev=utts[n_train : n_train + n_dev],
        test=utts[n_train + n_dev :],
    )


def prototypes_for(cfg: SynthConfig, seed: int | None = None) -> np.ndarray:
    return make_prototypes(cfg.vocab, cfg.d_in, cfg.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def _write_utterance(fp, utt: Utterance) -> None:
    uid = utt.uid.encode("utf-8")
    T, D = utt.features.shape
    fp.write(struct.pack("<IIII", len(uid), len(utt.tokens), T, D))
    fp.write(uid)
    fp.write(np.asarray(utt.tokens, dtype="<i4").tobytes())
    bounds = np.asarray(utt.boundaries, dtype="<i4").reshape(-1)
    fp.write(bounds.tobytes())
    fp.write(np.packbits(utt.silence_mask).tobytes())
    fp.write(np.ascontiguousarray(utt.features, dtype="<f8").tobytes())


def _read_utterance(fp) -> Utterance:
    uid_len, n_tokens, T, D = struct.unpack("<IIII", fp.read(16))
    uid = fp.read(uid_len).decode("utf-8")
    tokens = np.frombuffer(fp.read(4 * n_tokens), dtype="<i4").tolist()
    bounds = np.frombuffer(fp.read(8 * n_tokens), dtype="<i4").reshape(n_tokens, 2)
    mask_bytes = (T + 7) // 8
    mask = np.unpackbits(np.frombuffer(fp.read(mask_bytes), dtype=np.uint8))[:T].astype(bool)
    feats = np.frombuffer(fp.read(8 * T * D), dtype="<f8").reshape(T, D).astype(np.float64)
    return Utterance(
        uid=uid,
        features=feats,
        tokens=tokens,
        boundaries=[tuple(b) for b in bounds.tolist()],
        silence_mask=mask,
    )


def save_dataset(out_dir, dataset: Dataset) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "config": asdict(dataset.config),
        "counts": {name: len(dataset.split(name)) for name in SPLITS},
    }
    (out / "dataset.json").write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    for name in SPLITS:
        utts = dataset.split(name)
        with open(out / f"{name}.ums", "wb") as fp:
            fp.write(SPLIT_MAGIC)
            fp.write(struct.pack("<II", DATASET_FORMAT_VERSION, len(utts)))
            for utt in utts:
                _write_utterance(fp, utt)


def load_header(data_dir) -> dict:
    return json.loads((Path(data_dir) / "dataset.json").read_text())


def load_split(data_dir, name: str) -> list[Utterance]:
    if name not in SPLITS:
        raise ValueError(f"unknown split {name!r}")
    with open(Path(data_dir) / f"{name}.ums", "rb") as fp:
        magic = fp.read(4)
        if magic != SPLIT_MAGIC:
            raise ValueError(f"not a split file (magic {magic!r})")
        version, count = struct.unpack("<II", fp.read(8))
        if version != DATASET_FORMAT_VERSION:
            raise ValueError(f"split format version {version}, this build reads {DATASET_FORMAT_VERSION}")
        return [_read_utterance(fp) for _ in range(count)]


def load_dataset(data_dir) -> Dataset:
    header = load_header(data_dir)
    cfg = SynthConfig(**header["config"])
    return Dataset(
        config=cfg,
        **{name: load_split(data_dir, name) for name in SPLITS},
    )


# ---------------------------------------------------------------------------
# learnability calibration
# ---------------------------------------------------------------------------


def oracle_token_accuracy(utts: list[Utterance], prototypes: np.ndarray) -> float:
    """Nearest-prototype per frame, majority vote per true token range.

    A ceiling-style reference classifier that uses the ground-truth
    boundaries; it calibrates that the task is solvable at a given noise
    level, independent of any trained model.
    """
    correct = 0
    total = 0
    for utt in utts:
        scores = utt.features @ prototypes.T  # unit-norm rows: max dot = nearest
        frame_label = scores.argmax(axis=1)
        for tok, (start, end) in zip(utt.tokens, utt.boundaries):
            votes = np.bincount(frame_label[start - 1 : end], minlength=prototypes.shape[0])
            correct += int(votes.argmax() == tok)
            total += 1
    return correct / total if total else 0.0
