"""Synthetic corpora, toy feature targets and the text file formats.

The paired corpus follows a fixed rule: every text symbol maps to a motif of
three speech tokens, so speech is a deterministic function of text and both
alignment and consistency are learnable at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cfm import UPSAMPLE, FeatureSeq
from .seqlm import Vocabulary

__all__ = [
    "MOTIF_LEN",
    "motif_map",
    "gen_pairs",
    "write_corpus",
    "read_corpus",
    "features_for_tokens",
    "two_moons",
    "write_preference_file",
    "read_preference_file",
]

MOTIF_LEN = 3


def motif_map(vocab: Vocabulary, rng: np.random.Generator) -> dict[int, tuple[int, ...]]:
    """Each text id gets a fixed motif of MOTIF_LEN speech tokens.

    Within each motif position the symbols use distinct tokens (when the
    speech alphabet allows), so no two text symbols collide anywhere.
    """
    columns = []
    for _ in range(MOTIF_LEN):
        if vocab.speech_size >= vocab.text_size:
            col = rng.permutation(vocab.speech_size)[: vocab.text_size]
        else:
            col = rng.integers(0, vocab.speech_size, vocab.text_size)
        columns.append(col)
    return {
        vocab.text_id(i): tuple(int(columns[j][i]) for j in range(MOTIF_LEN))
        for i in range(vocab.text_size)
    }


def speech_for_text(text: list[int], motifs: dict[int, tuple[int, ...]]) -> list[int]:
    out: list[int] = []
    for t in text:
        out.extend(motifs[t])
    return out


def gen_pairs(vocab: Vocabulary, motifs: dict[int, tuple[int, ...]],
              rng: np.random.Generator, n_pairs: int,
              min_len: int = 3, max_len: int = 8) -> list[tuple[list[int], list[int]]]:
    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        text = [vocab.text_id(int(i)) for i in rng.integers(0, vocab.text_size, n)]
        pairs.append((text, speech_for_text(text, motifs)))
    return pairs


def write_corpus(path, pairs) -> None:
    lines = []
    for text, speech in pairs:
        lines.append(
            "TEXT " + " ".join(str(t) for t in text)
            + " | SPEECH " + " ".join(str(s) for s in speech)
        )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_corpus(path) -> list[tuple[list[int], list[int]]]:
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            left, sep, right = line.partition(" | SPEECH")
            if not left.startswith("TEXT") or not sep:
                raise ValueError(f"{path}:{lineno}: malformed corpus line")
            text = [int(t) for t in left[len("TEXT"):].split()]
            speech = [int(s) for s in right.split()]
            pairs.append((text, speech))
    return pairs


def features_for_tokens(tokens: list[int], speaker_v: np.ndarray, n_features: int,
                        rng: np.random.Generator | None = None,
                        noise: float = 0.05, table_seed: int = 977) -> FeatureSeq:
    """Toy acoustic targets: per-token base vectors under a speaker-dependent
    affine map, upsampled by two with a parity offset, plus optional noise."""
    speaker_v = np.asarray(speaker_v, dtype=np.float64)
    gain = 1.0 + 0.1 * float(np.tanh(speaker_v.sum()))
    mix = np.random.default_rng((table_seed, 1)).normal(0.0, 0.2, (speaker_v.size, n_features))
    shift = speaker_v @ mix
    parity = np.random.default_rng((table_seed, 2)).normal(0.0, 0.3, n_features)
    frames = np.empty((UPSAMPLE * len(tokens), n_features))
    for i, tok in enumerate(tokens):
        base = np.random.default_rng((table_seed, 3, int(tok))).normal(0.0, 1.0, n_features)
        for p in range(UPSAMPLE):
            frames[UPSAMPLE * i + p] = gain * base + shift + p * parity
    if rng is not None and noise > 0.0:
        frames += noise * rng.standard_normal(frames.shape)
    return FeatureSeq(frames)


def two_moons(rng: np.random.Generator, n: int, noise: float = 0.08):
    """Balanced two-moons cloud; returns (points [n, 2], moon labels [n])."""
    labels = rng.integers(0, 2, size=n)
    theta = rng.uniform(0.0, np.pi, size=n)
    x = np.where(labels == 0, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(labels == 0, np.sin(theta), 0.5 - np.sin(theta))
    pts = np.stack([x, y], axis=1) + noise * rng.standard_normal((n, 2))
    return pts, labels


# benchmark geometry for the flow-matching sampler: centered, slightly
# enlarged moons with tight arc blobs
MOON_BINS = 32
MOON_NOISE = 0.03
MOON_SCALE = 1.4
_MOON_CENTER = np.array([0.5, 0.25])


def _moon_points(labels, theta):
    x = np.where(labels == 0, np.cos(theta), 1.0 - np.cos(theta))
    y = np.where(labels == 0, np.sin(theta), 0.5 - np.sin(theta))
    return (np.stack([x, y], axis=1) - _MOON_CENTER) * MOON_SCALE


def two_moons_tokens(rng: np.random.Generator, n: int, bins: int = MOON_BINS,
                     noise: float = MOON_NOISE):
    """Two-moons points with fine-grained arc tokens.

    Token = moon * bins + arc bin; theta is uniform so every token is
    equiprobable and the pooled marginal is the plain two-moons cloud.
    """
    labels = rng.integers(0, 2, size=n)
    arc = rng.integers(0, bins, size=n)
    theta = (arc + rng.uniform(0.0, 1.0, size=n)) * (np.pi / bins)
    pts = _moon_points(labels, theta) + noise * rng.standard_normal((n, 2))
    return pts, labels * bins + arc


def moon_frames_for_token(token: int, rng: np.random.Generator, n_frames: int = 2,
                          bins: int = MOON_BINS, noise: float = MOON_NOISE) -> np.ndarray:
    """Independent draws from one arc-token's blob, shape [n_frames, 2]."""
    label, arc = divmod(int(token), bins)
    theta = (arc + rng.uniform(0.0, 1.0, size=n_frames)) * (np.pi / bins)
    labels = np.full(n_frames, label)
    return _moon_points(labels, theta) + noise * rng.standard_normal((n_frames, 2))


@dataclass
class PreferenceRecord:
    context: list[int]
    preferred: list[int]
    rejected: list[int]


def write_preference_file(path, records) -> None:
    lines = []
    for rec in records:
        lines.append(
            "Y " + " ".join(str(t) for t in rec.context)
            + " | W " + " ".join(str(t) for t in rec.preferred)
            + " | L " + " ".join(str(t) for t in rec.rejected)
        )
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_preference_file(path) -> list[PreferenceRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(" | ")
            if len(parts) != 3 or not parts[0].startswith("Y") \
                    or not parts[1].startswith("W") or not parts[2].startswith("L"):
                raise ValueError(f"{path}:{lineno}: malformed preference line")
            records.append(PreferenceRecord(
                [int(t) for t in parts[0][1:].split()],
                [int(t) for t in parts[1][1:].split()],
                [int(t) for t in parts[2][1:].split()],
            ))
    return records
