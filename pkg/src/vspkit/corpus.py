"""Synthetic viseme corpora with constructed homophenes.

A sentence is rendered phoneme by phoneme: every phoneme holds its viseme
prototype for a few frames (plus Gaussian noise), so words whose phonemes
fall into the same viseme classes produce indistinguishable features.  Only
sentence context can tell such homophenes apart.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._io import atomic_write_text, decode_f32, encode_f32

CORPUS_VERSION = 1

# ARPAbet-style phonemes grouped into 13 lip-shape classes.
VISEME_CLASSES: tuple[tuple[str, ...], ...] = (
    ("p", "b", "m"),
    ("f", "v"),
    ("th", "dh"),
    ("t", "d", "n", "l"),
    ("k", "g", "ng", "hh"),
    ("s", "z"),
    ("sh", "zh", "ch", "jh"),
    ("r", "w", "er"),
    ("aa", "ah", "ax", "ay", "aw"),
    ("ae", "eh", "ey"),
    ("iy", "ih", "y"),
    ("ao", "ow", "oy"),
    ("uw", "uh"),
)

DEFAULT_LANGUAGES = ("Spanish", "French", "Italian", "Portuguese")
REORDER_RULES = ("identity", "swap_pairs", "reverse")
_DEFAULT_RULES = {"Spanish": "identity", "French": "swap_pairs", "Italian": "reverse", "Portuguese": "identity"}


class UnknownWordError(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"word {self.word!r} is not in the lexicon"


class CorpusFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    frames: np.ndarray
    frame_rate_hz: float = 25.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"frames must be a non-empty T x D matrix, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite values")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame_rate_hz must be positive")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return len(self) / self.frame_rate_hz

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.frame_rate_hz == other.frame_rate_hz
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )


@dataclass
class VisemeSpec:
    phoneme_set: list[str]
    viseme_map: dict[str, int]
    prototypes: np.ndarray
    hold_frames: tuple[int, int] = (2, 4)
    noise_sigma: float = 0.05
    blend_frames: int = 0
    frame_rate_hz: float = 25.0

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.hold_frames = tuple(int(h) for h in self.hold_frames)
        missing = [p for p in self.phoneme_set if p not in self.viseme_map]
        if missing:
            raise ValueError(f"phonemes without a viseme: {missing}")
        n_vis = self.prototypes.shape[0]
        if sorted(set(self.viseme_map.values())) != list(range(n_vis)):
            raise ValueError("viseme_map must be onto 0..V-1 where V is the number of prototypes")
        if n_vis >= len(self.phoneme_set):
            raise ValueError("need fewer visemes than phonemes")
        h_min, h_max = self.hold_frames
        if h_min < 1 or h_max < h_min:
            raise ValueError(f"invalid hold range {self.hold_frames}")
        if self.noise_sigma < 0 or self.blend_frames < 0 or self.frame_rate_hz <= 0:
            raise ValueError("noise_sigma and blend_frames must be nonnegative, frame_rate_hz positive")
        if n_vis > 1 and min_pairwise_distance(self.prototypes) <= 6 * self.noise_sigma:
            raise ValueError("prototypes too close for the noise level (need min distance > 6 sigma)")

    @property
    def n_visemes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d_vis(self) -> int:
        return self.prototypes.shape[1]

    def visemes_of(self, phonemes: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.viseme_map[p] for p in phonemes)

    @classmethod
    def default(
        cls,
        d_vis: int = 24,
        noise_sigma: float = 0.05,
        hold_frames: tuple[int, int] = (2, 4),
        blend_frames: int = 0,
        frame_rate_hz: float = 25.0,
        seed: int = 0,
        min_distance: float = 0.8,
    ) -> "VisemeSpec":
        phonemes = [p for group in VISEME_CLASSES for p in group]
        vmap = {p: v for v, group in enumerate(VISEME_CLASSES) for p in group}
        protos = sample_prototypes(len(VISEME_CLASSES), d_vis, min_distance, seed)
        return cls(phonemes, vmap, protos, hold_frames, noise_sigma, blend_frames, frame_rate_hz)


def min_pairwise_distance(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    return float(dist.min())


def sample_prototypes(n: int, dim: int, min_distance: float, seed: int, max_tries: int = 100_000) -> np.ndarray:
    """Unit-sphere points drawn one at a time, rejecting any closer than ``min_distance``."""
    rng = np.random.default_rng(seed)
    chosen: list[np.ndarray] = []
    for _ in range(max_tries):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(np.linalg.norm(v - c) >= min_distance for c in chosen):
            chosen.append(v)
            if len(chosen) == n:
                return np.stack(chosen)
    raise RuntimeError(f"could not place {n} prototypes at distance {min_distance} in {dim} dims")


def reorder(words: Sequence[str], rule: str) -> list[str]:
    words = list(words)
    if rule == "identity":
        return words
    if rule == "reverse":
        return words[::-1]
    if rule == "swap_pairs":
        out = list(words)
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    raise ValueError(f"unknown reordering rule {rule!r}; expected one of {REORDER_RULES}")


@dataclass
class Translation:
    dictionary: dict[str, str]
    rule: str = "identity"

    def __post_init__(self):
        if self.rule not in REORDER_RULES:
            raise ValueError(f"unknown reordering rule {self.rule!r}")

    def apply(self, words: Sequence[str]) -> list[str]:
        try:
            mapped = [self.dictionary[w] for w in words]
        except KeyError as exc:
            raise UnknownWordError(exc.args[0]) from None
        return reorder(mapped, self.rule)


@dataclass
class Lexicon:
    words: dict[str, tuple[str, ...]]
    homophene_pairs: list[tuple[str, str]]
    translations: dict[str, Translation]
    categories: dict[str, list[str]] = field(default_factory=dict)

    @property
    def languages(self) -> list[str]:
        return list(self.translations)

    def phonemes(self, word: str) -> tuple[str, ...]:
        try:
            return self.words[word]
        except KeyError:
            raise UnknownWordError(word) from None

    def homophene_words(self) -> set[str]:
        return {w for pair in self.homophene_pairs for w in pair}

    def validate(self, spec: VisemeSpec) -> None:
        for word, phones in self.words.items():
            if not phones:
                raise ValueError(f"word {word!r} has no phonemes")
            unknown = [p for p in phones if p not in spec.viseme_map]
            if unknown:
                raise ValueError(f"word {word!r} uses unknown phonemes {unknown}")
        for a, b in self.homophene_pairs:
            if a == b:
                raise ValueError(f"homophene pair ({a!r}, {b!r}) repeats a word")
            if spec.visemes_of(self.phonemes(a)) != spec.visemes_of(self.phonemes(b)):
                raise ValueError(f"({a!r}, {b!r}) do not share a viseme sequence")
        for lang, tr in self.translations.items():
            missing = sorted(set(self.words) - set(tr.dictionary))
            if missing:
                raise ValueError(f"{lang} lacks translations for {missing[:5]}")
        for cat, members in self.categories.items():
            for w in members:
                self.phonemes(w)


@dataclass(eq=False)
class Sample:
    id: str
    features: FeatureSequence
    transcript: tuple[str, ...]
    translations: dict[str, tuple[str, ...]]
    word_ends: tuple[int, ...] = ()

    def __post_init__(self):
        self.transcript = tuple(self.transcript)
        self.translations = {k: tuple(v) for k, v in self.translations.items()}
        self.word_ends = tuple(int(e) for e in self.word_ends)
        if not self.transcript:
            raise ValueError(f"sample {self.id!r} has an empty transcript")
        if self.word_ends and len(self.word_ends) != len(self.transcript):
            raise ValueError("word_ends must align with the transcript")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.features == other.features
            and self.transcript == other.transcript
            and self.translations == other.translations
            and self.word_ends == other.word_ends
        )

    def word_span(self, index: int) -> tuple[int, int]:
        start = self.word_ends[index - 1] if index else 0
        return start, self.word_ends[index]


def _render(transcript: Sequence[str], spec: VisemeSpec, lexicon: Lexicon, seed: int):
    phones: list[str] = []
    word_last_phone: list[int] = []
    for word in transcript:
        phones.extend(lexicon.phonemes(word))
        word_last_phone.append(len(phones) - 1)
    if not phones:
        raise ValueError("cannot render an empty transcript")
    rng = np.random.default_rng(seed)
    h_min, h_max = spec.hold_frames
    holds = rng.integers(h_min, h_max + 1, size=len(phones))
    visemes = spec.visemes_of(phones)
    blend = spec.blend_frames

    rows: list[np.ndarray] = []
    phone_end: list[int] = []
    for i, (v, h) in enumerate(zip(visemes, holds)):
        if i and blend:
            prev, cur = spec.prototypes[visemes[i - 1]], spec.prototypes[v]
            for j in range(blend):
                w = (j + 1) / (blend + 1)
                rows.append((1 - w) * prev + w * cur)
        rows.extend([spec.prototypes[v]] * int(h))
        phone_end.append(len(rows))
    clean = np.stack(rows)
    noisy = clean + spec.noise_sigma * rng.standard_normal(clean.shape)
    word_ends = [phone_end[i] for i in word_last_phone]
    word_ends[-1] = len(rows)
    return noisy.astype(np.float32), tuple(word_ends)


def render(transcript: Sequence[str], spec: VisemeSpec, lexicon: Lexicon, seed: int) -> FeatureSequence:
    """Features for ``transcript``: per-phoneme prototype holds plus noise, deterministic in ``seed``."""
    frames, _ = _render(transcript, spec, lexicon, seed)
    return FeatureSequence(frames, spec.frame_rate_hz)


_SLOT = re.compile(r"^<(\w+)>$")


def _check_templates(templates: Sequence[str], lexicon: Lexicon) -> None:
    if not templates:
        raise ValueError("no sentence templates given")
    forced: set[str] = set()
    for template in templates:
        for tok in template.split():
            m = _SLOT.match(tok)
            if m:
                if m.group(1) not in lexicon.categories:
                    raise UnknownWordError(f"<{m.group(1)}>")
            else:
                lexicon.phonemes(tok)
                forced.add(tok)
    for a, b in lexicon.homophene_pairs:
        if a not in forced and b not in forced:
            raise ValueError(f"no template places a member of homophene pair ({a}, {b}) in context")


def fill_template(template: str, lexicon: Lexicon, rng: np.random.Generator) -> list[str]:
    words = []
    for tok in template.split():
        m = _SLOT.match(tok)
        if m:
            options = lexicon.categories[m.group(1)]
            words.append(options[int(rng.integers(len(options)))])
        else:
            words.append(tok)
    return words


def generate_corpus(
    spec: VisemeSpec,
    lexicon: Lexicon,
    n_sentences: int,
    sentence_templates: Sequence[str],
    seed: int,
    id_prefix: str = "s",
) -> list[Sample]:
    if n_sentences < 1:
        raise ValueError(f"n_sentences must be >= 1, got {n_sentences}")
    _check_templates(sentence_templates, lexicon)
    samples = []
    width = len(str(n_sentences - 1))
    for index in range(n_sentences):
        rng = np.random.default_rng([seed, index])
        template = sentence_templates[int(rng.integers(len(sentence_templates)))]
        transcript = fill_template(template, lexicon, rng)
        render_seed = int(rng.integers(2**63 - 1))
        frames, word_ends = _render(transcript, spec, lexicon, render_seed)
        translations = {lang: tuple(tr.apply(transcript)) for lang, tr in lexicon.translations.items()}
        samples.append(
            Sample(
                id=f"{id_prefix}{index:0{width}d}",
                features=FeatureSequence(frames, spec.frame_rate_hz),
                transcript=tuple(transcript),
                translations=translations,
                word_ends=word_ends,
            )
        )
    return samples


def text_sentences(lexicon: Lexicon, templates: Sequence[str], n: int, seed: int) -> list[list[str]]:
    """Transcripts only, without rendering (used for text-only LM pretraining)."""
    _check_templates(templates, lexicon)
    out = []
    for index in range(n):
        rng = np.random.default_rng([seed, index])
        out.append(fill_template(templates[int(rng.integers(len(templates)))], lexicon, rng))
    return out


# ---------------------------------------------------------------- file format


def corpus_to_text(samples: Sequence[Sample], d_vis: int | None = None, languages: Sequence[str] | None = None,
                   frame_rate_hz: float | None = None) -> str:
    if samples:
        d_vis = samples[0].features.dim if d_vis is None else d_vis
        frame_rate_hz = samples[0].features.frame_rate_hz if frame_rate_hz is None else frame_rate_hz
        languages = list(samples[0].translations) if languages is None else list(languages)
    header = {
        "version": CORPUS_VERSION,
        "d_vis": int(d_vis or 0),
        "frame_rate_hz": float(frame_rate_hz or 25.0),
        "languages": list(languages or []),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for s in samples:
        if s.features.dim != header["d_vis"]:
            raise ValueError(f"sample {s.id} has dim {s.features.dim}, header says {header['d_vis']}")
        record = {
            "id": s.id,
            "transcript": list(s.transcript),
            "translations": {k: list(v) for k, v in s.translations.items()},
            "n_frames": len(s.features),
            "word_ends": list(s.word_ends),
            "frames": encode_f32(s.features.frames),
        }
        lines.append(json.dumps(record, sort_keys=True))
    return "\n".join(lines) + "\n"


def write_corpus(samples: Sequence[Sample], path, **header) -> None:
    atomic_write_text(path, corpus_to_text(samples, **header))


def read_corpus_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return _parse_header(fh.readline(), 1)


def _parse_header(line: str, lineno: int) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(lineno, f"header is not JSON ({exc.msg})") from None
    if not isinstance(header, dict) or not {"version", "d_vis", "frame_rate_hz", "languages"} <= header.keys():
        raise CorpusFormatError(lineno, "header must hold version, d_vis, frame_rate_hz, languages")
    if header["version"] != CORPUS_VERSION:
        raise CorpusFormatError(lineno, f"unsupported corpus version {header['version']}")
    return header


def read_corpus(path) -> list[Sample]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise CorpusFormatError(1, "missing header")
    header = _parse_header(lines[0], 1)
    d_vis, rate = header["d_vis"], header["frame_rate_hz"]
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            frames = decode_f32(rec["frames"], (rec["n_frames"], d_vis))
            samples.append(
                Sample(
                    id=rec["id"],
                    features=FeatureSequence(frames, rate),
                    transcript=tuple(rec["transcript"]),
                    translations={k: tuple(v) for k, v in rec["translations"].items()},
                    word_ends=tuple(rec.get("word_ends", ())),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(lineno, f"malformed record ({type(exc).__name__}: {exc})") from None
    return samples


# ----------------------------------------------------------- default lexicon

# Seven homophene pairs; every other word has a unique viseme sequence.
_WORDS: Mapping[str, str] = {
    "bat": "b ae t", "mat": "m ae t",
    "fan": "f ae n", "van": "v ae n",
    "bill": "b ih l", "pill": "p ih l",
    "bear": "b eh r", "pear": "p eh r",
    "sue": "s uw", "zoo": "z uw",
    "cold": "k ow l d", "gold": "g ow l d",
    "ship": "sh ih p", "chip": "ch ih p",
    "the": "dh ah", "a": "ah", "flies": "f l ay z", "at": "ae t",
    "night": "n ay t", "cat": "k ae t", "sat": "s ae t", "on": "aa n",
    "turned": "t er n d", "drove": "d r ow v", "doctor": "d aa k t er",
    "gave": "g ey v", "got": "g aa t", "eats": "iy t s", "fish": "f ih sh",
    "ripe": "r ay p", "went": "w eh n t", "to": "t uw", "will": "w ih l",
    "wore": "w ao r", "ring": "r ih ng", "of": "ah v", "water": "w ao t er",
    "was": "w ah z", "very": "v eh r iy", "sails": "s ey l z", "sea": "s iy",
    "big": "b ih g", "old": "ow l d", "red": "r eh d", "small": "s m ao l",
    "green": "g r iy n", "nice": "n ay s",
    "tom": "t aa m", "anna": "ae n ah", "lisa": "l iy s ah", "joe": "jh ow", "mike": "m ay k",
    "in": "ih n", "this": "dh ih s",
}

DEFAULT_HOMOPHENES = [
    ("bat", "mat"), ("fan", "van"), ("bill", "pill"), ("bear", "pear"),
    ("sue", "zoo"), ("cold", "gold"), ("ship", "chip"),
]

DEFAULT_CATEGORIES = {
    "adj": ["big", "old", "red", "small", "green", "nice"],
    "person": ["tom", "anna", "lisa", "joe", "mike"],
}

DEFAULT_TEMPLATES = [
    "the <adj> bat flies at night",
    "a <adj> cat sat on the mat",
    "<person> turned on the <adj> fan",
    "<person> drove the <adj> van",
    "the doctor gave <person> a pill",
    "<person> got the bill",
    "the <adj> bear eats the fish",
    "<person> eats a ripe pear",
    "<person> went to the zoo",
    "<person> will sue the doctor",
    "<person> wore a ring of gold",
    "the water was very cold",
    "the <adj> ship sails at sea",
    "<person> eats a chip on the ship",
]


def _pseudo_words(n: int, seed: int, taken: set[str]) -> list[str]:
    rng = np.random.default_rng(seed)
    consonants, vowels = "bcdfgklmnprstvz", "aeiou"
    out: list[str] = []
    while len(out) < n:
        syllables = int(rng.integers(2, 4))
        word = "".join(consonants[rng.integers(15)] + vowels[rng.integers(5)] for _ in range(syllables))
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


def default_lexicon(languages: Sequence[str] = DEFAULT_LANGUAGES, seed: int = 0) -> Lexicon:
    words = {w: tuple(p.split()) for w, p in _WORDS.items()}
    taken = set(words)
    translations = {}
    for i, lang in enumerate(languages):
        targets = _pseudo_words(len(words), seed * 1000 + i + 1, taken)
        rule = _DEFAULT_RULES.get(lang, REORDER_RULES[i % len(REORDER_RULES)])
        translations[lang] = Translation(dict(zip(words, targets)), rule)
    return Lexicon(words, list(DEFAULT_HOMOPHENES), translations, {k: list(v) for k, v in DEFAULT_CATEGORIES.items()})
