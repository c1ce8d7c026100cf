"""Evaluation metrics: WER, BLEU, FLOPs accounting, homophene accuracy."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_BUCKET_EDGES = (0.0, 2.0, 4.0, 6.0, math.inf)


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(ref: Sequence[str], hyp: Sequence[str]) -> float:
    if len(ref) == 0:
        raise ValueError("WER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    words = sum(len(r) for r in refs)
    if words == 0:
        raise ValueError("WER is undefined for empty references")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / words


def align(ref: Sequence[str], hyp: Sequence[str]) -> list[int | None]:
    """For each reference position, the aligned hypothesis index (None when deleted)."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]))
    out: list[int | None] = [None] * n
    i, j = n, m
    while i > 0 and j > 0:
        if d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            out[i - 1] = j - 1
            i, j = i - 1, j - 1
        elif d[i, j] == d[i - 1, j] + 1:
            i -= 1
        else:
            j -= 1
    return out


def _ngrams(words, n):
    return Counter(tuple(words[i : i + n]) for i in range(len(words) - n + 1))


def bleu(refs, hyps, max_n: int = 4, smooth: bool = True) -> float:
    """Corpus BLEU in [0, 100].

    Each ``refs[i]`` is one tokenized reference, or a tuple/list of alternative
    references (n-gram counts clipped by the max over alternatives, brevity
    measured against the closest reference length).  With ``smooth`` the
    n >= 2 precisions use add-one smoothing; unigram precision never does.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references vs {len(hyps)} hypotheses")
    if not refs:
        raise ValueError("BLEU needs at least one reference")
    matches = [0] * max_n
    totals = [0] * max_n
    ref_len = hyp_len = 0
    for ref, hyp in zip(refs, hyps):
        alts = [list(r) for r in ref] if ref and isinstance(ref[0], (list, tuple)) else [list(ref)]
        hyp = list(hyp)
        hyp_len += len(hyp)
        ref_len += min((abs(len(a) - len(hyp)), len(a)) for a in alts)[1]
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            clip: Counter = Counter()
            for a in alts:
                clip |= _ngrams(a, n)
            matches[n - 1] += sum(min(c, clip[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    log_p = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth and n >= 1:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / max_n
    if hyp_len == 0:
        return 0.0
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_p)


def forward_flops(n_layers: int, d_model: int, d_ff: int, vocab_size: int, seq_len: int) -> float:
    """Matmul FLOPs for one forward pass over ``seq_len`` positions.

    Per layer: QKV+output projections 8*T*d^2, attention scores and mixing
    4*T^2*d, feed-forward 4*T*d*d_ff; plus the output head 2*T*d*V.
    """
    t, d = float(seq_len), float(d_model)
    per_layer = 8 * t * d * d + 4 * t * t * d + 4 * t * d * d_ff
    return n_layers * per_layer + 2 * t * d * vocab_size


def flops_estimate(model_config, seq_len: int) -> float:
    """Training FLOPs for one sample: forward plus a backward costing twice the forward."""
    if seq_len < 1:
        raise ValueError("sequence length must be >= 1")
    c = model_config
    return 3.0 * forward_flops(c.n_layers, c.d_model, c.d_ff, c.vocab_size, seq_len)


def percent_decrease(before: float, after: float) -> float:
    return 100.0 * (before - after) / before


def bucket_of(duration: float, edges: Sequence[float]) -> int:
    for i in range(len(edges) - 1):
        if edges[i] <= duration < edges[i + 1]:
            return i
    raise ValueError(f"duration {duration} outside bucket edges {list(edges)}")


def bucket_label(edges, i) -> str:
    lo, hi = edges[i], edges[i + 1]
    return f">{lo:g}s" if math.isinf(hi) else f"{lo:g}-{hi:g}s"


def parse_bucket_edges(spec) -> tuple[float, ...]:
    """Accepts a list of numbers or a string like ``"0-2,2-4,4-6,>6"``."""
    if isinstance(spec, str):
        edges: list[float] = []
        for part in spec.split(","):
            part = part.strip()
            if part.startswith(">"):
                lo, hi = float(part[1:]), math.inf
            else:
                lo, hi = (float(v) for v in part.split("-"))
            if edges and edges[-1] != lo:
                raise ValueError(f"bucket {part!r} does not continue from {edges[-1]}")
            if not edges:
                edges.append(lo)
            edges.append(hi)
        spec = edges
    edges = tuple(float(e) for e in spec)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bucket edges must be increasing, got {edges}")
    return edges


def bucketed_wer(samples, hyps, bucket_edges_seconds=DEFAULT_BUCKET_EDGES) -> dict[str, tuple[float, int]]:
    """Per-duration-bucket corpus WER; buckets holding no sample are absent."""
    edges = parse_bucket_edges(bucket_edges_seconds)
    groups: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        groups.setdefault(bucket_of(s.features.duration, edges), []).append(idx)
    out = {}
    for b in sorted(groups):
        idxs = groups[b]
        out[bucket_label(edges, b)] = (
            corpus_wer([samples[i].transcript for i in idxs], [hyps[i] for i in idxs]),
            len(idxs),
        )
    return out


def homophene_slots(transcript, lexicon) -> list[int]:
    members = lexicon.homophene_words()
    return [i for i, w in enumerate(transcript) if w in members]


def homophene_accuracy(samples, hyps, lexicon) -> float:
    """Fraction of homophene slots whose aligned hypothesis word is the true pair member."""
    correct = total = 0
    for s, hyp in zip(samples, hyps):
        slots = homophene_slots(s.transcript, lexicon)
        if not slots:
            continue
        alignment = align(s.transcript, list(hyp))
        for i in slots:
            total += 1
            j = alignment[i]
            correct += j is not None and hyp[j] == s.transcript[i]
    if total == 0:
        raise ValueError("no homophene slots in the evaluated samples")
    return correct / total


def nearest_prototype_homophene_accuracy(samples, spec, lexicon) -> float:
    """Expected slot accuracy of a context-free frame classifier.

    Each frame of a homophene word is labelled with its nearest viseme
    prototype; runs are collapsed and every lexicon word with that viseme
    sequence is a candidate.  Without context the classifier picks uniformly
    among candidates, so a slot contributes 1/|candidates| when the truth is
    among them.
    """
    by_visemes: dict[tuple[int, ...], list[str]] = {}
    for w, phones in lexicon.words.items():
        vis = spec.visemes_of(phones)
        collapsed = tuple(v for k, v in enumerate(vis) if k == 0 or vis[k - 1] != v)
        by_visemes.setdefault(collapsed, []).append(w)
    protos = np.asarray(spec.prototypes)
    score = 0.0
    total = 0
    for s in samples:
        if not s.word_ends:
            raise ValueError(f"sample {s.id} carries no word alignment")
        for i in homophene_slots(s.transcript, lexicon):
            start, end = s.word_span(i)
            frames = s.features.frames[start:end].astype(np.float64)
            labels = ((frames[:, None, :] - protos[None]) ** 2).sum(-1).argmin(1)
            collapsed = tuple(int(v) for k, v in enumerate(labels) if k == 0 or labels[k - 1] != v)
            candidates = by_visemes.get(collapsed, [])
            total += 1
            if s.transcript[i] in candidates:
                score += 1.0 / len(candidates)
    if total == 0:
        raise ValueError("no homophene slots in the evaluated samples")
    return score / total


@dataclass
class EvalReport:
    wer: float
    bleu: dict[str, float]
    wer_by_length_bucket: dict[str, tuple[float, int]]
    homophene_accuracy: float
    mean_length_ratio: float
    flops_per_epoch: float
    flops_reduction_pct: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.wer < 0:
            raise ValueError("negative WER")
        if any(not 0.0 <= b <= 100.0 for b in self.bleu.values()):
            raise ValueError("BLEU outside [0, 100]")

    def to_json(self) -> str:
        d = asdict(self)
        d["wer_by_length_bucket"] = {k: {"wer": v[0], "count": v[1]} for k, v in self.wer_by_length_bucket.items()}
        return json.dumps(d, sort_keys=True, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["wer", f"{self.wer:.6f}"])
        for lang, b in sorted(self.bleu.items()):
            w.writerow([f"bleu_{lang}", f"{b:.4f}"])
        for k, (v, n) in self.wer_by_length_bucket.items():
            w.writerow([f"wer_bucket_{k}", f"{v:.6f}"])
            w.writerow([f"count_bucket_{k}", n])
        w.writerow(["homophene_accuracy", f"{self.homophene_accuracy:.6f}"])
        w.writerow(["mean_length_ratio", f"{self.mean_length_ratio:.6f}"])
        w.writerow(["flops_per_epoch", f"{self.flops_per_epoch:.6e}"])
        w.writerow(["flops_reduction_pct", f"{self.flops_reduction_pct:.4f}"])
        for k, v in sorted(self.extra.items()):
            w.writerow([k, v])
        return buf.getvalue()
