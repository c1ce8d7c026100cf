"""Instruction prompts, sequence assembly, training, and checkpoints."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ._io import atomic_write_text, decode_f32, encode_f32
from .bridge import Projection, project
from .corpus import Lexicon, Sample, text_sentences
from .dedup import deduplicate
from .decode import Hypothesis, beam, greedy
from .lm import DecoderLM, LoraConfig, ModelConfig, SequenceTooLongError, count_parameters, loss
from .metrics import bleu, corpus_wer
from .quantizer import Codebook, VersionError, assign

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
RECOGNIZE_TEMPLATE = "Recognize this speech in English. Input:"
TRANSLATE_TEMPLATE = "Translate this English speech to {lang}. Input:"
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
_TOKEN = re.compile(r"[^\s.,:;!?]+|[.,:;!?]")


class UnknownLanguageError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


def split_words(text: str) -> list[str]:
    return _TOKEN.findall(text)


class Tokenizer:
    """Word-level vocabulary; punctuation is split into separate tokens."""

    def __init__(self, vocab: Sequence[str], languages: Sequence[str] = ()):
        if tuple(vocab[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(vocab)) != len(vocab):
            raise ValueError("vocabulary has duplicates")
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.languages = list(languages)
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = range(4)

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as exc:
            raise KeyError(f"token {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.vocab[i] for i in ids if i not in (self.pad_id, self.bos_id, self.eos_id)]

    def tokenize(self, text: str) -> list[int]:
        return self.encode(split_words(text))

    @classmethod
    def from_lexicon(cls, lexicon: Lexicon) -> "Tokenizer":
        vocab = list(SPECIALS)
        seen = set(vocab)

        def add(words):
            for w in words:
                if w not in seen:
                    seen.add(w)
                    vocab.append(w)

        add(split_words(RECOGNIZE_TEMPLATE))
        for lang in lexicon.languages:
            add(split_words(TRANSLATE_TEMPLATE.format(lang=lang)))
        add(lexicon.words)
        for lang in lexicon.languages:
            add(lexicon.translations[lang].dictionary[w] for w in lexicon.words)
        return cls(vocab, lexicon.languages)


@dataclass(frozen=True)
class TaskKind:
    kind: str = "recognize"
    language: str | None = None

    def __post_init__(self):
        if self.kind not in ("recognize", "translate"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if (self.kind == "translate") != (self.language is not None):
            raise ValueError("a translate task needs exactly one target language")

    @classmethod
    def recognize(cls) -> "TaskKind":
        return cls("recognize")

    @classmethod
    def translate(cls, language: str) -> "TaskKind":
        return cls("translate", language)

    @classmethod
    def parse(cls, text: str) -> "TaskKind":
        if text == "recognize":
            return cls.recognize()
        if text.startswith("translate:"):
            return cls.translate(text.split(":", 1)[1])
        raise ValueError(f"cannot parse task {text!r}")

    def __str__(self) -> str:
        return "recognize" if self.kind == "recognize" else f"translate:{self.language}"


def all_tasks(languages: Sequence[str]) -> list[TaskKind]:
    return [TaskKind.recognize()] + [TaskKind.translate(lang) for lang in languages]


def build_prompt(task: TaskKind, tokenizer: Tokenizer) -> list[int]:
    """BOS followed by the tokenized instruction; visual features follow ``Input:``."""
    if task.kind == "recognize":
        text = RECOGNIZE_TEMPLATE
    else:
        if task.language not in tokenizer.languages:
            raise UnknownLanguageError(f"unknown target language {task.language!r}")
        text = TRANSLATE_TEMPLATE.format(lang=task.language)
    return [tokenizer.bos_id] + tokenizer.tokenize(text)


def reference_words(sample: Sample, task: TaskKind) -> tuple[str, ...]:
    if task.kind == "recognize":
        return sample.transcript
    try:
        return sample.translations[task.language]
    except KeyError:
        raise UnknownLanguageError(f"sample {sample.id} has no {task.language} translation") from None


def target_tokens(sample: Sample, task: TaskKind, tokenizer: Tokenizer) -> list[int]:
    return tokenizer.encode(reference_words(sample, task)) + [tokenizer.eos_id]


def visual_features(sample: Sample, codebook: Codebook | None, dedup: bool = True) -> np.ndarray:
    """Encoder-space frames fed to the bridge: run-averaged when ``dedup``, raw otherwise."""
    frames = sample.features.frames
    if not dedup:
        return frames
    if codebook is None:
        raise ValueError("deduplication needs a codebook")
    return deduplicate(sample.features, assign(codebook, sample.features)).reduced


# ------------------------------------------------------------------ state


class ModelState(torch.nn.Module):
    """Base LM (frozen after pretraining), its adapters, and the visual bridge."""

    def __init__(self, lm: DecoderLM, tokenizer: Tokenizer, projection: Projection | None = None, dedup: bool = True):
        super().__init__()
        self.lm = lm
        self.projection = projection
        self.tokenizer = tokenizer
        self.dedup = dedup

    @classmethod
    def for_finetuning(cls, base: "ModelState", d_vis: int, lora: LoraConfig, seed: int = 0, dedup: bool = True):
        lm = copy.deepcopy(base.lm)
        lm.attach_lora(lora, seed=seed)
        lm.freeze_base()
        return cls(lm, base.tokenizer, Projection(d_vis, lm.config.d_model, seed=seed), dedup)

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        params = self.lm.adapter_parameters()
        if self.projection is not None:
            params += list(self.projection.parameters())
        return params

    def save(self, path) -> None:
        atomic_write_text(path, checkpoint_to_json(self))

    @classmethod
    def load(cls, path) -> "ModelState":
        return checkpoint_from_json(Path(path).read_text(encoding="utf-8"))


def checkpoint_to_json(state: ModelState) -> str:
    tensors = {}
    for name, t in state.state_dict().items():
        arr = t.detach().cpu().numpy()
        tensors[name] = {"shape": list(arr.shape), "data": encode_f32(arr)}
    obj = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(state.lm.config),
        "lora_config": None if state.lm.lora_config is None else asdict(state.lm.lora_config),
        "vocab": state.tokenizer.vocab,
        "languages": state.tokenizer.languages,
        "dedup": state.dedup,
        "tensors": tensors,
    }
    return json.dumps(obj, sort_keys=True) + "\n"


def checkpoint_from_json(text: str) -> ModelState:
    obj = json.loads(text)
    if obj.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {obj.get('version')} is not {CHECKPOINT_VERSION}")
    lm = DecoderLM(ModelConfig(**obj["model_config"]))
    if obj["lora_config"] is not None:
        lm.attach_lora(LoraConfig(**obj["lora_config"]))
        lm.freeze_base()
    tensors = {k: torch.from_numpy(decode_f32(v["data"], tuple(v["shape"]))) for k, v in obj["tensors"].items()}
    projection = None
    if "projection.weight" in tensors:
        d_llm, d_vis = tensors["projection.weight"].shape
        projection = Projection(d_vis, d_llm)
    state = ModelState(lm, Tokenizer(obj["vocab"], obj["languages"]), projection, obj["dedup"])
    state.load_state_dict(tensors, strict=True)
    return state


# --------------------------------------------------------------- assembly


def _answer_span(prompt_len: int, visual_len: int, target: list[int]):
    start = prompt_len + visual_len
    length = start + 1 + len(target)
    targets = torch.full((length,), -1, dtype=torch.long)
    targets[start : start + len(target)] = torch.tensor(target, dtype=torch.long)
    mask = targets >= 0
    return targets, mask


def assemble_parts(state: ModelState, prompt: list[int], visual: np.ndarray, target: list[int]):
    """prompt embeddings, projected visual rows, then BOS + target (ending in EOS).

    ``targets[t]`` is the token expected after position t; the mask covers
    exactly the target tokens.
    """
    lm, tok = state.lm, state.tokenizer
    answer = torch.tensor([tok.bos_id] + target, dtype=torch.long)
    vis = project(state.projection, torch.as_tensor(visual))
    prefix = torch.cat([lm.embed(torch.tensor(prompt, dtype=torch.long)), vis, lm.embed(answer)])
    if prefix.shape[0] > lm.config.max_len:
        raise SequenceTooLongError(f"assembled length {prefix.shape[0]} exceeds max_len {lm.config.max_len}")
    targets, mask = _answer_span(len(prompt), len(visual), target)
    return prefix, targets, mask


def assemble(sample: Sample, task: TaskKind, codebook: Codebook | None, state: ModelState):
    visual = visual_features(sample, codebook, state.dedup)
    return assemble_parts(state, build_prompt(task, state.tokenizer), visual, target_tokens(sample, task, state.tokenizer))


def decode_prefix(state: ModelState, prompt: list[int], visual: np.ndarray) -> torch.Tensor:
    lm = state.lm
    return torch.cat(
        [
            lm.embed(torch.tensor(prompt, dtype=torch.long)),
            project(state.projection, torch.as_tensor(visual)),
            lm.embed(torch.tensor([state.tokenizer.bos_id], dtype=torch.long)),
        ]
    )


# ----------------------------------------------------------------- schedule


@dataclass
class TrainConfig:
    updates: int = 3000
    peak_lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.98)
    warmup_frac: float = 0.1
    hold_frac: float = 0.4
    decay_frac: float = 0.5
    final_lr_scale: float = 0.05
    batch_size: int = 16
    seed: int = 0
    task_mix: dict[str, float] | None = None
    token_mean_loss: bool = False
    val_every: int = 500
    val_samples: int = 25
    max_new_tokens: int = 16

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not math.isclose(self.warmup_frac + self.hold_frac + self.decay_frac, 1.0, abs_tol=1e-9):
            raise ValueError("warmup, hold and decay fractions must sum to 1")
        if self.updates < 1 or self.batch_size < 1 or self.peak_lr <= 0:
            raise ValueError("updates, batch_size and peak_lr must be positive")

    def mix(self, languages: Sequence[str]) -> dict[str, float]:
        if self.task_mix is not None:
            for name in self.task_mix:
                task = TaskKind.parse(name)
                if task.language is not None and task.language not in languages:
                    raise UnknownLanguageError(f"task mix names undeclared language {task.language!r}")
            return dict(self.task_mix)
        if not languages:
            return {"recognize": 1.0}
        mix = {"recognize": 0.5}
        mix.update({f"translate:{lang}": 0.5 / len(languages) for lang in languages})
        return mix


def lr_at(step: int, config: TrainConfig) -> float:
    """Tri-stage schedule: linear warmup, constant hold, exponential decay to ``final_lr_scale * peak``."""
    n = config.updates
    if not 0 <= step <= n:
        raise ValueError(f"step {step} outside [0, {n}]")
    warm = round(config.warmup_frac * n)
    hold_end = warm + round(config.hold_frac * n)
    peak = config.peak_lr
    if step < warm:
        return peak * step / warm
    if step <= hold_end:
        return peak
    decay_steps = n - hold_end
    return peak * math.exp(math.log(config.final_lr_scale) * (step - hold_end) / decay_steps)


# ----------------------------------------------------------------- training


def split_corpus(samples: Sequence[Sample], seed: int, val_frac: float = 0.1, test_frac: float = 0.1):
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(round(val_frac * len(samples)))
    n_test = int(round(test_frac * len(samples)))
    test = [samples[i] for i in sorted(order[:n_test])]
    val = [samples[i] for i in sorted(order[n_test : n_test + n_val])]
    train = [samples[i] for i in sorted(order[n_test + n_val :])]
    return train, val, test


def _pad_batch(seqs):
    prefixes, targets, masks = zip(*seqs)
    x = torch.nn.utils.rnn.pad_sequence(list(prefixes), batch_first=True)
    y = torch.nn.utils.rnn.pad_sequence(list(targets), batch_first=True, padding_value=-1)
    m = torch.nn.utils.rnn.pad_sequence(list(masks), batch_first=True, padding_value=False)
    return x, y, m


def batch_loss(model: DecoderLM, seqs, token_mean: bool) -> torch.Tensor:
    """Mean over the batch of each sequence's summed answer NLL (or of the per-token mean)."""
    x, y, m = _pad_batch(seqs)
    logits = model(x)
    per_seq = [loss(logits[i], y[i], m[i], normalize=token_mean) for i in range(len(seqs))]
    return torch.stack(per_seq).mean()


@dataclass
class TrainResult:
    losses: list[float]
    lrs: list[float]
    validation: list[dict] = field(default_factory=list)
    best_step: int | None = None

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for i, (lr, lo) in enumerate(zip(self.lrs, self.losses), start=1):
            w.writerow([i, f"{lr:.8e}", f"{lo:.6f}"])
        return buf.getvalue()


def _sample_tasks(mix: dict[str, float], rng: np.random.Generator, n: int) -> list[TaskKind]:
    names = list(mix)
    weights = np.array([mix[k] for k in names], dtype=np.float64)
    picks = rng.choice(len(names), size=n, p=weights / weights.sum())
    return [TaskKind.parse(names[i]) for i in picks]


def train(
    config: TrainConfig,
    train_samples: Sequence[Sample],
    codebook: Codebook | None,
    state: ModelState,
    val_samples: Sequence[Sample] = (),
    on_batch=None,
) -> TrainResult:
    """Adam on adapters and projection only; the base LM stays frozen.

    Keeps the trainable tensors of the best validation checkpoint (lowest
    recognition WER plus mean translation BLEU shortfall) and restores them at the end.
    """
    if not train_samples:
        raise ValueError("no training samples")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    tok = state.tokenizer
    state.lm.freeze_base()
    params = state.trainable_parameters()
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=0.0, betas=config.betas)
    mix = config.mix(tok.languages)
    visual = [visual_features(s, codebook, state.dedup) for s in train_samples]
    prompts = {name: build_prompt(TaskKind.parse(name), tok) for name in mix}
    val_subset = list(val_samples[: config.val_samples])

    result = TrainResult([], [])
    best_score, best_params = math.inf, None
    state.train()
    for step in range(config.updates):
        idx = rng.integers(len(train_samples), size=config.batch_size)
        tasks = _sample_tasks(mix, rng, config.batch_size)
        if on_batch is not None:
            on_batch(step, tasks)
        seqs = [
            assemble_parts(state, prompts[str(t)], visual[i], target_tokens(train_samples[i], t, tok))
            for i, t in zip(idx, tasks)
        ]
        lr = lr_at(step + 1, config)
        for group in opt.param_groups:
            group["lr"] = lr
        value = batch_loss(state.lm, seqs, config.token_mean_loss)
        if not torch.isfinite(value):
            raise TrainingDivergedError(step, value.item())
        opt.zero_grad(set_to_none=True)
        value.backward()
        opt.step()
        result.losses.append(value.item())
        result.lrs.append(lr)

        last = step + 1 == config.updates
        if val_subset and config.val_every and ((step + 1) % config.val_every == 0 or last):
            metrics = validate(state, val_subset, codebook, config.max_new_tokens)
            metrics["step"] = step + 1
            result.validation.append(metrics)
            log.info("step %d loss %.4f val %s", step + 1, value.item(), metrics)
            if metrics["score"] < best_score:
                best_score = metrics["score"]
                best_params = [p.detach().clone() for p in params]
                result.best_step = step + 1
            state.train()
    if best_params is not None:
        with torch.no_grad():
            for p, b in zip(params, best_params):
                p.copy_(b)
    state.eval()
    return result


# --------------------------------------------------------------- inference


def transcribe(
    state: ModelState,
    sample: Sample,
    task: TaskKind,
    codebook: Codebook | None,
    width: int = 20,
    alpha: float = 0.0,
    max_new_tokens: int = 16,
) -> tuple[list[str], Hypothesis]:
    state.eval()
    prompt = build_prompt(task, state.tokenizer)
    with torch.no_grad():
        prefix = decode_prefix(state, prompt, visual_features(sample, codebook, state.dedup))
    eos = state.tokenizer.eos_id
    if width <= 1:
        hyp = greedy(state.lm, prefix, max_new_tokens, eos)
    else:
        hyp = beam(state.lm, prefix, width, alpha, max_new_tokens, eos)
    return state.tokenizer.decode(hyp.answer(eos)), hyp


def decode_all(state, samples, task, codebook, width=20, alpha=0.0, max_new_tokens=16) -> list[list[str]]:
    return [transcribe(state, s, task, codebook, width, alpha, max_new_tokens)[0] for s in samples]


def validate(state, samples, codebook, max_new_tokens=16) -> dict:
    out: dict = {}
    rec = decode_all(state, samples, TaskKind.recognize(), codebook, width=1, max_new_tokens=max_new_tokens)
    out["wer"] = corpus_wer([s.transcript for s in samples], rec)
    shortfall = []
    for lang in state.tokenizer.languages:
        task = TaskKind.translate(lang)
        hyps = decode_all(state, samples, task, codebook, width=1, max_new_tokens=max_new_tokens)
        out[f"bleu_{lang}"] = bleu([s.translations[lang] for s in samples], hyps)
        shortfall.append(1.0 - out[f"bleu_{lang}"] / 100.0)
    out["score"] = out["wer"] + (float(np.mean(shortfall)) if shortfall else 0.0)
    return out


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainConfig:
    updates: int = 2000
    peak_lr: float = 1e-3
    batch_size: int = 16
    n_sentences: int = 4000
    seed: int = 0
    instruction_text: bool = True


def pretrain_sequences(lexicon: Lexicon, templates, tokenizer: Tokenizer, config: PretrainConfig) -> list[list[int]]:
    """Text-only sequences: plain sentences in every language, plus text-input instruction examples."""
    seqs = []
    rng = np.random.default_rng(config.seed)
    for words in text_sentences(lexicon, templates, config.n_sentences, config.seed + 7919):
        versions = {"English": words}
        for lang, tr in lexicon.translations.items():
            versions[lang] = tr.apply(words)
        for text in versions.values():
            seqs.append([tokenizer.bos_id] + tokenizer.encode(text) + [tokenizer.eos_id])
        if config.instruction_text:
            task = all_tasks(lexicon.languages)[int(rng.integers(1 + len(lexicon.languages)))]
            target = versions["English" if task.language is None else task.language]
            seqs.append(
                build_prompt(task, tokenizer)
                + tokenizer.encode(words)
                + [tokenizer.bos_id]
                + tokenizer.encode(target)
                + [tokenizer.eos_id]
            )
    return seqs


def pretrain_lm(
    model_config: ModelConfig, lexicon: Lexicon, templates, config: PretrainConfig, tokenizer: Tokenizer | None = None
) -> ModelState:
    """Full-parameter next-token training of the base LM on text only."""
    tokenizer = tokenizer or Tokenizer.from_lexicon(lexicon)
    if model_config.vocab_size != len(tokenizer):
        raise ValueError(f"model vocab {model_config.vocab_size} != tokenizer vocab {len(tokenizer)}")
    torch.manual_seed(config.seed)
    lm = DecoderLM(model_config)
    seqs = pretrain_sequences(lexicon, templates, tokenizer, config)
    rng = np.random.default_rng(config.seed)
    sched = TrainConfig(updates=config.updates, peak_lr=config.peak_lr, seed=config.seed)
    opt = torch.optim.Adam(lm.parameters(), lr=0.0, betas=sched.betas)
    lm.train()
    for step in range(config.updates):
        batch = [seqs[i] for i in rng.integers(len(seqs), size=config.batch_size)]
        width = max(len(s) for s in batch)
        ids = torch.full((len(batch), width), tokenizer.pad_id, dtype=torch.long)
        tgt = torch.full((len(batch), width), -1, dtype=torch.long)
        for r, s in enumerate(batch):
            ids[r, : len(s)] = torch.tensor(s)
            tgt[r, : len(s) - 1] = torch.tensor(s[1:])
        logits = lm(lm.embed(ids))
        mask = tgt >= 0
        value = loss(logits, tgt, mask, normalize=True)
        if not torch.isfinite(value):
            raise TrainingDivergedError(step, value.item())
        for group in opt.param_groups:
            group["lr"] = lr_at(step + 1, sched)
        opt.zero_grad(set_to_none=True)
        value.backward()
        opt.step()
        if (step + 1) % 500 == 0:
            log.info("pretrain step %d loss %.4f", step + 1, value.item())
    lm.eval()
    return ModelState(lm, tokenizer)


def trainable_fraction(state: ModelState) -> float:
    trainable = count_parameters(state.trainable_parameters())
    total = count_parameters(state.parameters())
    return trainable / total
