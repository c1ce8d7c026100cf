import math

import numpy as np
import pytest
import torch

from vspkit.corpus import DEFAULT_TEMPLATES, FeatureSequence, Sample, VisemeSpec, default_lexicon, generate_corpus
from vspkit.lm import DecoderLM, LoraConfig, ModelConfig
from vspkit.pipeline import (
    ModelState,
    TaskKind,
    Tokenizer,
    TrainConfig,
    TrainingDivergedError,
    UnknownLanguageError,
    assemble,
    build_prompt,
    lr_at,
    PretrainConfig,
    pretrain_lm,
    split_corpus,
    train,
    trainable_fraction,
    transcribe,
)
from vspkit.quantizer import Codebook, fit_corpus


@pytest.fixture(scope="module")
def lexicon():
    return default_lexicon()


@pytest.fixture(scope="module")
def tokenizer(lexicon):
    return Tokenizer.from_lexicon(lexicon)


@pytest.fixture(scope="module")
def corpus(lexicon):
    return generate_corpus(VisemeSpec.default(), lexicon, 60, DEFAULT_TEMPLATES, seed=3)


@pytest.fixture(scope="module")
def codebook(corpus):
    return fit_corpus(corpus, k=13, seed=0, n_init=3)


@pytest.fixture(scope="module")
def base(lexicon, tokenizer):
    cfg = ModelConfig(vocab_size=len(tokenizer), n_layers=1, n_heads=2, d_model=32, d_ff=64)
    return pretrain_lm(cfg, lexicon, DEFAULT_TEMPLATES, PretrainConfig(updates=30, n_sentences=50), tokenizer)


def fresh_state(base, seed=0, dedup=True):
    return ModelState.for_finetuning(base, 24, LoraConfig(rank=4, alpha=8.0), seed=seed, dedup=dedup)


def test_prompts(tokenizer):
    rec = build_prompt(TaskKind.recognize(), tokenizer)
    assert rec[0] == tokenizer.bos_id
    assert tokenizer.decode(rec[1:]) == ["Recognize", "this", "speech", "in", "English", ".", "Input", ":"]
    assert len(rec) == 9
    es = build_prompt(TaskKind.translate("Spanish"), tokenizer)
    assert " ".join(tokenizer.decode(es[1:])) == "Translate this English speech to Spanish . Input :"
    with pytest.raises(UnknownLanguageError):
        build_prompt(TaskKind.translate("Xx"), tokenizer)


def test_task_kind_parse_roundtrip():
    for t in (TaskKind.recognize(), TaskKind.translate("French")):
        assert TaskKind.parse(str(t)) == t
    with pytest.raises(ValueError):
        TaskKind.parse("summarize")


def test_assemble_lengths_and_targets(base, tokenizer, lexicon):
    frames = np.repeat(np.eye(3, 24, dtype=np.float32), [2, 3, 1], axis=0)
    words = ("the", "cat", "sat")
    sample = Sample("t0", FeatureSequence(frames, 25.0), words, {lang: tuple(lexicon.translations[lang].apply(words)) for lang in lexicon.languages})
    cb = Codebook(3, 24, np.eye(3, 24), 0, 0.0)
    state = fresh_state(base)
    prefix, targets, mask = assemble(sample, TaskKind.recognize(), cb, state)
    assert prefix.shape[0] == 9 + 3 + 1 + 4
    expected = tokenizer.encode(words) + [tokenizer.eos_id]
    assert targets[mask].tolist() == expected
    assert mask.nonzero().flatten().tolist() == list(range(12, 16))
    _, targets, mask = assemble(sample, TaskKind.translate("Spanish"), cb, state)
    assert targets[mask].tolist() == tokenizer.encode(sample.translations["Spanish"]) + [tokenizer.eos_id]
    # dedup off feeds every frame
    off = fresh_state(base, dedup=False)
    assert assemble(sample, TaskKind.recognize(), cb, off)[0].shape[0] == 9 + 6 + 1 + 4


def test_lr_schedule():
    cfg = TrainConfig(updates=1000, peak_lr=2e-3)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == 2e-3
    assert lr_at(500, cfg) == 2e-3
    assert abs(lr_at(1000, cfg) - 2e-3 / 20) < 1e-9
    values = [lr_at(s, cfg) for s in range(1001)]
    assert all(b <= a for a, b in zip(values[500:], values[501:]))
    with pytest.raises(ValueError):
        lr_at(1001, cfg)
    with pytest.raises(ValueError):
        TrainConfig(warmup_frac=0.2)


def test_split_is_deterministic_partition(corpus):
    a = split_corpus(corpus, seed=1)
    b = split_corpus(corpus, seed=1)
    assert [[s.id for s in part] for part in a] == [[s.id for s in part] for part in b]
    ids = sorted(s.id for part in a for s in part)
    assert ids == sorted(s.id for s in corpus)


def test_training_smoke_freeze_and_determinism(base, corpus, codebook):
    samples = corpus[:50]
    cfg = TrainConfig(updates=200, peak_lr=3e-3, batch_size=4, seed=2)
    state = fresh_state(base)
    before = {k: v.clone() for k, v in state.lm.state_dict().items() if ".lora_" not in k}
    res = train(cfg, samples, codebook, state)
    assert np.mean(res.losses[-100:]) < np.mean(res.losses[:100])
    after = state.lm.state_dict()
    for k, v in before.items():
        assert torch.equal(after[k], v), k
    again = train(cfg, samples, codebook, fresh_state(base))
    assert again.losses == res.losses
    assert res.log_csv().splitlines()[0] == "step,lr,loss"
    assert len(res.log_csv().splitlines()) == 201


def test_task_mix_identity(base, corpus, codebook):
    seen = []
    cfg = TrainConfig(updates=5, batch_size=6, task_mix={"recognize": 1.0}, val_every=0)
    train(cfg, corpus[:10], codebook, fresh_state(base), on_batch=lambda step, tasks: seen.extend(tasks))
    assert len(seen) == 30 and all(t.kind == "recognize" for t in seen)
    with pytest.raises(UnknownLanguageError):
        train(TrainConfig(updates=1, task_mix={"translate:Xx": 1.0}), corpus[:4], codebook, fresh_state(base))


def test_divergence_reports_step(base, corpus, codebook):
    state = fresh_state(base)
    with torch.no_grad():
        state.projection.weight.fill_(math.nan)
    with pytest.raises(TrainingDivergedError) as err:
        train(TrainConfig(updates=3), corpus[:4], codebook, state)
    assert err.value.step == 0


def test_checkpoint_roundtrip_bit_identical(tmp_path, base, corpus, codebook):
    state = fresh_state(base, seed=5)
    train(TrainConfig(updates=10, val_every=0), corpus[:10], codebook, state)
    state.eval()
    prefix, _, _ = assemble(corpus[0], TaskKind.recognize(), codebook, state)
    with torch.no_grad():
        before = state.lm(prefix)
    state.save(tmp_path / "ckpt.json")
    loaded = ModelState.load(tmp_path / "ckpt.json").eval()
    prefix2, _, _ = assemble(corpus[0], TaskKind.recognize(), codebook, loaded)
    with torch.no_grad():
        assert torch.equal(loaded.lm(prefix2), before)
    assert loaded.tokenizer.vocab == state.tokenizer.vocab
    words, hyp = transcribe(loaded, corpus[1], TaskKind.recognize(), codebook, width=2, max_new_tokens=5)
    assert words == transcribe(state, corpus[1], TaskKind.recognize(), codebook, width=2, max_new_tokens=5)[0]


def test_default_size_trainable_fraction(tokenizer):
    base_state = ModelState(DecoderLM(ModelConfig(vocab_size=len(tokenizer))), tokenizer)
    state = ModelState.for_finetuning(base_state, 24, LoraConfig())
    assert trainable_fraction(state) < 0.05
