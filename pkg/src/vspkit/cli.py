"""vspkit command line: corpus -> units -> dedup -> LM training -> decoding -> evaluation."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from ._io import atomic_write_text
from .bridge import project, textualize
from .config import ConfigError, RunConfig
from .corpus import (
    DEFAULT_TEMPLATES,
    CorpusFormatError,
    UnknownWordError,
    VisemeSpec,
    default_lexicon,
    generate_corpus,
    read_corpus,
    write_corpus,
)
from .dedup import REFERENCE_RATIO_K200, REFERENCE_REDUCTION_PCT, deduplicate, expected_length_ratio, reduction_stats
from .metrics import (
    EvalReport,
    bleu,
    bucketed_wer,
    corpus_wer,
    flops_estimate,
    homophene_accuracy,
    nearest_prototype_homophene_accuracy,
    percent_decrease,
)
from .pipeline import (
    ModelState,
    TaskKind,
    Tokenizer,
    TrainingDivergedError,
    all_tasks,
    build_prompt,
    pretrain_lm,
    split_corpus,
    train,
    transcribe,
    visual_features,
)
from .quantizer import Codebook, VersionError, assign, fit_corpus

log = logging.getLogger("vspkit")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_VERSION = 4


# ------------------------------------------------------------------ context


class Run:
    """Resolved config plus lazily built shared objects for one command."""

    def __init__(self, cfg: RunConfig, out: Path, workers: int = 1):
        self.cfg = cfg
        self.out = out
        self.workers = workers
        c = cfg.corpus
        self.spec = VisemeSpec.default(
            d_vis=c.d_vis,
            noise_sigma=c.noise_sigma,
            hold_frames=c.hold_frames,
            blend_frames=c.blend_frames,
            frame_rate_hz=c.frame_rate_hz,
            seed=cfg.seed,
            min_distance=c.min_distance,
        )
        self.lexicon = default_lexicon(c.languages, seed=cfg.seed)

    def path(self, name: str) -> Path:
        return self.out / getattr(self.cfg.paths, name)

    def report(self, filename: str) -> Path:
        return self.out / self.cfg.paths.report_dir / filename

    def corpus(self):
        return read_corpus(self.path("corpus"))

    def splits(self):
        c = self.cfg.corpus
        return split_corpus(self.corpus(), self.cfg.seed, c.val_frac, c.test_frac)

    def codebook(self) -> Codebook:
        return Codebook.load(self.path("codebook"))

    def checkpoint(self) -> ModelState:
        return ModelState.load(self.path("checkpoint"))


def _json_lines(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ----------------------------------------------------------------- commands


def cmd_gen_corpus(run: Run, args) -> None:
    samples = generate_corpus(run.spec, run.lexicon, run.cfg.corpus.n, DEFAULT_TEMPLATES, seed=run.cfg.seed)
    write_corpus(
        samples,
        run.path("corpus"),
        d_vis=run.spec.d_vis,
        frame_rate_hz=run.spec.frame_rate_hz,
        languages=run.lexicon.languages,
    )
    log.info("wrote %d samples to %s", len(samples), run.path("corpus"))


def _fit(run: Run, train_samples, k: int, n_init: int) -> Codebook:
    q = run.cfg.quantizer
    return fit_corpus(train_samples, k=k, seed=run.cfg.seed, n_init=n_init, max_iters=q.max_iters)


def cmd_fit_units(run: Run, args) -> None:
    train_samples, _, _ = run.splits()
    cb = _fit(run, train_samples, run.cfg.quantizer.k, run.cfg.quantizer.n_init)
    cb.save(run.path("codebook"))
    log.info("k=%d inertia %.4f", cb.k, cb.inertia)


def cmd_dedup_stats(run: Run, args) -> None:
    corpus = run.corpus()
    cb = run.codebook()
    stats = reduction_stats(corpus, cb)
    stats.write_csv(run.report("dedup_stats.csv"))
    counts, edges = stats.histogram
    summary = {
        "k": cb.k,
        "n_samples": len(corpus),
        "mean_length_ratio": stats.mean_ratio,
        "reduction_pct": stats.reduction_pct,
        "expected_ratio_true_visemes": round(expected_length_ratio(corpus, run.spec, run.lexicon), 6),
        "reference_reduction_pct": REFERENCE_REDUCTION_PCT,
        "reference_ratio_k200": REFERENCE_RATIO_K200,
        "histogram": {"counts": counts.tolist(), "edges": [round(float(e), 6) for e in edges]},
    }
    c = run.cfg.corpus
    train_samples, _, test = split_corpus(corpus, run.cfg.seed, c.val_frac, c.test_frac)
    for name, part in (("train", train_samples), ("test", test)):
        if part:
            summary[f"mean_length_ratio_{name}"] = reduction_stats(part, cb).mean_ratio
    atomic_write_text(run.report("dedup_summary.json"), json.dumps(summary, sort_keys=True, indent=2) + "\n")


def cmd_pretrain_lm(run: Run, args) -> None:
    tokenizer = Tokenizer.from_lexicon(run.lexicon)
    state = pretrain_lm(
        run.cfg.model_config(len(tokenizer)), run.lexicon, DEFAULT_TEMPLATES, run.cfg.pretrain_config(), tokenizer
    )
    state.save(run.path("base"))


def _finetune(run: Run, codebook: Codebook, train_samples, val_samples, dedup: bool):
    base = ModelState.load(run.path("base"))
    state = ModelState.for_finetuning(base, run.spec.d_vis, run.cfg.lora_config(), seed=run.cfg.seed, dedup=dedup)
    result = train(run.cfg.train_config(), train_samples, codebook, state, val_samples)
    return state, result


def cmd_train(run: Run, args) -> None:
    train_samples, val_samples, _ = run.splits()
    state, result = _finetune(run, run.codebook(), train_samples, val_samples, run.cfg.train.dedup)
    state.save(run.path("checkpoint"))
    atomic_write_text(run.report("train_log.csv"), result.log_csv())
    validation = {"best_step": result.best_step, "validation": result.validation}
    atomic_write_text(run.report("validation.json"), json.dumps(validation, sort_keys=True, indent=2) + "\n")


def _decode_tasks(run: Run, state: ModelState, codebook, samples, tasks):
    """Decode every (task, sample); samples run in a worker pool, results keep input order."""
    d = run.cfg.decode
    state.eval()

    def one(job):
        task, s = job
        words, hyp = transcribe(state, s, task, codebook, d.width, d.alpha, d.max_new_tokens)
        return s, words, hyp

    jobs = [(task, s) for task in tasks for s in samples]
    with ThreadPoolExecutor(max_workers=run.workers) as pool:
        results = list(pool.map(one, jobs))
    out = {}
    for (task, _), row in zip(jobs, results):
        out.setdefault(str(task), []).append(row)
    return out


def _tasks(run: Run, state: ModelState, names):
    if names:
        return [TaskKind.parse(n) for n in names]
    return all_tasks(state.tokenizer.languages)


def cmd_decode(run: Run, args) -> None:
    _, _, test = run.splits()
    state = run.checkpoint()
    decoded = _decode_tasks(run, state, run.codebook(), test, _tasks(run, state, args.task))
    records = [
        {"id": s.id, "task": name, "hypothesis": " ".join(words), "score": round(hyp.score, 6)}
        for name, rows in decoded.items()
        for s, words, hyp in rows
    ]
    atomic_write_text(run.report("decode.jsonl"), _json_lines(records))


def _sequence_length(state: ModelState, sample, codebook, dedup: bool) -> int:
    prompt = build_prompt(TaskKind.recognize(), state.tokenizer)
    visual = visual_features(sample, codebook, dedup)
    return len(prompt) + len(visual) + 1 + len(sample.transcript) + 1


def flops_per_epoch(state: ModelState, samples, codebook, dedup: bool) -> float:
    """Training FLOPs for one pass over ``samples`` on the recognition task."""
    return float(sum(flops_estimate(state.lm.config, _sequence_length(state, s, codebook, dedup)) for s in samples))


def evaluate(run: Run, state: ModelState, codebook: Codebook, train_samples, test) -> EvalReport:
    decoded = _decode_tasks(run, state, codebook, test, all_tasks(state.tokenizer.languages))
    rec = [words for _, words, _ in decoded["recognize"]]
    bleus = {}
    for lang in state.tokenizer.languages:
        hyps = [words for _, words, _ in decoded[f"translate:{lang}"]]
        bleus[lang] = round(bleu([s.translations[lang] for s in test], hyps), 4)
    buckets = bucketed_wer(test, rec, run.cfg.bucket_edges())
    ratio = reduction_stats(test, codebook).mean_ratio
    on = flops_per_epoch(state, train_samples, codebook, True)
    off = flops_per_epoch(state, train_samples, codebook, False)
    used = on if state.dedup else off
    return EvalReport(
        wer=round(corpus_wer([s.transcript for s in test], rec), 6),
        bleu=bleus,
        wer_by_length_bucket={k: (round(v, 6), n) for k, (v, n) in buckets.items()},
        homophene_accuracy=round(homophene_accuracy(test, rec, run.lexicon), 6),
        mean_length_ratio=ratio,
        flops_per_epoch=used,
        flops_reduction_pct=round(percent_decrease(off, on), 4),
        extra={
            "dedup": state.dedup,
            "n_test": len(test),
            "beam_width": run.cfg.decode.width,
            "length_penalty_alpha": run.cfg.decode.alpha,
            "nearest_prototype_homophene_accuracy": round(
                nearest_prototype_homophene_accuracy(test, run.spec, run.lexicon), 6
            ),
        },
    )


def cmd_eval(run: Run, args) -> None:
    train_samples, _, test = run.splits()
    report = evaluate(run, run.checkpoint(), run.codebook(), train_samples, test)
    atomic_write_text(run.report("eval.json"), report.to_json() + "\n")
    atomic_write_text(run.report("eval.csv"), report.to_csv())


def cmd_textualize(run: Run, args) -> None:
    _, _, test = run.splits()
    state = run.checkpoint().eval()
    cb = run.codebook()
    table = state.lm.tok_emb.weight.detach()
    records = []
    for s in test[: args.limit]:
        units = assign(cb, s.features)
        result = deduplicate(s.features, units)
        visual = result.reduced if state.dedup else s.features.frames
        with torch.no_grad():
            emb = project(state.projection, visual)
        ids = textualize(emb, table)
        records.append(
            {
                "id": s.id,
                "transcript": " ".join(s.transcript),
                "units": [int(u) for u in (result.reduced_units if state.dedup else units)],
                "tokens": state.tokenizer.decode(ids),
            }
        )
    atomic_write_text(run.report("textualize.jsonl"), _json_lines(records))


def cmd_sweep_clusters(run: Run, args) -> None:
    train_samples, val_samples, test = run.splits()
    ks = args.ks or run.cfg.quantizer.sweep
    header = [
        "k",
        "mean_length_ratio",
        "flops_per_epoch",
        "flops_reduction_pct",
        "wer",
        "mean_bleu",
        "homophene_accuracy",
    ]
    rows = []
    for k in ks:
        cb = _fit(run, train_samples, k, args.n_init)
        ratio = reduction_stats(train_samples + val_samples + test, cb).mean_ratio
        row = [k, f"{ratio:.4f}"]
        if args.skip_train:
            base = ModelState.load(run.path("base"))
            on = flops_per_epoch(base, train_samples, cb, True)
            off = flops_per_epoch(base, train_samples, cb, False)
            row += [f"{on:.6e}", f"{percent_decrease(off, on):.2f}", "", "", ""]
        else:
            state, _ = _finetune(run, cb, train_samples, val_samples, dedup=True)
            rep = evaluate(run, state, cb, train_samples, test)
            row += [
                f"{rep.flops_per_epoch:.6e}",
                f"{rep.flops_reduction_pct:.2f}",
                f"{rep.wer:.6f}",
                f"{np.mean(list(rep.bleu.values())):.4f}",
                f"{rep.homophene_accuracy:.6f}",
            ]
        rows.append(row)
        log.info("k=%d done", k)
    atomic_write_text(run.report("sweep_clusters.csv"), _rows_csv(header, rows))


COMMANDS = {
    "gen-corpus": (cmd_gen_corpus, "generate the synthetic viseme corpus"),
    "fit-units": (cmd_fit_units, "fit the k-means unit codebook on the training split"),
    "dedup-stats": (cmd_dedup_stats, "per-sample length reduction under the codebook"),
    "pretrain-lm": (cmd_pretrain_lm, "text-only pretraining of the base language model"),
    "train": (cmd_train, "fine-tune adapters and projection on recognition + translation"),
    "decode": (cmd_decode, "beam-decode the test split (JSON lines)"),
    "eval": (cmd_eval, "WER / BLEU / homophene / FLOPs report"),
    "textualize": (cmd_textualize, "nearest-token reading of projected visual features"),
    "sweep-clusters": (cmd_sweep_clusters, "compare codebook sizes"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (defaults apply when omitted)")
    common.add_argument("--out", type=Path, default=Path("."), help="directory for all artifacts")
    common.add_argument("--seed", type=int)
    common.add_argument("--k", type=int, help="codebook size")
    common.add_argument("--width", type=int, help="beam width")
    common.add_argument("--alpha", type=float, help="length penalty exponent")
    common.add_argument("--updates", type=int, help="training updates (train and pretrain-lm)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vspkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "gen-corpus":
            p.add_argument("--n", type=int, help="number of samples")
        if name == "decode":
            p.add_argument("--task", action="append", help="recognize or translate:LANG (repeatable)")
        if name == "textualize":
            p.add_argument("--limit", type=int, default=10)
        if name == "sweep-clusters":
            p.add_argument("--ks", type=lambda s: tuple(int(v) for v in s.split(",")), help="e.g. 50,200,2000")
            p.add_argument("--n-init", type=int, default=1)
            p.add_argument("--skip-train", action="store_true", help="ratio and FLOPs only")
    sub.add_parser("print-config", parents=[common], help="show the resolved config as YAML")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.from_dict({})
    if args.seed is not None:
        cfg.seed = args.seed
    if args.k is not None:
        cfg.quantizer.k = args.k
    if args.width is not None:
        cfg.decode.width = args.width
    if args.alpha is not None:
        cfg.decode.alpha = args.alpha
    if args.updates is not None:
        if args.command == "pretrain-lm":
            cfg.pretrain.updates = args.updates
        else:
            cfg.train.updates = args.updates
    if getattr(args, "n", None) is not None:
        cfg.corpus.n = args.n
    config_mod.validate(cfg)
    return cfg


def _worker_count() -> int:
    """Sample-level workers from VSPKIT_THREADS.

    Torch itself stays single-threaded: split reductions would make results
    depend on the thread count.
    """
    raw = os.environ.get("VSPKIT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"VSPKIT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("VSPKIT_THREADS must be >= 1")
    torch.set_num_threads(1)
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        workers = _worker_count()
        cfg = resolve_config(args)
        if args.command == "print-config":
            sys.stdout.write(cfg.to_yaml())
            return EXIT_OK
        COMMANDS[args.command][0](Run(cfg, args.out, workers), args)
    except VersionError as exc:
        print(f"vspkit: version error: {exc}", file=sys.stderr)
        return EXIT_VERSION
    except (ConfigError, CorpusFormatError, UnknownWordError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"vspkit: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDivergedError, RuntimeError, OSError) as exc:
        print(f"vspkit: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
