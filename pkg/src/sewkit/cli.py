"""Command-line harness: efficiency analysis, toy pre-training and
fine-tuning on synthetic tones or WAV files, decoding, and benchmarking.

Every command is deterministic given its arguments and seed; logs are one
JSON object per line. Exit codes: 0 success, 2 usage/config error, 3 data
error, 4 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import ctc as ctc_mod
from . import pretrain as pt
from .audio import load_wav
from .checkpoint import (CheckpointData, check_config_match, load_checkpoint,
                         restore_params, save_checkpoint, tensors_of)
from .errors import ConfigError, DataError, DivergenceError, SewkitError
from .optim import Adam
from .profiler import param_count, rate_trace
from .registry import ModelConfig, build_model, resolve_config
from .synth import SynthCorpus, SynthSpec
from .wfe import flops_report


def _emit(stream, obj):
    stream.write(json.dumps(obj, sort_keys=True) + "\n")
    stream.flush()


def _resolve_from_args(args) -> ModelConfig:
    if getattr(args, "config_file", None):
        return resolve_config(args.config_file)
    if getattr(args, "config", None):
        return resolve_config(args.config)
    raise ConfigError("one of --config or --config-file is required")


def _open_log(args):
    if getattr(args, "log", None):
        return open(args.log, "w", encoding="utf-8")
    return sys.stdout


# -- analyze ------------------------------------------------------------------


def cmd_analyze(args) -> int:
    config = _resolve_from_args(args)
    t_input = int(round(args.seconds * config.sample_rate))
    report = flops_report(config.wfe, t_input, batch=args.batch,
                          convention=args.convention)
    counts = param_count(config)
    trace = rate_trace(config)
    if args.format == "json":
        payload = {
            "config": config.name,
            "input_seconds": args.seconds,
            "flops": report.to_dict(),
            "params": counts.to_dict(),
            "frame_trace": trace,
        }
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    else:
        lines = [report.to_csv()]
        lines.append("\nsection,key,value\n")
        for part, val in sorted(counts.by_part.items()):
            lines.append(f"params,{part},{val}\n")
        lines.append(f"params,total,{counts.total}\n")
        for key, val in trace.items():
            lines.append(f"frame_trace,{key},{val}\n")
        text = "".join(lines)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# -- corpora --------------------------------------------------------------------


def _synth_spec_from_args(args) -> SynthSpec:
    return SynthSpec(alphabet=args.alphabet)


def _load_wav_dir(path):
    names = sorted(n for n in os.listdir(path) if n.lower().endswith(".wav"))
    if not names:
        raise DataError(f"no .wav files under {path}", field="corpus")
    return [load_wav(os.path.join(path, n)).samples for n in names]


# -- pretrain --------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    config = _resolve_from_args(args)
    model = build_model(config, args.seed)
    hyper = pt.PretrainHyper(
        mask=config.mask,
        num_negatives=args.negatives,
        contrastive_temp=args.kappa,
        diversity_weight=args.alpha,
        peak_lr=args.peak_lr,
        warmup_steps=args.warmup,
        total_steps=args.total_steps or args.steps,
    )
    if args.corpus == "synthetic":
        corpus = SynthCorpus(_synth_spec_from_args(args), args.corpus_size, args.seed)
        waves = [corpus.waveform(i) for i in range(len(corpus))]
    else:
        waves = _load_wav_dir(args.wav_dir)
    opt = Adam(model.named_params(), weight_decay=args.weight_decay)
    log = _open_log(args)

    def batch_at(step):
        base = step * args.batch_size
        return [waves[(base + j) % len(waves)] for j in range(args.batch_size)]

    try:
        for step in range(args.steps):
            stats = pt.pretrain_step(batch_at(step), model, opt, hyper,
                                     step=step, seed=args.seed,
                                     micro_batches=args.micro_batches)
            _emit(log, {"step": step, "lr": stats.lr, "L": stats.loss,
                        "L_m": stats.contrastive, "L_d": stats.diversity,
                        "codebook_perplexity": stats.codebook_perplexity,
                        "masked_fraction": stats.masked_fraction})
    except DivergenceError as exc:
        if args.out:
            _save_pretrained(args.out + ".diverged", model, opt, args, hyper, step)
            print(f"divergence: {exc}; partial checkpoint saved to "
                  f"{args.out}.diverged", file=sys.stderr)
        raise
    finally:
        if log is not sys.stdout:
            log.close()
    if args.out:
        _save_pretrained(args.out, model, opt, args, hyper, args.steps)
    return 0


def _save_pretrained(path, model, opt, args, hyper, step):
    tensors = tensors_of(model.named_params())
    tensors.update(opt.state_arrays())
    save_checkpoint(path, CheckpointData(
        config_flat=model.config.to_flat(),
        tensors=tensors,
        step=step,
        kind="pretrained",
        rng_state={"seed": args.seed},
        meta={"hyper": dataclasses.asdict(hyper), "alphabet": args.alphabet},
    ))


# -- finetune ---------------------------------------------------------------------


def cmd_finetune(args) -> int:
    data = load_checkpoint(args.checkpoint)
    config = ModelConfig.from_flat(data.config_flat)
    model = build_model(config, args.seed)
    check_config_match(model.config.to_flat(), data.config_flat)
    model_tensors = {k: v for k, v in data.tensors.items() if not k.startswith(("adam.", "ctc_head."))}
    restore_params(model.named_params(), model_tensors)

    corpus = SynthCorpus(_synth_spec_from_args(args), args.corpus_size, args.corpus_seed)
    vocab = corpus.spec.alphabet
    if data.kind == "finetuned" and data.vocab != vocab:
        raise DataError(f"checkpoint vocabulary {data.vocab!r} does not match corpus "
                        f"alphabet {vocab!r}", field="vocab")
    examples = [(corpus.waveform(i), corpus.label_ids(i)) for i in range(len(corpus))]

    rng = np.random.default_rng(args.seed + 1)
    head = ctc_mod.CtcHead(config.context.width, len(vocab), rng,
                           upsample=args.ft_upsample)
    start_step = 0
    if data.kind == "finetuned":
        restore_params(head.named_params(), data.tensors, strict=False)
        start_step = data.step

    trainable = model.context.named_params("context.") + head.named_params()
    opt = Adam(trainable, weight_decay=args.weight_decay)
    if data.kind == "finetuned":
        for key, arr in data.tensors.items():
            if key.startswith("adam.m."):
                name = key[len("adam.m."):]
                if name in opt.m and opt.m[name].shape == arr.shape:
                    opt.m[name] = arr.astype(np.float64) if opt.m[name].dtype == np.float64 else arr.copy()
            if key.startswith("adam.v."):
                name = key[len("adam.v."):]
                if name in opt.v and opt.v[name].shape == arr.shape:
                    opt.v[name] = arr.copy()

    hyper = ctc_mod.FinetuneHyper(peak_lr=args.peak_lr,
                                  total_steps=args.total_steps or (start_step + args.steps),
                                  freeze_steps=args.freeze_steps)
    log = _open_log(args)
    data_rng = np.random.default_rng(np.random.SeedSequence(entropy=args.seed,
                                                            spawn_key=(905,)))
    try:
        for step in range(start_step, start_step + args.steps):
            idx = data_rng.integers(0, len(examples), size=args.batch_size)
            batch = [examples[i] for i in idx]
            stats = ctc_mod.finetune_step(batch, model, head, opt, hyper,
                                          step=step, seed=args.seed)
            line = dict(stats)
            if args.eval_every and (step + 1) % args.eval_every == 0:
                line["train_exact_match"] = train_exact_match(model, head, examples)
            _emit(log, line)
    except DivergenceError as exc:
        if args.out:
            _save_finetuned(args.out + ".diverged", model, head, opt, vocab, args, step)
            print(f"divergence: {exc}; partial checkpoint saved", file=sys.stderr)
        raise
    finally:
        if log is not sys.stdout:
            log.close()
    if args.out:
        _save_finetuned(args.out, model, head, opt, vocab, args,
                        start_step + args.steps)
    return 0


def train_exact_match(model, head, examples) -> float:
    hits = 0
    for wave, labels in examples:
        logits = ctc_mod.finetune_logits(model, head, wave, train=False)
        if list(ctc_mod.greedy_decode(logits).tokens) == list(labels):
            hits += 1
    return hits / len(examples)


def _save_finetuned(path, model, head, opt, vocab, args, step):
    tensors = tensors_of(model.named_params())
    tensors.update(tensors_of(head.named_params()))
    tensors.update(opt.state_arrays())
    save_checkpoint(path, CheckpointData(
        config_flat=model.config.to_flat(),
        tensors=tensors,
        step=step,
        kind="finetuned",
        vocab=vocab,
        rng_state={"seed": args.seed},
        meta={"ft_upsample": args.ft_upsample, "alphabet": vocab,
              "corpus_seed": args.corpus_seed, "corpus_size": args.corpus_size},
    ))


# -- decode -----------------------------------------------------------------------


def cmd_decode(args) -> int:
    data = load_checkpoint(args.checkpoint)
    if data.kind != "finetuned" or data.vocab is None:
        raise DataError("checkpoint has no CTC head; fine-tune it first", field="kind")
    config = ModelConfig.from_flat(data.config_flat)
    model = build_model(config, 0)
    model_tensors = {k: v for k, v in data.tensors.items()
                     if not k.startswith(("adam.", "ctc_head."))}
    restore_params(model.named_params(), model_tensors)
    head = ctc_mod.CtcHead(config.context.width, len(data.vocab),
                           np.random.default_rng(0),
                           upsample=int(data.meta.get("ft_upsample", 1)))
    restore_params(head.named_params(),
                   {k: v for k, v in data.tensors.items() if k.startswith("ctc_head.")})

    if args.wav:
        wave = load_wav(args.wav, expected_rate=config.sample_rate).samples
        utt_id = os.path.basename(args.wav)
    elif args.synth_id is not None:
        corpus = SynthCorpus(SynthSpec(alphabet=data.vocab),
                             int(data.meta.get("corpus_size", args.synth_id + 1)),
                             int(data.meta.get("corpus_seed", 0)))
        wave = corpus.waveform(args.synth_id)
        utt_id = f"synth-{args.synth_id}"
    else:
        raise ConfigError("decode needs --wav or --synth-id")

    logits = ctc_mod.finetune_logits(model, head, wave, train=False)
    if args.mode == "greedy":
        res = ctc_mod.greedy_decode(logits)
    else:
        res = ctc_mod.exact_decode(logits)
    hypothesis = "".join(data.vocab[tok - 1] for tok in res.tokens)
    _emit(sys.stdout, {"utterance_id": utt_id, "hypothesis": hypothesis,
                       "log_prob": res.log_prob, "mode": res.mode})
    return 0


# -- bench ------------------------------------------------------------------------


def cmd_bench(args) -> int:
    config = _resolve_from_args(args)
    model = build_model(config, args.seed)
    corpus = SynthCorpus(SynthSpec(), 8, args.seed)
    waves = [corpus.waveform(i) for i in range(len(corpus))]
    times = []
    for _ in range(args.trials):
        start = time.perf_counter()
        for wave in waves:
            model.encode(wave)
        times.append((time.perf_counter() - start) / len(waves))
    _emit(sys.stdout, {"config": config.name, "trials": args.trials,
                       "per_utterance_seconds_mean": float(np.mean(times)),
                       "per_utterance_seconds_std": float(np.std(times))})
    return 0


# -- parser -----------------------------------------------------------------------


def _add_config_flags(p):
    p.add_argument("--config", help="registry configuration name")
    p.add_argument("--config-file", help="flat key/value configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sewkit",
                                     description="speech pretraining desk harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="FLOPs/parameter/frame-rate report")
    _add_config_flags(p)
    p.add_argument("--seconds", type=float, default=10.0)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--convention", choices=["MAC", "2MAC"], default="MAC")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("pretrain", help="self-supervised training loop")
    _add_config_flags(p)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="checkpoint directory to write")
    p.add_argument("--log", help="JSONL log path (default stdout)")
    p.add_argument("--corpus", choices=["synthetic", "wav_dir"], default="synthetic")
    p.add_argument("--wav-dir")
    p.add_argument("--corpus-size", type=int, default=32)
    p.add_argument("--alphabet", default="abcde")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--micro-batches", type=int, default=1)
    # objective/optimizer knobs; defaults are the desk-scale ones, the
    # published large-scale values are all reachable here
    p.add_argument("--negatives", type=int, default=20)
    p.add_argument("--kappa", type=float, default=0.25)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--peak-lr", type=float, default=2e-3)
    p.add_argument("--warmup", type=int, default=30)
    p.add_argument("--total-steps", type=int, default=0,
                   help="schedule horizon (defaults to --steps)")
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="CTC fine-tuning on labeled tones")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--log")
    p.add_argument("--alphabet", default="abcde")
    p.add_argument("--corpus-size", type=int, default=64)
    p.add_argument("--corpus-seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--freeze-steps", type=int, default=100)
    p.add_argument("--ft-upsample", type=int, default=1)
    p.add_argument("--peak-lr", type=float, default=5e-3)
    p.add_argument("--total-steps", type=int, default=0)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--eval-every", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("decode", help="decode a WAV file or a synthetic utterance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav")
    p.add_argument("--synth-id", type=int)
    p.add_argument("--mode", choices=["greedy", "exact"], default="greedy")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="wall-clock per-utterance forward time")
    _add_config_flags(p)
    p.add_argument("--seconds", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, SewkitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
