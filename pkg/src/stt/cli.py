"""Command-line entry point: stt <subcommand>.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every subcommand
validates its input paths before touching any output path, and all
randomness flows from --seed, so identical invocations produce identical
artifacts.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as dio
from . import evaluation, figures, verification
from . import model as m
from . import trainer
from .errors import ConfigError, SttError


@dataclass
class RunConfig:
    command: str
    features: Path | None = None
    captions: Path | None = None
    vocab: Path | None = None
    checkpoint: Path | None = None
    out: Path | None = None
    seed: int = 0
    mode: str = "global"
    profile: str = "paper"

    def require_inputs(self, *names: str) -> None:
        for name in names:
            path = getattr(self, name)
            if path is None:
                raise ConfigError(f"--{name} is required")
            if not Path(path).exists():
                raise ConfigError(f"--{name}: no such file {path}")

    def ensure_out(self) -> Path:
        if self.out is None:
            raise ConfigError("--out is required")
        out = Path(self.out)
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        try:
            probe.touch()
            probe.unlink()
        except OSError as exc:
            raise ConfigError(f"output directory {out} not writable: {exc}")
        return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stt",
        description="Train and evaluate a joint image-caption embedding model")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, features=False, captions=False, vocab=False,
               checkpoint=False, out=False):
        if features:
            p.add_argument("--features", type=Path, required=True,
                           help="STTF feature file")
        if captions:
            p.add_argument("--captions", type=Path, required=True,
                           help="JSONL caption file")
        if vocab:
            p.add_argument("--vocab", type=Path,
                           help="vocabulary file (default: next to checkpoint)")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, required=True)
        if out:
            p.add_argument("--out", type=Path, required=True,
                           help="output directory")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("build-vocab", help="build a vocabulary file")
    common(p, captions=True)
    p.add_argument("--out", type=Path, required=True, help="vocabulary path")
    p.add_argument("--min-freq", type=int, default=4)

    p = sub.add_parser("train", help="train a model")
    common(p, features=True, captions=True, vocab=True, out=True)
    p.add_argument("--profile", choices=sorted(m.PROFILES), default="paper")
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--mode", choices=["global", "attention"], default="global")
    p.add_argument("--min-freq", type=int, default=None,
                   help="vocab threshold when --vocab is not given")
    for flag, kind in (("--epochs", int), ("--batch-size", int),
                       ("--lr", float), ("--margin", float)):
        p.add_argument(flag, type=kind, default=None)
    p.add_argument("--negative-mode", choices=["sum", "hardest"], default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")

    p = sub.add_parser("eval-retrieval", help="cross-modal retrieval metrics")
    common(p, features=True, captions=True, vocab=True, checkpoint=True, out=True)
    p.add_argument("--folds", type=int, default=1)
    p.add_argument("--mode", choices=["global", "attention"], default="global")
    p.add_argument("--attention-agg", choices=["mean", "lse"], default="mean")

    p = sub.add_parser("eval-caption", help="image captioning metrics")
    common(p, features=True, captions=True, vocab=True, checkpoint=True, out=True)
    p.add_argument("--mode", choices=["global", "attention"], default="global")

    p = sub.add_parser("eval-paraphrase", help="sentence paraphrasing metrics")
    common(p, captions=True, vocab=True, checkpoint=True, out=True)

    p = sub.add_parser("generate",
                       help="decode a caption or paraphrase and show retrievals")
    common(p, vocab=True, checkpoint=True)
    p.add_argument("--features", type=Path)
    p.add_argument("--captions", type=Path,
                   help="caption pool for the retrieval listing")
    p.add_argument("--image-id", type=int)
    p.add_argument("--caption", type=str)
    p.add_argument("--mode", choices=["global", "attention"], default="global")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    return parser


def _load_vocab(args) -> dio.Vocabulary:
    path = args.vocab
    if path is None and getattr(args, "checkpoint", None):
        candidate = Path(args.checkpoint).parent / "vocab.tsv"
        if candidate.exists():
            path = candidate
    if path is None or not Path(path).exists():
        raise ConfigError("--vocab: vocabulary file not found")
    return dio.Vocabulary.load(path)


def _load_model(args, vocab: dio.Vocabulary) -> m.ModelParams:
    ckpt = trainer.load_checkpoint(args.checkpoint,
                                   expect_vocab_hash=vocab.content_hash())
    return ckpt.to_params()


def _write_report(report: dict, out: Path, stem: str) -> None:
    """JSON + plain-text table + CSV, deterministically ordered."""
    scalar = {k: v for k, v in report.items()
              if isinstance(v, (int, float, str))}
    with open(out / f"{stem}.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key in sorted(scalar):
            writer.writerow([key, scalar[key]])
    width = max(len(k) for k in scalar)
    lines = [f"{k.ljust(width)}  {scalar[k]:.4f}" if isinstance(scalar[k], float)
             else f"{k.ljust(width)}  {scalar[k]}" for k in sorted(scalar)]
    (out / f"{stem}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


def _cmd_build_vocab(args) -> int:
    cfg = RunConfig(command="build-vocab", captions=args.captions)
    cfg.require_inputs("captions")
    captions = dio.load_captions(args.captions)
    vocab = dio.build_vocab(captions, min_freq=args.min_freq)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    vocab.save(args.out)
    print(f"{len(vocab)} tokens -> {args.out}")
    return 0


def _resolve_hyper(args) -> tuple[m.HyperParams, dict]:
    """Profile -> config file -> explicit flags, later wins."""
    fields = m.PROFILES[args.profile].to_dict()
    run: dict = {"seed": 0, "mode": "global", "checkpoint_every": 1}
    if args.config:
        doc = trainer.load_config(args.config)
        fields.update(doc.get("hyperparams", {}))
        for key in ("seed", "mode", "checkpoint_every"):
            if key in doc:
                run[key] = doc[key]
    overrides = {"epochs": args.epochs, "batch_size": args.batch_size,
                 "learning_rate": args.lr, "margin": args.margin,
                 "negative_mode": args.negative_mode}
    fields.update({k: v for k, v in overrides.items() if v is not None})
    if args.seed is not None:
        run["seed"] = args.seed
    if args.mode != "global":
        run["mode"] = args.mode
    if args.checkpoint_every:
        run["checkpoint_every"] = args.checkpoint_every
    return m.HyperParams.from_dict(fields), run


def _cmd_train(args) -> int:
    cfg = RunConfig(command="train", features=args.features,
                    captions=args.captions, out=args.out, seed=args.seed,
                    mode=args.mode, profile=args.profile)
    cfg.require_inputs("features", "captions")
    if args.config and not Path(args.config).exists():
        raise ConfigError(f"--config: no such file {args.config}")
    if args.resume and not Path(args.resume).exists():
        raise ConfigError(f"--resume: no such file {args.resume}")
    out = cfg.ensure_out()

    hyper, run = _resolve_hyper(args)
    store = dio.read_feature_file(args.features)
    captions = dio.load_captions(args.captions)
    if args.vocab:
        cfg.vocab = args.vocab
        cfg.require_inputs("vocab")
        vocab = dio.Vocabulary.load(args.vocab)
    else:
        min_freq = args.min_freq
        if min_freq is None:
            min_freq = 1 if args.profile == "toy" else 4
        vocab = dio.build_vocab(captions, min_freq=min_freq)
    vocab.save(out / "vocab.tsv")
    samples = dio.make_samples(captions, vocab)

    settings = trainer.TrainSettings(
        hyper=hyper, seed=run["seed"], mode=run["mode"], out_dir=out,
        checkpoint_every=run["checkpoint_every"],
        vocab_hash=vocab.content_hash())
    resume = trainer.load_checkpoint(args.resume) if args.resume else None

    echo = {"hyperparams": hyper.to_dict(), "seed": run["seed"],
            "mode": run["mode"], "profile": args.profile}
    (out / "config.json").write_text(
        json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    ckpt, rows = trainer.train(settings, store, samples, len(vocab),
                               resume_from=resume)
    if rows:
        figures.plot_training_log(out / "log.csv", out / "loss_curve.png")
        print(f"{len(rows)} iterations, final total loss {rows[-1][4]:.4f}")
    print(f"checkpoint -> {out / 'final.sttc'}")
    return 0


def _cmd_eval_retrieval(args) -> int:
    cfg = RunConfig(command="eval-retrieval", features=args.features,
                    captions=args.captions, checkpoint=args.checkpoint)
    cfg.require_inputs("features", "captions", "checkpoint")
    out = RunConfig(command="x", out=args.out).ensure_out()
    vocab = _load_vocab(args)
    params = _load_model(args, vocab)
    store = dio.read_feature_file(args.features)
    captions = dio.load_captions(args.captions)
    report = evaluation.eval_retrieval(params, store, captions, vocab,
                                       mode=args.mode, folds=args.folds,
                                       aggregation=args.attention_agg)
    report["checkpoint"] = str(args.checkpoint)
    _write_report(report, out, "retrieval")
    figures.plot_retrieval_report(report, out / "recall.png")
    return 0


def _cmd_eval_caption(args) -> int:
    cfg = RunConfig(command="eval-caption", features=args.features,
                    captions=args.captions, checkpoint=args.checkpoint)
    cfg.require_inputs("features", "captions", "checkpoint")
    out = RunConfig(command="x", out=args.out).ensure_out()
    vocab = _load_vocab(args)
    params = _load_model(args, vocab)
    store = dio.read_feature_file(args.features)
    captions = dio.load_captions(args.captions)
    report = evaluation.eval_caption_task(params, store, captions, vocab,
                                          mode=args.mode)
    report["checkpoint"] = str(args.checkpoint)
    _write_report(report, out, "caption")
    figures.plot_generation_report(report, out / "caption_scores.png",
                                   "image captioning")
    return 0


def _cmd_eval_paraphrase(args) -> int:
    cfg = RunConfig(command="eval-paraphrase", captions=args.captions,
                    checkpoint=args.checkpoint)
    cfg.require_inputs("captions", "checkpoint")
    out = RunConfig(command="x", out=args.out).ensure_out()
    vocab = _load_vocab(args)
    params = _load_model(args, vocab)
    captions = dio.load_captions(args.captions)
    report = evaluation.eval_paraphrase_task(params, captions, vocab)
    report["checkpoint"] = str(args.checkpoint)
    _write_report(report, out, "paraphrase")
    figures.plot_generation_report(report, out / "paraphrase_scores.png",
                                   "sentence paraphrasing")
    return 0


def _top_retrievals(query_emb: np.ndarray, captions: dict[int, list[str]],
                    vocab: dio.Vocabulary, params: m.ModelParams,
                    k: int = 5) -> list[tuple[float, str]]:
    scored = []
    for image_id in sorted(captions):
        for cap in captions[image_id]:
            ids = dio.tokenize(cap, vocab)
            if len(ids) <= 2:
                continue
            emb, _ = m.encode_sentence(ids, params)
            scored.append((float(query_emb @ emb.data), cap))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return scored[:k]


def _cmd_generate(args) -> int:
    if (args.image_id is None) == (args.caption is None):
        raise ConfigError("generate: give exactly one of --image-id / --caption")
    cfg = RunConfig(command="generate", checkpoint=args.checkpoint)
    cfg.require_inputs("checkpoint")
    vocab = _load_vocab(args)
    params = _load_model(args, vocab)

    if args.image_id is not None:
        if not args.features or not Path(args.features).exists():
            raise ConfigError("generate --image-id needs --features")
        store = dio.read_feature_file(args.features)
        source = evaluation.decode_source(params, store.get(args.image_id),
                                           args.mode)
        query = source.data.reshape(-1)
        query = query / np.linalg.norm(query)
        label = f"image {args.image_id}"
    else:
        ids = dio.tokenize(args.caption, vocab)
        if len(ids) <= 2:
            raise ConfigError("generate: caption is empty after tokenization")
        emb, _ = m.encode_sentence(ids, params)
        source = emb
        query = emb.data
        label = "caption query"

    decoded = m.decode_greedy(source, params, params.hyper.max_decode_len)
    print(f"{label} -> {dio.detokenize(decoded, vocab) or '<empty>'}")
    if args.captions and Path(args.captions).exists():
        captions = dio.load_captions(args.captions)
        print("top retrieved captions:")
        for score, cap in _top_retrievals(query, captions, vocab, params):
            print(f"  {score:+.4f}  {cap}")
    return 0


def _cmd_gradcheck(args) -> int:
    reports = verification.run_all(instances=args.instances, seed=args.seed)
    width = max(len(r["kind"]) for r in reports)
    ok = True
    for r in reports:
        status = "PASS" if r["pass"] else "FAIL"
        print(f"{r['kind'].ljust(width)}  {r['max_rel_err']:.3e}  {status}")
        ok = ok and r["pass"]
    print(f"{'all checks pass' if ok else 'FAILURES PRESENT'}")
    return 0 if ok else 1


_COMMANDS = {
    "build-vocab": _cmd_build_vocab,
    "train": _cmd_train,
    "eval-retrieval": _cmd_eval_retrieval,
    "eval-caption": _cmd_eval_caption,
    "eval-paraphrase": _cmd_eval_paraphrase,
    "generate": _cmd_generate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except SttError as exc:
        print(f"stt: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
