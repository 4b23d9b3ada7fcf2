"""Command-line entry points (``python -m singstyle <command>``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_model, read_checkpoint
from .config import Config
from .corpus import GlobalStyleLabel, Note, load_corpus, resolve_manifest
from .infer import evaluate, infer_control, infer_transfer
from .synthetic import SynthCorpusConfig, make_synthetic_corpus
from .train import set_deterministic, train_stage1, train_stage2


def read_score(path):
    """JSON ``{"phonemes": [...], "notes": [{"pitch", "type", "dur_sec"}, ...]}``."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    notes = [Note(int(n["pitch"]), n["type"], float(n["dur_sec"])) for n in obj["notes"]]
    return [int(p) for p in obj["phonemes"]], notes


def read_techniques(path):
    """JSON list with one list of technique names per phoneme."""
    return [frozenset(ts) for ts in json.loads(Path(path).read_text(encoding="utf-8"))]


def _config(path) -> Config:
    return Config.load(path) if path else Config()


def _corpus_for(args):
    """Records of ``--corpus`` or, failing that, of the corpus the checkpoint was trained on."""
    src = args.corpus or read_checkpoint(args.ckpt).get("meta", {}).get("corpus")
    if not src:
        raise SystemExit("no corpus: pass --corpus")
    return load_corpus(resolve_manifest(src))


def _find(records, utt_id):
    for r in records:
        if r.utt_id == utt_id:
            return r
    raise SystemExit(f"utterance {utt_id!r} not in corpus")


def cmd_make_synthetic(args):
    cfg = SynthCorpusConfig(n_singers=args.singers, n_utterances=args.utts)
    path = make_synthetic_corpus(cfg, args.seed, args.out)
    print(path)


def cmd_train_stage1(args):
    manifest = resolve_manifest(args.corpus)
    records = load_corpus(manifest)
    train_stage1(records, _config(args.config), args.out, meta={"corpus": str(manifest.resolve())})
    print(args.out)


def cmd_train_stage2(args):
    manifest = resolve_manifest(args.corpus)
    records = load_corpus(manifest)
    cfg = Config.load(args.config) if args.config else None
    train_stage2(records, args.init, cfg, args.out, meta={"corpus": str(manifest.resolve())})
    print(args.out)


def cmd_synth_transfer(args):
    model = load_model(args.ckpt, min_stage=2)
    prompt = _find(_corpus_for(args), args.prompt)
    phonemes, notes = read_score(args.score)
    out = infer_transfer(model, prompt, phonemes, notes, args.seed)
    print(out.save(args.out, args.name))


def cmd_synth_control(args):
    model = load_model(args.ckpt, min_stage=2)
    ref = _find(_corpus_for(args), args.timbre_ref)
    phonemes, notes = read_score(args.score)
    techniques = read_techniques(args.techniques) if args.techniques else [frozenset()] * len(phonemes)
    label = GlobalStyleLabel(args.method, args.emotion)
    out = infer_control(model, ref, label, techniques, phonemes, notes, args.seed)
    print(out.save(args.out, args.name))


def cmd_eval(args):
    model = load_model(args.ckpt)
    records = load_corpus(resolve_manifest(args.split))
    report = evaluate(model, records, args.seed)
    Path(args.report).write_text(report.to_json(), encoding="utf-8")
    print(json.dumps(json.loads(report.to_json())["summary"]))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="singstyle", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--singers", type=int, default=4)
    p.add_argument("--utts", type=int, default=32)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train-stage1", help="reconstruction training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="style/duration LM training on a frozen stage-1 model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_stage2)

    for name, func in (("synth-transfer", cmd_synth_transfer), ("synth-control", cmd_synth_control)):
        p = sub.add_parser(name)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--score", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.add_argument("--name", default="output", help="basename of the mel and sidecar files")
        p.add_argument("--corpus", help="corpus holding the prompt (default: the training corpus)")
        if name == "synth-transfer":
            p.add_argument("--prompt", required=True, help="utterance id of the audio prompt")
        else:
            p.add_argument("--timbre-ref", required=True)
            p.add_argument("--method", choices=("pop", "bel_canto"), required=True)
            p.add_argument("--emotion", choices=("happy", "sad"), required=True)
            p.add_argument("--techniques")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="reconstruction metrics over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    set_deterministic()
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
