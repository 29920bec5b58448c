"""noisycnn command line: corrupt, train, eval, inspect-noise, probe, make-synthetic."""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import noisegen as ng
from .experiment import (ConfigError, ExperimentConfig, NoiseSpec, OutputDir, features_csv, load_config,
                         run_experiment, stream)
from .model import load_checkpoint, response_matrix
from .textpipe import DataFormatError, SyntheticSpec, Vocab, load_tsv, make_dataset, synthetic_texts
from .train import evaluate_clean, extract_features, linear_probe

log = logging.getLogger("noisycnn")


class CommandError(Exception):
    pass


def _matrix_text(m) -> str:
    buf = io.StringIO()
    for row in np.asarray(m):
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def _noise_from_flags(args, k) -> ng.TransitionMatrix:
    if args.kind in ("uniform", "random") and args.p is None:
        raise CommandError(f"--p is required for --kind {args.kind}")
    if args.kind == "custom" and not args.matrix:
        raise CommandError("--matrix is required for --kind custom")
    spec = NoiseSpec(kind=args.kind, p=args.p or 0.0, matrix=args.matrix or "")
    if args.kind in ("uniform", "random") and not 0.0 <= spec.p <= 1.0:
        raise CommandError(f"--p must lie in [0, 1], got {spec.p}")
    return spec.build(k, stream(args.seed, "matrix"))


# ------------------------------------------------------------- commands

def cmd_corrupt(args) -> int:
    labels, noisy, texts, label_map = load_tsv(args.input)
    if noisy is not None:
        raise CommandError(f"{args.input}: already has a noisy-label column")
    k = args.k or len(label_map)
    if k != len(label_map):
        raise CommandError(f"--k {k} does not match the {len(label_map)} labels in {args.input}")
    phi = _noise_from_flags(args, k)
    names = sorted(label_map, key=label_map.__getitem__)
    y = np.asarray(labels, dtype=np.int64)
    y_noisy = ng.sample_noisy(y, phi, stream(args.seed, "corruption"))
    with OutputDir(args.out) as out:
        with out.file(Path(args.input).name).open("w", encoding="utf-8", newline="\n") as fh:
            for a, b, text in zip(y, y_noisy, texts):
                fh.write(f"{names[a]}\t{names[b]}\t{text}\n")
        ng.save_matrix_csv(out.file("phi.csv"), phi.phi)
    print(f"flip fraction {ng.flip_fraction(y, y_noisy):.4f} over {len(y)} labels")
    return 0


def _load_experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.repeats is not None:
        changes["repeats"] = args.repeats
    return replace(cfg, **changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    summary = run_experiment(cfg, args.out, feature_kind=args.features)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _encode_for(ck, path, need_noisy=False):
    labels, noisy, texts, label_map = load_tsv(path)
    names = ck.label_names
    unknown = sorted(set(label_map) - set(names))
    if unknown:
        raise CommandError(f"{path}: labels {unknown} not in the checkpoint's label set {names}")
    if len(label_map) != ck.config.k:
        raise CommandError(f"{path}: has {len(label_map)} labels but the checkpoint has K={ck.config.k}")
    if need_noisy and noisy is None:
        raise CommandError(f"{path}: expected 3 columns (clean, noisy, text)")
    # re-index through the checkpoint's own label order
    inv = {name: i for i, name in enumerate(names)}
    fwd = {idx: inv[name] for name, idx in label_map.items()}
    y = [fwd[v] for v in labels]
    yn = None if noisy is None else [fwd[v] for v in noisy]
    vocab = Vocab(dict(ck.vocab))
    split = "train" if yn is not None else "test"
    return make_dataset(texts, y, vocab, ck.config.t_fixed, ck.config.k, split, yn, names)


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    test = _encode_for(ck, args.test)
    if test.noisy_labels is not None:
        test = replace(test, noisy_labels=None, split="test")
    acc = evaluate_clean(test, ck.params, ck.config)
    print(json.dumps({"accuracy": acc, "n": len(test)}))
    return 0


def cmd_inspect_noise(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if ck.psi is None:
        raise CommandError(f"{args.checkpoint}: no noise layer (wonm checkpoint)")
    resp = ng.column_normalize(response_matrix(ck.psi))
    out = [f"psi_fro,{ng.frobenius_norm(ck.psi)!r}", "# psi", _matrix_text(ck.psi).rstrip("\n"),
           "# response", _matrix_text(resp).rstrip("\n")]
    if args.matrix:
        phi = ng.load_transition_csv(args.matrix)
        if phi.k != ck.config.k:
            raise CommandError(f"{args.matrix}: {phi.k} classes, checkpoint has {ck.config.k}")
        out.append(f"pearson,{ng.pearson(resp, phi.phi)!r}")
    print("\n".join(out))
    return 0


def probe_table(ck_a, ck_b, train_path, test_path, kind="pooled", seed=0):
    """Table-4 layout: rows TRB/TRPr features, columns probe targets (noisy, true)."""
    if ck_a.label_names != ck_b.label_names:
        raise CommandError("checkpoints disagree on the label set")
    if ck_a.vocab != ck_b.vocab or ck_a.config.t_fixed != ck_b.config.t_fixed:
        raise CommandError("checkpoints disagree on the vocabulary")
    tr = _encode_for(ck_a, train_path, need_noisy=True)
    te = _encode_for(ck_a, test_path)
    rows = []
    for name, ck in (("TRB", ck_a), ("TRPr", ck_b)):
        ftr = extract_features(tr, ck.params, ck.config, kind=kind)
        fte = extract_features(te, ck.params, ck.config, kind=kind)
        accs = [linear_probe(ftr, targets, fte, te.labels, ck.config.k, rng=stream(seed, "probe"))
                for targets in (tr.noisy_labels, tr.labels)]
        rows.append((name, *accs))
    return rows


def cmd_probe(args) -> int:
    ck_a, ck_b = load_checkpoint(args.baseline), load_checkpoint(args.proposed)
    rows = probe_table(ck_a, ck_b, args.train, args.test, args.features, args.seed or 0)
    text = "features,noisy,true\n" + "".join(f"{n},{a!r},{b!r}\n" for n, a, b in rows)
    if args.out:
        tr = _encode_for(ck_a, args.train, need_noisy=True)
        with OutputDir(args.out) as out:
            out.write_text("probe.csv", text)
            for tag, ck in (("baseline", ck_a), ("proposed", ck_b)):
                feats = extract_features(tr, ck.params, ck.config, kind=args.features)
                out.write_text(f"features_{tag}.csv", features_csv(tr, feats))
    sys.stdout.write(text)
    return 0


def cmd_make_synthetic(args) -> int:
    spec = SyntheticSpec()
    if args.config:
        spec = load_config(args.config).data.synthetic
    if args.k:
        spec = replace(spec, k=args.k)
    raw = synthetic_texts(spec, stream(args.seed or 0, "data"))
    names = [f"class{c}" for c in range(spec.k)]
    with OutputDir(args.out) as out:
        for split, (labels, texts) in raw.items():
            with out.file(f"{split}.tsv").open("w", encoding="utf-8", newline="\n") as fh:
                for y, text in zip(labels, texts):
                    fh.write(f"{names[y]}\t{text}\n")
    print(f"wrote {sum(len(v[0]) for v in raw.values())} examples to {args.out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="noisycnn", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corrupt", help="inject class-conditional label noise into a 2-column TSV")
    p.add_argument("input")
    p.add_argument("--kind", choices=("uniform", "random", "custom"), required=True)
    p.add_argument("--p", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--matrix")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="train one variant from an ini config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--features", choices=("pooled", "logits"), default="pooled")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clean-test accuracy of a checkpoint's base network")
    p.add_argument("checkpoint")
    p.add_argument("test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-noise", help="print the learned noise layer")
    p.add_argument("checkpoint")
    p.add_argument("--matrix", help="true transition matrix CSV for a Pearson comparison")
    p.set_defaults(func=cmd_inspect_noise)

    p = sub.add_parser("probe", help="linear probes on frozen features of two checkpoints")
    p.add_argument("baseline")
    p.add_argument("proposed")
    p.add_argument("train", help="3-column TSV (clean, noisy, text)")
    p.add_argument("test")
    p.add_argument("--features", choices=("pooled", "logits"), default="pooled")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("make-synthetic", help="write the synthetic corpus as clean TSVs")
    p.add_argument("--config")
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_synthetic)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, DataFormatError, ValueError, OSError) as exc:
        print(f"noisycnn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
