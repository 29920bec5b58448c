"""Experiment configs, seed streams and end-to-end runs behind the CLI."""

from __future__ import annotations

import configparser
import io
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import noisegen as ng
from .model import Checkpoint, ModelConfig, init_base_params, init_noise_layer, save_checkpoint
from .textpipe import (SyntheticSpec, Vocab, build_vocab, init_embeddings, load_tsv, make_dataset,
                       make_synthetic_corpus, percentile_length, tokenize, write_tsv)
from .train import RunRecord, TrainConfig, evaluate_clean, extract_features, train

log = logging.getLogger(__name__)

VARIANTS = ("wonm", "nmworegu", "nmwregu", "tdwregu", "randwregu")
VARIANT_INIT = {"nmworegu": "identity_gain", "nmwregu": "identity_gain",
                "tdwregu": "true_distribution", "randwregu": "random"}
NOISE_LAYER_KEYS = ("lam", "init_mode", "gain")

# named sub-streams of the master seed; adding a stage never shifts another
STREAMS = {"data": 0, "matrix": 1, "corruption": 2, "init": 3, "shuffle": 4, "dropout": 5, "probe": 6}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the offending field."""


def stream(seed: int, name: str, repeat: int | None = None) -> np.random.Generator:
    key = [int(seed), STREAMS[name]] if repeat is None else [int(seed), int(repeat), STREAMS[name]]
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass
class DataSpec:
    source: str = "synthetic"  # synthetic | files
    train: str = ""
    dev: str = ""
    test: str = ""
    embeddings: str = ""
    t_fixed: int = 0  # 0 means the 95th percentile of train lengths
    min_count: int = 1
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class NoiseSpec:
    kind: str = "none"  # none | uniform | random | custom
    p: float = 0.0
    matrix: str = ""
    keep: tuple[float, ...] = ()  # class-dependent diagonal for custom noise

    def build(self, k: int, rng: np.random.Generator) -> ng.TransitionMatrix | None:
        if self.kind == "none":
            return None
        if self.kind == "uniform":
            return ng.build_uniform_noise(k, self.p)
        if self.kind == "random":
            return ng.build_random_noise(k, self.p, rng)
        phi = ng.class_dependent_noise(self.keep) if self.keep else ng.build_custom_noise(ng.load_matrix_csv(self.matrix))
        if phi.k != k:
            raise ConfigError(f"noise.matrix: has {phi.k} classes, data has {k}")
        return phi


@dataclass
class ExperimentConfig:
    variant: str = "nmwregu"
    seed: int = 0
    repeats: int = 1
    data: DataSpec = field(default_factory=DataSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    model: dict = field(default_factory=dict)  # ModelConfig fields other than k/vocab_size/t_fixed
    train: TrainConfig = field(default_factory=TrainConfig)
    explicit: frozenset = frozenset()  # "section.key" names present in the source file

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"run.variant: must be one of {', '.join(VARIANTS)}, got {self.variant!r}")
        if self.repeats < 1:
            raise ConfigError("run.repeats: must be at least 1")
        if self.data.source not in ("synthetic", "files"):
            raise ConfigError(f"data.source: must be synthetic or files, got {self.data.source!r}")
        if self.data.source == "files":
            for key in ("train", "dev", "test"):
                if not getattr(self.data, key):
                    raise ConfigError(f"data.{key}: required when data.source = files")
        if self.noise.kind not in ("none", "uniform", "random", "custom"):
            raise ConfigError(f"noise.kind: must be none, uniform, random or custom, got {self.noise.kind!r}")
        if self.noise.kind in ("uniform", "random") and not 0.0 <= self.noise.p <= 1.0:
            raise ConfigError(f"noise.p: must lie in [0, 1], got {self.noise.p}")
        if self.noise.kind == "custom" and not (self.noise.matrix or self.noise.keep):
            raise ConfigError("noise.matrix: custom noise needs a matrix file or noise.keep")
        if self.variant == "wonm":
            for key in NOISE_LAYER_KEYS:
                if f"model.{key}" in self.explicit:
                    raise ConfigError(f"model.{key}: not allowed for variant wonm (no noise layer)")
            return
        init = self.model.get("init_mode", VARIANT_INIT[self.variant])
        if init != VARIANT_INIT[self.variant]:
            raise ConfigError(f"model.init_mode: variant {self.variant} uses {VARIANT_INIT[self.variant]}, got {init!r}")
        lam = self.lam
        if self.variant == "nmworegu" and lam != 0.0:
            raise ConfigError(f"model.lam: variant nmworegu trains without regularization, got {lam}")
        if self.variant in ("nmwregu", "tdwregu", "randwregu") and not lam > 0.0:
            raise ConfigError(f"model.lam: variant {self.variant} requires lam > 0, got {lam}")
        if self.variant == "tdwregu" and self.noise.kind == "none":
            raise ConfigError("noise.kind: variant tdwregu needs the injected noise distribution")

    @property
    def noise_layer(self) -> bool:
        return self.variant != "wonm"

    @property
    def lam(self) -> float:
        if not self.noise_layer:
            return 0.0
        return float(self.model.get("lam", 0.0 if self.variant == "nmworegu" else 0.01))

    def model_config(self, k, vocab_size, t_fixed) -> ModelConfig:
        kw = {key: v for key, v in self.model.items() if key not in NOISE_LAYER_KEYS}
        if self.noise_layer:
            kw.update(lam=self.lam, init_mode=VARIANT_INIT[self.variant], gain=self.model.get("gain"))
        else:
            kw.update(lam=0.0)
        return ModelConfig(k=k, vocab_size=vocab_size, t_fixed=t_fixed, noise_layer=self.noise_layer, **kw)


# ------------------------------------------------------------ ini files

MODEL_KEYS = {"d": int, "windows": "ints", "feature_maps": int, "dropout_keep": float,
              "lam": float, "init_mode": str, "gain": float}


def _parse(value: str, kind, name):
    try:
        if kind == "ints":
            return tuple(int(v) for v in value.replace(",", " ").split())
        if kind == "floats":
            return tuple(float(v) for v in value.replace(",", " ").split())
        if kind is bool:
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        return kind(value.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r}") from None


def _dc_section(parser, section, cls, seen, prefix=None):
    prefix = prefix or section
    kinds = {f.name: f.type for f in fields(cls)}
    out = {}
    if not parser.has_section(section):
        return out
    for key, value in parser.items(section):
        if key not in kinds:
            continue
        t = kinds[key]
        kind = {"int": int, "float": float, "str": str, "bool": bool}.get(t, str)
        if "tuple[float" in str(t):
            kind = "floats"
        out[key] = _parse(value, kind, f"{prefix}.{key}")
        seen.add(f"{prefix}.{key}")
    return out


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    return parse_config(text, base_dir=Path(path).resolve().parent)


def parse_config(text: str, base_dir=None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from None
    known = {"run", "data", "synthetic", "noise", "model", "train"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"{section}: unknown section")
    seen: set[str] = set()
    allowed = {
        "run": {"variant", "seed", "repeats"},
        "data": {f.name for f in fields(DataSpec)} - {"synthetic"},
        "synthetic": {f.name for f in fields(SyntheticSpec)},
        "noise": {f.name for f in fields(NoiseSpec)},
        "model": set(MODEL_KEYS),
        "train": {f.name for f in fields(TrainConfig)},
    }
    for section in parser.sections():
        for key in parser[section]:
            if key not in allowed[section]:
                raise ConfigError(f"{section}.{key}: unknown key")

    run = parser["run"] if parser.has_section("run") else {}
    variant = run.get("variant", "nmwregu").strip()
    seed = _parse(run.get("seed", "0"), int, "run.seed")
    repeats = _parse(run.get("repeats", "1"), int, "run.repeats")

    data_kw = _dc_section(parser, "data", DataSpec, seen)
    data_kw.pop("synthetic", None)
    for key in ("train", "dev", "test", "embeddings"):
        if data_kw.get(key) and base_dir is not None:
            data_kw[key] = str((Path(base_dir) / data_kw[key]).resolve())
    try:
        syn = SyntheticSpec(**_dc_section(parser, "synthetic", SyntheticSpec, seen))
        noise_kw = _dc_section(parser, "noise", NoiseSpec, seen)
        if noise_kw.get("matrix") and base_dir is not None:
            noise_kw["matrix"] = str((Path(base_dir) / noise_kw["matrix"]).resolve())
        noise = NoiseSpec(**noise_kw)
        model = {}
        if parser.has_section("model"):
            for key, value in parser.items("model"):
                model[key] = _parse(value, MODEL_KEYS[key], f"model.{key}")
                seen.add(f"model.{key}")
        tcfg = TrainConfig(**_dc_section(parser, "train", TrainConfig, seen))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from None
    return ExperimentConfig(variant=variant, seed=seed, repeats=repeats, data=DataSpec(synthetic=syn, **data_kw),
                            noise=noise, model=model, train=tcfg, explicit=frozenset(seen))


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Effective config as ini text; parsing it back reproduces the run."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"variant": cfg.variant, "seed": str(cfg.seed), "repeats": str(cfg.repeats)}
    data = {k: _fmt(v) for k, v in asdict(cfg.data).items() if k != "synthetic"}
    parser["data"] = data
    if cfg.data.source == "synthetic":
        parser["synthetic"] = {k: _fmt(v) for k, v in asdict(cfg.data.synthetic).items()}
    parser["noise"] = {k: _fmt(v) for k, v in asdict(cfg.noise).items() if v not in ("", ())}
    model = dict(cfg.model)
    if cfg.noise_layer:
        model["lam"] = cfg.lam
        model["init_mode"] = VARIANT_INIT[cfg.variant]
    parser["model"] = {k: _fmt(v) for k, v in sorted(model.items()) if v is not None}
    parser["train"] = {k: _fmt(v) for k, v in asdict(cfg.train).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# ----------------------------------------------------------------- data

@dataclass
class Prepared:
    train: object
    dev: object
    test: object
    vocab: Vocab
    label_names: list[str]
    phi: ng.TransitionMatrix | None
    embeddings: str = ""


def load_file_splits(cfg: ExperimentConfig):
    """Read train/dev/test TSVs; returns datasets (noisy columns kept if present) and the vocab."""
    d = cfg.data
    tr_y, tr_noisy, tr_x, label_map = load_tsv(d.train)
    dv_y, dv_noisy, dv_x, label_map = load_tsv(d.dev, label_map)
    te_y, te_noisy, te_x, label_map = load_tsv(d.test, label_map)
    if te_noisy is not None:
        raise ConfigError(f"data.test: {d.test} has a noisy-label column; test labels are never corrupted")
    names = sorted(label_map, key=label_map.__getitem__)
    k = len(names)
    if k < 2:
        raise ConfigError("data.train: need at least two distinct labels")
    vocab = build_vocab(tokenize(t) for t in tr_x) if d.min_count <= 1 else build_vocab((tokenize(t) for t in tr_x), d.min_count)
    t_fixed = d.t_fixed or percentile_length(tr_x)
    sets = (make_dataset(tr_x, tr_y, vocab, t_fixed, k, "train", tr_noisy, names),
            make_dataset(dv_x, dv_y, vocab, t_fixed, k, "dev", dv_noisy, names),
            make_dataset(te_x, te_y, vocab, t_fixed, k, "test", None, names))
    return sets, vocab, names


def prepare(cfg: ExperimentConfig, repeat: int) -> Prepared:
    if cfg.data.source == "synthetic":
        (tr, dv, te), vocab = make_synthetic_corpus(cfg.data.synthetic, stream(cfg.seed, "data"))
        names = tr.label_names
    else:
        (tr, dv, te), vocab, names = load_file_splits(cfg)
    k = tr.k
    phi = cfg.noise.build(k, stream(cfg.seed, "matrix", repeat))
    if phi is not None and tr.noisy_labels is None:
        rng = stream(cfg.seed, "corruption", repeat)
        tr = ng.corrupt_labels(tr, phi, rng)
        dv = ng.corrupt_labels(dv, phi, rng)
    elif tr.noisy_labels is not None and phi is not None:
        log.info("train file already carries noisy labels; the noise spec only describes them")
    return Prepared(tr, dv, te, vocab, names, phi, cfg.data.embeddings)


# ------------------------------------------------------------------ runs

@dataclass
class RunResult:
    params: dict
    psi: np.ndarray | None
    record: RunRecord
    test_acc: float
    data: Prepared
    mcfg: ModelConfig


def run_once(cfg: ExperimentConfig, repeat: int = 0, data: Prepared | None = None) -> RunResult:
    data = data or prepare(cfg, repeat)
    mcfg = cfg.model_config(data.train.k, len(data.vocab), data.train.t_fixed)
    init = stream(cfg.seed, "init", repeat)
    emb = init_embeddings(data.vocab, mcfg.d, init, data.embeddings or None)
    params = init_base_params(mcfg, emb, init)
    psi = None
    if mcfg.noise_layer:
        psi = init_noise_layer(mcfg.k, mcfg.init_mode, mcfg.gain, data.phi, init)
    bp, bpsi, rec = train(data.train, data.dev, cfg.train, mcfg, params, psi,
                          stream(cfg.seed, "shuffle", repeat), stream(cfg.seed, "dropout", repeat),
                          test_set=data.test)
    return RunResult(bp, bpsi, rec, evaluate_clean(data.test, bp, mcfg), data, mcfg)


class OutputDir:
    """Tracks written files so a failed command leaves nothing half-written."""

    def __init__(self, path):
        self.path = Path(path)
        self.created_dir = not self.path.exists()
        self.written: list[Path] = []

    def file(self, name) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def write_text(self, name, text):
        with self.file(name).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            return False
        if self.created_dir:
            shutil.rmtree(self.path, ignore_errors=True)
        else:
            for p in reversed(self.written):
                if p.exists():
                    p.unlink()
        return False


def features_csv(dataset, feats) -> str:
    buf = io.StringIO()
    noisy = dataset.noisy_labels if dataset.noisy_labels is not None else dataset.labels
    buf.write("clean,noisy," + ",".join(f"f{j}" for j in range(feats.shape[1])) + "\n")
    for y, yn, row in zip(dataset.labels, noisy, feats):
        buf.write(f"{y},{yn}," + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def write_run(out: OutputDir, prefix: str, cfg: ExperimentConfig, res: RunResult, feature_kind="pooled"):
    out.write_text(prefix + "metrics.jsonl", res.record.to_jsonl())
    meta = {"variant": cfg.variant, "seed": cfg.seed, "best_epoch": res.record.best_epoch, "test_acc": res.test_acc}
    ck = Checkpoint(res.mcfg, res.params, res.psi, dict(res.data.vocab.index), list(res.data.label_names), meta)
    save_checkpoint(out.file(prefix + "model.ckpt"), ck)
    if res.psi is not None:
        ng.save_matrix_csv(out.file(prefix + "psi.csv"), res.psi)
    if res.data.phi is not None:
        ng.save_matrix_csv(out.file(prefix + "phi.csv"), res.data.phi.phi)
    feats = extract_features(res.data.train, res.params, res.mcfg, kind=feature_kind)
    out.write_text(prefix + "features.csv", features_csv(res.data.train, feats))
    for split in ("train", "dev", "test"):
        write_tsv(out.file(f"{prefix}data/{split}.tsv"), getattr(res.data, split))


def run_experiment(cfg: ExperimentConfig, out_dir, feature_kind="pooled") -> dict:
    """Run all repeats, writing artifacts under `out_dir`; returns the summary."""
    with OutputDir(out_dir) as out:
        out.write_text("config.ini", dump_config(cfg))
        accs = []
        for r in range(cfg.repeats):
            res = run_once(cfg, r)
            prefix = "" if cfg.repeats == 1 else f"repeat{r}/"
            write_run(out, prefix, cfg, res, feature_kind)
            accs.append(res.test_acc)
            log.info("repeat %d: clean test accuracy %.4f", r, res.test_acc)
        summary = {"variant": cfg.variant, "seed": cfg.seed, "repeats": cfg.repeats, "test_acc": accs,
                   "mean": float(np.mean(accs)), "std": float(np.std(accs))}
        out.write_text("summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
