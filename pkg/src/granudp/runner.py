"""Experiment orchestration: prepare -> train -> attack -> pii-eval -> report.

Layout of an output directory::

    prepared/   unit files, split manifests, PII ledger, vocabulary, manifest
    runs/<run_id>/   checkpoint, loss history, accounting, BLEU, MIA and PII rows
    results/    tau, concatenated per-run CSVs, aggregate.csv

Every stage is deterministic given the config, so rerunning an experiment
reproduces all CSVs byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import shutil
import statistics
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import corpus as C
from .accountant import (
    DEFAULT_DELTA,
    AccountingError,
    AccountingReport,
    PrivacyParams,
    calibrate_noise,
    scale_epsilon_for_granularity,
    steps_for_epochs,
)
from .attack import MiaReport, Threshold, attack_model, balanced_members, compute_tau
from .dpsgd import INIT_STREAM, DivergenceError, DpSgdConfig, StepTrace, rdp_hook, stream, train
from .metrics import BleuReport, corpus_bleu
from .models import TinySeq2Seq, VocabPair, greedy_decode, load_checkpoint, save_checkpoint
from .pii import Detector, LeakageReport, leakage_percentage

log = logging.getLogger(__name__)

SEN, DOC, AUGDOC, AUGDOC_ZERO_SHOT = "sen", "doc", "augdoc", "augdoc_zero_shot"
TAGS = (SEN, DOC, AUGDOC, AUGDOC_ZERO_SHOT)
UNIT_GRANULARITY = {SEN: C.SENTENCE, DOC: C.DOCUMENT, AUGDOC: C.DOCUMENT, AUGDOC_ZERO_SHOT: C.DOCUMENT}

EXIT_OK, EXIT_CONFIG, EXIT_PREREQUISITE = 0, 2, 3

PREPARED, RUNS, RESULTS = "prepared", "runs", "results"


class ConfigError(ValueError):
    pass


class PrerequisiteError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class CorpusConfig:
    source: str = "synth"
    path: str | None = None
    n_dialogues: int = 200
    turns: tuple[int, int] = (6, 14)
    pii_density: float = 0.6
    locale: str = "de"
    seed: int = 0


@dataclass(frozen=True)
class PublicCorpusConfig:
    n_dialogues: int = 300
    turns: tuple[int, int] = (6, 14)
    budget_src_tokens: int = 120
    locale: str = "de"
    seed: int = 1


@dataclass(frozen=True)
class TrainSettings:
    lot_size: int = 64
    epochs: float = 10.0
    learning_rate: float = 1.0
    clip_bound: float = 1.0
    accumulation_chunk: int = 64
    warmup_steps: int = 0


_DEFAULT_TRAIN = {
    (SEN, False): TrainSettings(lot_size=64, epochs=180.0, learning_rate=20.0, warmup_steps=300),
    (SEN, True): TrainSettings(lot_size=64, epochs=5.0, learning_rate=1.0, clip_bound=1.0),
    (DOC, False): TrainSettings(lot_size=16, epochs=100.0, learning_rate=16.0, warmup_steps=100),
    (DOC, True): TrainSettings(lot_size=32, epochs=10.0, learning_rate=0.1, clip_bound=1.0),
    (AUGDOC_ZERO_SHOT, False): TrainSettings(lot_size=16, epochs=50.0, learning_rate=16.0, warmup_steps=100),
    (AUGDOC, False): TrainSettings(lot_size=16, epochs=50.0, learning_rate=16.0, warmup_steps=100),
    (AUGDOC, True): TrainSettings(lot_size=32, epochs=10.0, learning_rate=0.1, clip_bound=1.0),
}


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = CorpusConfig()
    public: PublicCorpusConfig = PublicCorpusConfig()
    split: C.SplitSpec = C.SplitSpec()
    tags: tuple[str, ...] = (SEN, DOC)
    # None selects the default ladder derived from the corpus
    epsilons: tuple[float, ...] | None = None
    ladder_base: float = 1.0
    delta: float = DEFAULT_DELTA
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    nonprivate_seeds: tuple[int, ...] = (0, 1, 2)
    reference_seed: int = 0
    member_seed: int = 0
    dim: int = 16
    bleu_max_units: int = 200
    bleu_smooth: bool = False
    training: Mapping[tuple[str, bool], TrainSettings] = field(default_factory=lambda: dict(_DEFAULT_TRAIN))
    output_dir: str | None = None

    def settings(self, tag: str, private: bool) -> TrainSettings:
        if tag == AUGDOC_ZERO_SHOT and private:
            raise ConfigError("augdoc_zero_shot trains on public data only; its epsilon must be inf")
        return self.training[(tag, private)]

    def seeds_for(self, epsilon: float) -> tuple[int, ...]:
        return self.nonprivate_seeds if math.isinf(epsilon) else self.seeds

    def data_digest(self) -> str:
        blob = json.dumps(
            {"corpus": asdict(self.corpus), "public": asdict(self.public), "split": asdict(self.split)},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def parse_epsilon(value: Any) -> float:
    if isinstance(value, str) and value.strip().lower() in ("inf", "infinity", "∞"):
        return math.inf
    try:
        eps = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"epsilon must be 'inf' or a positive number, got {value!r}") from None
    if not eps > 0:
        raise ConfigError(f"epsilon must be 'inf' or a positive number, got {value!r}")
    return eps


def format_epsilon(eps: float) -> str:
    return "inf" if math.isinf(eps) else f"{eps:.12g}"


def normalize_tag(tag: str) -> str:
    t = tag.replace("-", "_")
    if t not in TAGS:
        raise ConfigError(f"unknown model tag {tag!r}; expected one of {', '.join(TAGS)}")
    return t


def run_id(tag: str, epsilon: float, seed: int) -> str:
    return f"{tag}_eps-{format_epsilon(epsilon)}_seed-{seed}"


def _take(section: dict, key: str, kind, where: str, default=None):
    if key not in section:
        return default
    value = section.pop(key)
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is int and (isinstance(value, bool) or int(value) != value):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {value!r}") from None


def _no_leftovers(section: dict, where: str) -> None:
    if section:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(sorted(section))}")


def _pair(value, where: str) -> tuple[int, int]:
    if not (isinstance(value, (list, tuple)) and len(value) == 2 and all(isinstance(v, int) for v in value)):
        raise ConfigError(f"{where}: expected [min, max] integers, got {value!r}")
    return (value[0], value[1])


def _int_list(value, where: str) -> tuple[int, ...]:
    if not (isinstance(value, list) and value and all(isinstance(v, int) and not isinstance(v, bool) for v in value)):
        raise ConfigError(f"{where}: expected a non-empty list of integers, got {value!r}")
    if len(set(value)) != len(value):
        raise ConfigError(f"{where}: duplicate entries")
    return tuple(value)


def config_from_dict(raw: Mapping[str, Any], base_dir: Path | None = None) -> ExperimentConfig:
    raw = json.loads(json.dumps(raw))  # deep copy; we pop consumed keys
    base_dir = base_dir or Path.cwd()

    sec = raw.pop("corpus", {})
    source = _take(sec, "source", str, "corpus", "synth")
    if source not in ("synth", "jsonl"):
        raise ConfigError(f"corpus.source: expected 'synth' or 'jsonl', got {source!r}")
    path = _take(sec, "path", str, "corpus")
    if source == "jsonl":
        if not path:
            raise ConfigError("corpus.path: required when corpus.source = 'jsonl'")
        p = Path(path)
        path = str(p if p.is_absolute() else (base_dir / p))
        if not Path(path).is_file():
            raise ConfigError(f"corpus.path: file not found: {path}")
    corpus = CorpusConfig(
        source=source,
        path=path,
        n_dialogues=_take(sec, "n_dialogues", int, "corpus", 200),
        turns=_pair(sec.pop("turns", [6, 14]), "corpus.turns"),
        pii_density=_take(sec, "pii_density", float, "corpus", 0.6),
        locale=_take(sec, "locale", str, "corpus", "de"),
        seed=_take(sec, "seed", int, "corpus", 0),
    )
    _no_leftovers(sec, "corpus")
    if corpus.locale not in ("de", "en"):
        raise ConfigError(f"corpus.locale: expected 'de' or 'en', got {corpus.locale!r}")

    sec = raw.pop("public", {})
    public = PublicCorpusConfig(
        n_dialogues=_take(sec, "n_dialogues", int, "public", 300),
        turns=_pair(sec.pop("turns", [6, 14]), "public.turns"),
        budget_src_tokens=_take(sec, "budget_src_tokens", int, "public", 120),
        locale=_take(sec, "locale", str, "public", corpus.locale),
        seed=_take(sec, "seed", int, "public", 1),
    )
    _no_leftovers(sec, "public")

    sec = raw.pop("split", {})
    try:
        split = C.SplitSpec(
            train=_take(sec, "train", float, "split", 0.8),
            val=_take(sec, "val", float, "split", 0.1),
            test=_take(sec, "test", float, "split", 0.1),
            seed=_take(sec, "seed", int, "split", 0),
        )
    except ValueError as exc:
        raise ConfigError(f"split: {exc}") from None
    _no_leftovers(sec, "split")

    sec = raw.pop("experiment", {})
    tags = sec.pop("tags", [SEN, DOC])
    if not isinstance(tags, list) or not tags:
        raise ConfigError("experiment.tags: expected a non-empty list")
    tags = tuple(dict.fromkeys(normalize_tag(t) for t in tags))
    eps_raw = sec.pop("epsilons", "ladder")
    if eps_raw == "ladder":
        epsilons = None
    elif isinstance(eps_raw, list) and eps_raw:
        epsilons = tuple(dict.fromkeys(parse_epsilon(e) for e in eps_raw))
    else:
        raise ConfigError("experiment.epsilons: expected 'ladder' or a non-empty list")
    seeds = _int_list(sec.pop("seeds", [0, 1, 2, 3, 4]), "experiment.seeds")
    nonprivate = _int_list(sec.pop("nonprivate_seeds", list(seeds[:3])), "experiment.nonprivate_seeds")
    delta = _take(sec, "delta", float, "experiment", DEFAULT_DELTA)
    if not 0 < delta < 1:
        raise ConfigError(f"experiment.delta: must lie in (0, 1), got {delta}")
    ladder_base = _take(sec, "ladder_base", float, "experiment", 1.0)
    if not ladder_base > 0:
        raise ConfigError("experiment.ladder_base: must be > 0")
    dim = _take(sec, "dim", int, "experiment", 16)
    if dim < 1:
        raise ConfigError("experiment.dim: must be >= 1")
    cfg_kw = dict(
        corpus=corpus,
        public=public,
        split=split,
        tags=tags,
        epsilons=epsilons,
        ladder_base=ladder_base,
        delta=delta,
        seeds=seeds,
        nonprivate_seeds=nonprivate,
        reference_seed=_take(sec, "reference_seed", int, "experiment", nonprivate[0]),
        member_seed=_take(sec, "member_seed", int, "experiment", 0),
        dim=dim,
        bleu_max_units=_take(sec, "bleu_max_units", int, "experiment", 200),
        bleu_smooth=_take(sec, "bleu_smooth", bool, "experiment", False),
    )
    _no_leftovers(sec, "experiment")
    if cfg_kw["reference_seed"] not in nonprivate:
        raise ConfigError("experiment.reference_seed: must be one of experiment.nonprivate_seeds")

    training = dict(_DEFAULT_TRAIN)
    sec = raw.pop("train", {})
    for tag_key, by_mode in sec.items():
        tag = normalize_tag(tag_key)
        if not isinstance(by_mode, dict):
            raise ConfigError(f"train.{tag_key}: expected a table")
        for mode, values in by_mode.items():
            if mode not in ("private", "nonprivate"):
                raise ConfigError(f"train.{tag_key}.{mode}: expected 'private' or 'nonprivate'")
            private = mode == "private"
            if tag == AUGDOC_ZERO_SHOT and private:
                raise ConfigError("train.augdoc_zero_shot.private: zero-shot model is never trained privately")
            where = f"train.{tag_key}.{mode}"
            values = dict(values)
            base = training.get((tag, private), TrainSettings())
            settings = TrainSettings(
                lot_size=_take(values, "lot_size", int, where, base.lot_size),
                epochs=_take(values, "epochs", float, where, base.epochs),
                learning_rate=_take(values, "learning_rate", float, where, base.learning_rate),
                clip_bound=_take(values, "clip_bound", float, where, base.clip_bound),
                accumulation_chunk=_take(values, "accumulation_chunk", int, where, base.accumulation_chunk),
                warmup_steps=_take(values, "warmup_steps", int, where, base.warmup_steps),
            )
            _no_leftovers(values, where)
            if settings.lot_size < 1 or not settings.epochs > 0 or not settings.learning_rate > 0:
                raise ConfigError(f"{where}: lot_size, epochs and learning_rate must be positive")
            if not settings.clip_bound > 0 or settings.accumulation_chunk < 1 or settings.warmup_steps < 0:
                raise ConfigError(f"{where}: clip_bound and accumulation_chunk must be positive, warmup_steps >= 0")
            training[(tag, private)] = settings
    cfg_kw["training"] = training

    output_dir = raw.pop("output_dir", None)
    if output_dir is not None:
        p = Path(str(output_dir))
        output_dir = str(p if p.is_absolute() else base_dir / p)
    cfg_kw["output_dir"] = output_dir
    _no_leftovers(raw, "config")
    return ExperimentConfig(**cfg_kw)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, base_dir=path.parent)


# ---------------------------------------------------------------------------
# Small I/O helpers


def _write_csv(path: Path, fields: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})


def _cell(v: Any) -> Any:
    if isinstance(v, float):
        return "inf" if math.isinf(v) and v > 0 else repr(v)
    return v


def _read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# prepare


@dataclass
class Prepared:
    """Loaded view of ``prepared/``."""

    root: Path
    manifest: dict
    sentence_units: list[C.ParallelUnit]
    document_units: list[C.ParallelUnit]
    public_units: list[C.ParallelUnit]
    splits: dict[str, list[str]]
    ledger: list[dict]
    vocab: VocabPair

    def units(self, granularity: str, split_name: str) -> list[C.ParallelUnit]:
        ids = set(self.splits[split_name])
        pool = self.sentence_units if granularity == C.SENTENCE else self.document_units
        return [u for u in pool if u.dialogue_id in ids]

    @property
    def gazetteer(self) -> dict[str, set[str]]:
        return C.gazetteer_from_ledger(C.LedgerEntry(**rec) for rec in self.ledger)

    @property
    def max_utterances(self) -> int:
        return int(self.manifest["max_utterances"])


def _load_utterances(cfg: ExperimentConfig) -> tuple[list[C.Utterance], list[C.LedgerEntry]]:
    if cfg.corpus.source == "jsonl":
        if not cfg.corpus.path or not Path(cfg.corpus.path).is_file():
            raise ConfigError(f"corpus.path: file not found: {cfg.corpus.path}")
        raw = C.load_jsonl(cfg.corpus.path)
        if C.has_placeholders(raw):
            return C.replace_pii(raw, locale=cfg.corpus.locale, seed=cfg.corpus.seed)
        return raw, []
    return C.synth_corpus(
        cfg.corpus.n_dialogues,
        turns_range=cfg.corpus.turns,
        pii_density=cfg.corpus.pii_density,
        seed=cfg.corpus.seed,
        locale=cfg.corpus.locale,
    )


def epsilon_ladder(cfg: ExperimentConfig, max_utt: int) -> tuple[float, ...]:
    if cfg.epsilons is not None:
        return cfg.epsilons
    b = cfg.ladder_base
    return (
        math.inf,
        scale_epsilon_for_granularity(10 * b, max_utt),
        scale_epsilon_for_granularity(b, max_utt),
        10.0 * b,
        b,
    )


def cmd_prepare(cfg: ExperimentConfig, out: Path, overwrite: bool = False) -> Path:
    root = out / PREPARED
    manifest_path = root / "manifest.json"
    if manifest_path.exists() and not overwrite:
        old = json.loads(manifest_path.read_text(encoding="utf-8"))
        if old.get("data_digest") != cfg.data_digest():
            raise PrerequisiteError(
                f"{root} was prepared from a different corpus config; pass --overwrite to replace it"
            )
    utterances, ledger = _load_utterances(cfg)
    train_u, val_u, test_u = C.split(utterances, cfg.split)

    public_utts, _ = C.synth_corpus(
        cfg.public.n_dialogues,
        turns_range=cfg.public.turns,
        pii_density=0.0,
        seed=cfg.public.seed,
        locale=cfg.public.locale,
        id_prefix="pub",
    )
    public_pairs = [(u.src, u.tgt) for u in C.to_sentence_units(public_utts)]
    public_units = C.build_token_budget_documents(public_pairs, cfg.public.budget_src_tokens, id_prefix="pub")

    sentence_units = C.to_sentence_units(utterances)
    document_units = C.to_document_units(utterances)
    train_ids = {u.dialogue_id for u in train_u}
    # The vocabulary sees private training text and public text only.
    vocab = VocabPair.build(
        [(u.src, u.tgt) for u in sentence_units if u.dialogue_id in train_ids]
        + [(u.src, u.tgt) for u in public_units]
    )

    if root.exists():
        shutil.rmtree(root)
    (root / "splits").mkdir(parents=True)
    C.write_jsonl(root / "sentence_units.jsonl", (u.to_json() for u in sentence_units))
    C.write_jsonl(root / "document_units.jsonl", (u.to_json() for u in document_units))
    C.write_jsonl(root / "public_units.jsonl", (u.to_json() for u in public_units))
    C.write_jsonl(root / "pii_ledger.jsonl", (C.ledger_record(e) for e in ledger))
    for name, part in (("train", train_u), ("val", val_u), ("test", test_u)):
        ids = sorted({u.dialogue_id for u in part})
        (root / "splits" / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
    _write_json(root / "vocab.json", vocab.to_json())
    max_utt = C.max_utterances(utterances)
    _write_json(
        manifest_path,
        {
            "data_digest": cfg.data_digest(),
            "n_dialogues": len(document_units),
            "n_sentences": len(sentence_units),
            "n_public_documents": len(public_units),
            "split_dialogues": {n: len({u.dialogue_id for u in p}) for n, p in (("train", train_u), ("val", val_u), ("test", test_u))},
            "max_utterances": max_utt,
            "epsilon_ladder": [format_epsilon(e) for e in epsilon_ladder(cfg, max_utt)],
            "src_vocab_size": len(vocab.src),
            "tgt_vocab_size": len(vocab.tgt),
        },
    )
    log.info("prepared %d dialogues (%d sentences) in %s", len(document_units), len(sentence_units), root)
    return root


def load_prepared(cfg: ExperimentConfig, out: Path) -> Prepared:
    root = out / PREPARED
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise PrerequisiteError(f"no prepared data under {root}; run `prepare` first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("data_digest") != cfg.data_digest():
        raise PrerequisiteError(f"{root} was prepared from a different corpus config; rerun `prepare --overwrite`")
    splits = {
        name: (root / "splits" / f"{name}.txt").read_text(encoding="utf-8").split()
        for name in ("train", "val", "test")
    }
    with open(root / "pii_ledger.jsonl", encoding="utf-8") as fh:
        ledger = [json.loads(line) for line in fh if line.strip()]
    return Prepared(
        root=root,
        manifest=manifest,
        sentence_units=C.read_units(root / "sentence_units.jsonl"),
        document_units=C.read_units(root / "document_units.jsonl"),
        public_units=C.read_units(root / "public_units.jsonl"),
        splits=splits,
        ledger=ledger,
        vocab=VocabPair.from_json(json.loads((root / "vocab.json").read_text(encoding="utf-8"))),
    )


# ---------------------------------------------------------------------------
# train


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    tag: str
    epsilon: float
    seed: int
    paths: dict[str, str]
    sigma: float = 0.0
    steps: int = 0
    epsilon_spent: float | None = None
    final_train_loss: float = math.nan

    def to_json(self) -> dict:
        d = asdict(self)
        d["epsilon"] = format_epsilon(self.epsilon)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "RunRecord":
        obj = dict(obj)
        obj["epsilon"] = parse_epsilon(obj["epsilon"])
        return cls(**obj)


class ModelScorer:
    """Per-unit loss of a seq2seq model under a fixed vocabulary."""

    def __init__(self, model: TinySeq2Seq, vocab: VocabPair, chunk: int = 256):
        self.model, self.vocab, self.chunk = model, vocab, chunk

    def unit_losses(self, units: Sequence[C.ParallelUnit]) -> np.ndarray:
        examples = [self.vocab.encode(u.src, u.tgt) for u in units]
        parts = [self.model.losses(examples[i : i + self.chunk]) for i in range(0, len(examples), self.chunk)]
        return np.concatenate(parts) if parts else np.zeros(0)


def run_dir(out: Path, rid: str) -> Path:
    return out / RUNS / rid


def load_run(out: Path, tag: str, epsilon: float, seed: int) -> RunRecord:
    rid = run_id(tag, epsilon, seed)
    path = run_dir(out, rid) / "run.json"
    if not path.exists():
        raise PrerequisiteError(f"run {rid} has not been trained")
    return RunRecord.from_json(json.loads(path.read_text(encoding="utf-8")))


def _training_units(prep: Prepared, tag: str) -> list[C.ParallelUnit]:
    if tag == SEN:
        return prep.units(C.SENTENCE, "train")
    if tag == AUGDOC_ZERO_SHOT:
        return prep.public_units
    return prep.units(C.DOCUMENT, "train")


def noise_for(cfg: ExperimentConfig, settings: TrainSettings, n: int, epsilon: float) -> tuple[float, float, int]:
    """(sigma, q, steps) hitting ``epsilon`` at the unit's own granularity."""
    lot = min(settings.lot_size, n)
    q = lot / n
    steps = steps_for_epochs(settings.epochs, n, lot)
    sigma = calibrate_noise(PrivacyParams(epsilon, cfg.delta), q, steps)
    return sigma, q, steps


def cmd_train(
    cfg: ExperimentConfig, out: Path, tag: str, epsilon: float, seed: int, overwrite: bool = False
) -> RunRecord:
    tag = normalize_tag(tag)
    private = not math.isinf(epsilon)
    settings = cfg.settings(tag, private)
    rid = run_id(tag, epsilon, seed)
    rdir = run_dir(out, rid)
    if (rdir / "run.json").exists() and not overwrite:
        raise PrerequisiteError(f"run {rid} already exists in {out}; pass --overwrite to retrain")
    prep = load_prepared(cfg, out)

    vocab = prep.vocab
    if tag == AUGDOC:
        parent = load_run(out, AUGDOC_ZERO_SHOT, math.inf, seed)
        model, _, _ = load_checkpoint(out / parent.paths["checkpoint"])
    else:
        model = TinySeq2Seq.init(len(vocab.src), len(vocab.tgt), cfg.dim, stream(seed, INIT_STREAM))

    units = _training_units(prep, tag)
    dataset = [vocab.encode(u.src, u.tgt) for u in units]
    n = len(dataset)
    lot = min(settings.lot_size, n)
    hook = None
    if private:
        try:
            sigma, _, _ = noise_for(cfg, settings, n, epsilon)
        except AccountingError as exc:
            raise ConfigError(f"{rid}: {exc}") from None
        clip = settings.clip_bound
        hook = rdp_hook(cfg.delta)
    else:
        sigma, clip = 0.0, math.inf
    dp = DpSgdConfig(
        clip_bound=clip,
        noise_multiplier=sigma,
        lot_size=lot,
        dataset_size=n,
        epochs=settings.epochs,
        learning_rate=settings.learning_rate,
        seed=seed,
        accumulation_chunk=settings.accumulation_chunk,
        warmup_steps=settings.warmup_steps,
    )

    log.info("training %s: N=%d L=%d steps=%d sigma=%.4g", rid, n, lot, dp.steps, dp.noise_multiplier)
    started = time.perf_counter()
    try:
        result = train(model, dataset, dp, accountant_hook=hook)
    except DivergenceError as exc:
        raise ConfigError(f"{rid}: {exc}; lower learning_rate or raise warmup_steps") from None
    trained = model.with_params(result.params)
    final_loss = float(ModelScorer(trained, vocab).unit_losses(units).mean())

    if rdir.exists():
        shutil.rmtree(rdir)
    rdir.mkdir(parents=True)
    save_checkpoint(rdir / "checkpoint.bin", trained, vocab, meta={"run_id": rid, "tag": tag, "seed": seed})
    _write_csv(rdir / "loss_history.csv", StepTrace.CSV_FIELDS, result.traces)
    if private:
        acc = AccountingReport(rid, dp.noise_multiplier, dp.sampling_rate, dp.steps, cfg.delta, result.privacy.epsilon)
        acc_row = acc.row()
    else:
        acc_row = {"run_id": rid, "sigma": 0.0, "q": dp.sampling_rate, "steps": dp.steps, "delta": "", "epsilon": "inf"}
    _write_csv(rdir / "accounting.csv", AccountingReport.CSV_FIELDS, [acc_row])

    bleu = evaluate_bleu(cfg, prep, trained, tag)
    _write_csv(
        rdir / "bleu.csv", BleuReport.CSV_FIELDS, [bleu.row(rid, tag, format_epsilon(epsilon), UNIT_GRANULARITY[tag])]
    )

    rel = lambda p: str(p.relative_to(out))  # noqa: E731
    record = RunRecord(
        run_id=rid,
        tag=tag,
        epsilon=epsilon,
        seed=seed,
        paths={
            "checkpoint": rel(rdir / "checkpoint.bin"),
            "loss_history": rel(rdir / "loss_history.csv"),
            "accounting": rel(rdir / "accounting.csv"),
            "bleu": rel(rdir / "bleu.csv"),
        },
        sigma=dp.noise_multiplier,
        steps=dp.steps,
        epsilon_spent=result.privacy.epsilon if result.privacy else None,
        final_train_loss=final_loss,
    )
    _write_json(rdir / "run.json", record.to_json())
    log.info(
        "%s: final train loss %.4f, BLEU %.2f (%.1fs)", rid, final_loss, 100 * bleu.bleu, time.perf_counter() - started
    )
    return record


def evaluate_bleu(cfg: ExperimentConfig, prep: Prepared, model: TinySeq2Seq, tag: str) -> BleuReport:
    units = prep.units(UNIT_GRANULARITY[tag], "test")[: cfg.bleu_max_units]
    vocab = prep.vocab
    hyps = []
    for u in units:
        src = vocab.src.encode(u.src)
        ids = greedy_decode(model, src, max_len=2 * len(src) + 8)
        hyps.append(" ".join(vocab.tgt.decode(ids)))
    return corpus_bleu(hyps, [u.tgt for u in units], smooth=cfg.bleu_smooth)


# ---------------------------------------------------------------------------
# attack


def reference_tau(cfg: ExperimentConfig, out: Path, prep: Prepared) -> Threshold:
    """Mean training loss of the (sen, inf) reference run, cached in results/tau.json."""
    try:
        ref = load_run(out, SEN, math.inf, cfg.reference_seed)
    except PrerequisiteError:
        raise PrerequisiteError(
            f"tau needs the reference run {run_id(SEN, math.inf, cfg.reference_seed)}; train it first"
        ) from None
    ckpt = out / ref.paths["checkpoint"]
    digest = _sha256(ckpt)
    cache = out / RESULTS / "tau.json"
    if cache.exists():
        cached = json.loads(cache.read_text(encoding="utf-8"))
        if cached.get("checkpoint_sha256") == digest:
            return Threshold(float(cached["tau"]), cached["provenance"])
    model, _, _ = load_checkpoint(ckpt)
    train_units = prep.units(C.SENTENCE, "train")
    provenance = f"{ref.run_id}: mean loss over {len(train_units)} sentence training units"
    tau = compute_tau(ModelScorer(model, prep.vocab), train_units, provenance)
    _write_json(cache, {"tau": tau.tau, "provenance": tau.provenance, "checkpoint_sha256": digest})
    return tau


def attack_sets(cfg: ExperimentConfig, prep: Prepared) -> tuple[list[C.ParallelUnit], list[C.ParallelUnit]]:
    nonmembers = prep.units(C.SENTENCE, "val") + prep.units(C.SENTENCE, "test")
    members = balanced_members(prep.units(C.SENTENCE, "train"), len(nonmembers), cfg.member_seed)
    return members, nonmembers


def cmd_attack(cfg: ExperimentConfig, out: Path, tag: str, epsilon: float, seed: int) -> MiaReport:
    tag = normalize_tag(tag)
    prep = load_prepared(cfg, out)
    tau = reference_tau(cfg, out, prep)
    record = load_run(out, tag, epsilon, seed)
    model, _, _ = load_checkpoint(out / record.paths["checkpoint"])
    members, nonmembers = attack_sets(cfg, prep)
    report = attack_model(ModelScorer(model, prep.vocab), members, nonmembers, tau)

    rdir = run_dir(out, record.run_id)
    _write_csv(rdir / "mia.csv", MiaReport.CSV_FIELDS, [report.row(record.run_id, tag, format_epsilon(epsilon))])
    C.write_jsonl(rdir / "mia_true_positives.jsonl", ({"unit_id": i} for i in report.true_positive_ids))
    _collect(out, "mia.csv", MiaReport.CSV_FIELDS)
    log.info("%s: tpr %.3f fpr %.3f advantage %.3f", record.run_id, report.tpr, report.fpr, report.advantage)
    return report


# ---------------------------------------------------------------------------
# pii-eval


def cmd_pii_eval(cfg: ExperimentConfig, out: Path, tag: str, epsilon: float, seed: int) -> LeakageReport:
    tag = normalize_tag(tag)
    prep = load_prepared(cfg, out)
    record = load_run(out, tag, epsilon, seed)
    rdir = run_dir(out, record.run_id)
    tp_path = rdir / "mia_true_positives.jsonl"
    if not tp_path.exists():
        raise PrerequisiteError(f"run {record.run_id} has not been attacked; run `attack` first")
    with open(tp_path, encoding="utf-8") as fh:
        tp_ids = {json.loads(line)["unit_id"] for line in fh if line.strip()}
    members, _ = attack_sets(cfg, prep)
    tp_units = [u for u in members if u.unit_id in tp_ids]
    gazetteer = prep.gazetteer
    report = leakage_percentage(tp_units, members, gazetteer)

    detector = Detector(gazetteer)
    C.write_jsonl(
        rdir / "pii_spans.jsonl",
        (
            {"unit_id": u.unit_id, "category": s.category, "text": s.text, "start": s.start, "end": s.end}
            for u in tp_units
            for s in detector(u.tgt)
        ),
    )
    _write_csv(rdir / "pii.csv", LeakageReport.CSV_FIELDS, [report.row(record.run_id, tag, format_epsilon(epsilon))])
    _collect(out, "pii.csv", LeakageReport.CSV_FIELDS)
    return report


# ---------------------------------------------------------------------------
# report


def _collect(out: Path, name: str, fields: Sequence[str]) -> Path:
    """Rebuild results/<name> from every run's own row, ordered by run id."""
    rows = []
    runs = out / RUNS
    if runs.exists():
        for rdir in sorted(p for p in runs.iterdir() if p.is_dir()):
            if (rdir / name).exists():
                rows.extend(_read_csv(rdir / name))
    dest = out / RESULTS / name
    _write_csv(dest, fields, rows)
    return dest


AGGREGATE_FIELDS = (
    "model_tag",
    "epsilon",
    "n_seeds",
    "bleu_x100_mean",
    "bleu_x100_std",
    "advantage_mean",
    "advantage_std",
    "leakage_pct_mean",
    "leakage_pct_std",
)


def _mean_std(values: list[float]) -> tuple[Any, Any]:
    if not values:
        return "", ""
    return statistics.fmean(values), statistics.pstdev(values)


def cmd_report(out: Path) -> Path:
    runs = out / RUNS
    records = []
    if runs.exists():
        for rdir in sorted(p for p in runs.iterdir() if (p / "run.json").exists()):
            records.append(RunRecord.from_json(json.loads((rdir / "run.json").read_text(encoding="utf-8"))))
    if not records:
        raise PrerequisiteError(f"no completed runs under {runs}")
    _collect(out, "bleu.csv", BleuReport.CSV_FIELDS)
    _collect(out, "accounting.csv", AccountingReport.CSV_FIELDS)
    _collect(out, "mia.csv", MiaReport.CSV_FIELDS)
    _collect(out, "pii.csv", LeakageReport.CSV_FIELDS)

    groups: dict[tuple[str, float], dict[str, list[float]]] = {}
    for rec in records:
        g = groups.setdefault((rec.tag, rec.epsilon), {"seeds": [], "bleu": [], "adv": [], "pii": []})
        g["seeds"].append(rec.seed)
        rdir = run_dir(out, rec.run_id)
        for fname, key, column in (("bleu.csv", "bleu", "bleu_x100"), ("mia.csv", "adv", "advantage"), ("pii.csv", "pii", "leakage_pct")):
            if (rdir / fname).exists():
                value = _read_csv(rdir / fname)[0][column]
                if value != "":
                    g[key].append(float(value))

    def order(key):
        tag, eps = key
        return (TAGS.index(tag), -eps)

    rows = []
    for key in sorted(groups, key=order):
        g = groups[key]
        bm, bs = _mean_std(g["bleu"])
        am, as_ = _mean_std(g["adv"])
        pm, ps = _mean_std(g["pii"])
        rows.append(
            {
                "model_tag": key[0],
                "epsilon": format_epsilon(key[1]),
                "n_seeds": len(g["seeds"]),
                "bleu_x100_mean": bm,
                "bleu_x100_std": bs,
                "advantage_mean": am,
                "advantage_std": as_,
                "leakage_pct_mean": pm,
                "leakage_pct_std": ps,
            }
        )
    dest = out / RESULTS / "aggregate.csv"
    _write_csv(dest, AGGREGATE_FIELDS, rows)
    return dest


# ---------------------------------------------------------------------------
# full experiment


def planned_runs(cfg: ExperimentConfig, ladder: Sequence[float]) -> list[tuple[str, float, int]]:
    """All (tag, epsilon, seed) runs in dependency order."""
    plan: list[tuple[str, float, int]] = []
    for eps in ladder:
        for seed in cfg.seeds_for(eps):
            plan.append((SEN, eps, seed))
    if (SEN, math.inf, cfg.reference_seed) not in plan:
        plan.insert(0, (SEN, math.inf, cfg.reference_seed))
    for tag in (DOC, AUGDOC_ZERO_SHOT, AUGDOC):
        if tag == AUGDOC_ZERO_SHOT:
            needed = AUGDOC_ZERO_SHOT in cfg.tags or AUGDOC in cfg.tags
            seeds = set(cfg.nonprivate_seeds) if AUGDOC_ZERO_SHOT in cfg.tags else set()
            if AUGDOC in cfg.tags:
                seeds |= {s for e in ladder for s in cfg.seeds_for(e)}
            if needed:
                plan.extend((tag, math.inf, s) for s in sorted(seeds))
            continue
        if tag in cfg.tags:
            plan.extend((tag, eps, seed) for eps in ladder for seed in cfg.seeds_for(eps))
    if SEN not in cfg.tags:
        plan = [p for p in plan if p[0] != SEN or p == (SEN, math.inf, cfg.reference_seed)]
    return plan


def run_experiment(cfg: ExperimentConfig, out: Path, overwrite: bool = False) -> Path:
    if (out / RUNS).exists() and any((out / RUNS).iterdir()) and not overwrite:
        raise PrerequisiteError(f"{out} already holds runs; pass --overwrite to rerun the experiment")
    if overwrite:
        for sub in (RUNS, RESULTS):
            if (out / sub).exists():
                shutil.rmtree(out / sub)
    cmd_prepare(cfg, out, overwrite=overwrite)
    prep = load_prepared(cfg, out)
    ladder = epsilon_ladder(cfg, prep.max_utterances)
    plan = planned_runs(cfg, ladder)
    for tag, eps, seed in plan:
        cmd_train(cfg, out, tag, eps, seed, overwrite=overwrite)
    for tag, eps, seed in plan:
        cmd_attack(cfg, out, tag, eps, seed)
        cmd_pii_eval(cfg, out, tag, eps, seed)
    return cmd_report(out)
