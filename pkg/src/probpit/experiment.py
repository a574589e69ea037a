"""Experiment orchestration: corpus synthesis, training runs, evaluation,
the gamma sweep and the first-epoch cost-gap study.

Everything is driven by :class:`ExperimentConfig` and written under its
``output_dir``::

    corpus/{split}/{utt_id}_{k}.wav     16-bit PCM sources (k = 0 target, 1 interferer)
    corpus/{split}.manifest.csv         target, interferer, sir_db, seed
    runs/{run_name}/                    checkpoint.json, history.csv, eval.csv,
                                        costs_epoch{E}.csv, meta.json
    sweep/                              trials.csv, summary.csv, ttest.csv, kde/, meta.json
    costgap/seed{N}/                    costs_epoch{E}.csv, kde_cost{1,2}_epoch{E}.csv, summary.csv
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import dsp
from .dsp import SignalBuffer, StftConfig, SourceKind
from .errors import ConfigError, DataError, DegenerateInputError
from .io import atomic_write_text, read_csv, write_csv
from .metrics import eval_separation, kde, paired_ttest
from .separator import (
    SeparatorConfig,
    SeparatorModel,
    TrainConfig,
    Utterance,
    load_checkpoint,
    save_checkpoint,
    separate,
    train,
    utterance_from_signals,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ("target", "interferer", "sir_db", "seed")


@dataclass(frozen=True)
class SplitSpec:
    count: int
    seed: int


@dataclass(frozen=True)
class CorpusConfig:
    duration_s: float = 2.0
    sample_rate: int = 16000
    kinds: tuple = ("harmonic", "am_noise", "chirp")
    sir_low_db: float = 0.0
    sir_high_db: float = 5.0
    train: SplitSpec = SplitSpec(60, 1_000_000)
    val: SplitSpec = SplitSpec(20, 2_000_000)
    test: SplitSpec = SplitSpec(20, 3_000_000)

    def split(self, name: str) -> SplitSpec:
        return getattr(self, name)

    def seed_range(self, name: str) -> range:
        # each mixture consumes two source seeds
        s = self.split(name)
        return range(s.seed, s.seed + 2 * s.count)


@dataclass(frozen=True)
class StftSection:
    frame_len: int = 256
    hop: int = 128
    fft_size: int = 256


@dataclass(frozen=True)
class ModelSection:
    hidden_ff: int = 64
    hidden_rec: int = 48
    num_rec_layers: int = 2
    dropout_rate: float = 0.2


@dataclass(frozen=True)
class TrainSection:
    lr: float = 0.002
    lr_decay: float = 0.7
    decay_patience: int = 2
    decay_threshold: float = 0.003
    epochs: int = 20
    batch_size: int = 8


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = CorpusConfig()
    stft: StftSection = StftSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    gamma: float = 0.0
    gamma_list: Any = "auto"
    gamma_exponents: tuple = (-1, 0, 1, 2, 3, 4, 5, 6)
    trials_per_gamma: int = 5
    base_seed: int = 0
    costgap_epochs: tuple = (1, 15)
    output_dir: str = "runs/default"
    jobs: int = 1

    def __post_init__(self):
        c = self.corpus
        if c.duration_s <= 0:
            raise ConfigError("corpus.duration_s must be positive")
        if not 0 <= c.sir_low_db <= c.sir_high_db:
            raise ConfigError("corpus SIR range must satisfy 0 <= low <= high")
        for kind in c.kinds:
            SourceKind(kind)
        ranges = sorted(((c.seed_range(s).start, c.seed_range(s).stop), s) for s in SPLITS)
        for (r1, s1), (r2, s2) in zip(ranges, ranges[1:]):
            if r1[1] > r2[0]:
                raise ConfigError(f"seed ranges of splits {s1!r} and {s2!r} overlap")
        for s in SPLITS:
            if c.split(s).count < 1:
                raise ConfigError(f"split {s!r} must contain at least one mixture")
        if self.trials_per_gamma < 1:
            raise ConfigError("trials_per_gamma must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.gamma_list != "auto":
            gammas = [float(g) for g in self.gamma_list]
            if not gammas or any(g < 0 for g in gammas):
                raise ConfigError("gamma_list must be 'auto' or a nonempty list of values >= 0")
            if 0.0 not in gammas:
                gammas.insert(0, 0.0)
            object.__setattr__(self, "gamma_list", tuple(sorted(set(gammas))))
        self.stft_config()

    def stft_config(self) -> StftConfig:
        return StftConfig(
            frame_len=self.stft.frame_len,
            hop=self.stft.hop,
            fft_size=self.stft.fft_size,
            sample_rate=self.corpus.sample_rate,
        )

    @property
    def root(self) -> Path:
        return Path(self.output_dir)

    def separator_config(self, seed: int) -> SeparatorConfig:
        return SeparatorConfig(input_dim=self.stft_config().n_bins, num_sources=2, seed=seed, **dataclasses.asdict(self.model))

    def train_config(self, gamma: float, seed: int) -> TrainConfig:
        return TrainConfig(gamma=gamma, seed=seed, **dataclasses.asdict(self.train))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gamma_list"] = self.gamma_list if self.gamma_list == "auto" else list(self.gamma_list)
        return _lists(d)


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


def _build(cls, data, where: str = "", base=None):
    """Instantiate a config dataclass from nested mappings, rejecting unknown keys.

    Keys missing from ``data`` keep their value from ``base`` (or the field default).
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} in {where or 'top level'}")
    kwargs = {}
    for name, value in data.items():
        default = fields[name].default
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, f"{where}{name}.", base=default)
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, dict(data or {}))


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML config (or defaults) and apply dotted-key ``overrides``."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key!r}: {part!r} is not a section")
        node[parts[-1]] = value
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


def quantized_mix_at_sir(target: SignalBuffer, interferer: SignalBuffer, sir_db: float, max_iter: int = 60):
    """Scale and 16-bit-quantise a pair so the stored files realise ``sir_db``.

    Rounding to 16 bits perturbs the power ratio by ~1e-5 dB.  The interferer
    gain is refined first (damped, keeping the best iterate); what remains is
    removed by moving single interferer samples one quantisation step, each
    move changing the interferer power by a small known amount.
    """
    _, (t, i) = dsp.mix_at_sir(target, interferer, sir_db)
    qt = dsp.quantize_pcm16(t.samples)
    gain, step, prev = 1.0, 1.0, None
    best_err, best_qi = np.inf, None
    for _ in range(max_iter):
        qi = dsp.quantize_pcm16(i.samples * gain)
        err = dsp.sir_db(qt, qi) - sir_db
        if abs(err) < abs(best_err):
            best_err, best_qi = err, qi
        if abs(err) < 1e-9:
            break
        if prev is not None and np.sign(err) != np.sign(prev):
            step *= 0.5
        prev = err
        gain *= 10.0 ** (step * err / 20.0)
    qi = best_qi.copy()
    lsb = 1.0 / dsp.PCM16_SCALE
    p_target = float(qt @ qt)
    for _ in range(max_iter):
        p_interf = float(qi @ qi)
        if abs(10.0 * np.log10(p_target / p_interf) - sir_db) < 1e-9:
            break
        wanted = p_target * 10.0 ** (-sir_db / 10.0) - p_interf
        # power change from moving sample k up or down by one step
        up = 2.0 * qi * lsb + lsb * lsb
        down = -2.0 * qi * lsb + lsb * lsb
        up[qi + lsb > 32767 * lsb] = np.inf
        down[qi - lsb < -1.0] = np.inf
        k_up, k_down = int(np.argmin(np.abs(up - wanted))), int(np.argmin(np.abs(down - wanted)))
        if abs(up[k_up] - wanted) <= abs(down[k_down] - wanted):
            qi[k_up] += lsb
        else:
            qi[k_down] -= lsb
    sr = target.sample_rate
    return SignalBuffer(qt, sr), SignalBuffer(qi, sr)


def synth_mixture(cfg: CorpusConfig, split: str, index: int):
    """Deterministic (target, interferer, sir_db, seed) for mixture ``index`` of ``split``."""
    spec = cfg.split(split)
    seed = spec.seed + 2 * index
    rng = np.random.default_rng([spec.seed, index])
    kind_t, kind_i = (cfg.kinds[j] for j in rng.integers(0, len(cfg.kinds), 2))
    sir = float(rng.uniform(cfg.sir_low_db, cfg.sir_high_db))
    target = dsp.synth_source(kind_t, cfg.duration_s, seed, cfg.sample_rate)
    interferer = dsp.synth_source(kind_i, cfg.duration_s, seed + 1, cfg.sample_rate)
    return target, interferer, sir, seed


def manifest_path(root: Path, split: str) -> Path:
    return root / "corpus" / f"{split}.manifest.csv"


def cmd_synth(cfg: ExperimentConfig) -> dict[str, Path]:
    """Write the WAV corpus and one manifest per split; returns manifest paths."""
    out = {}
    corpus_dir = cfg.root / "corpus"
    for split in SPLITS:
        rows = []
        for i in range(cfg.corpus.split(split).count):
            target, interferer, sir, seed = synth_mixture(cfg.corpus, split, i)
            qt, qi = quantized_mix_at_sir(target, interferer, sir)
            utt_id = f"{split}{i:04d}"
            paths = []
            for k, sig in enumerate((qt, qi)):
                rel = f"{split}/{utt_id}_{k}.wav"
                dsp.write_wav(corpus_dir / rel, sig)
                paths.append(rel)
            rows.append((paths[0], paths[1], sir, seed))
        out[split] = manifest_path(cfg.root, split)
        write_csv(out[split], MANIFEST_HEADER, rows)
        log.info("wrote %d mixtures to %s", len(rows), out[split])
    atomic_write_text(cfg.root / "config.resolved.yaml", dump_config(cfg))
    return out


@dataclass(frozen=True)
class CorpusEntry:
    utt_id: str
    target: SignalBuffer
    interferer: SignalBuffer
    sir_db: float
    seed: int

    @property
    def sources(self):
        return [self.target, self.interferer]

    @property
    def mixture(self) -> SignalBuffer:
        return SignalBuffer(self.target.samples + self.interferer.samples, self.target.sample_rate)


def read_manifest(path: str | Path) -> list[CorpusEntry]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path} (run the synth subcommand first)")
    rows = read_csv(path)
    if not rows:
        raise DataError(f"{path}: manifest is empty")
    if tuple(rows[0]) != MANIFEST_HEADER:
        raise DataError(f"{path}: expected columns {MANIFEST_HEADER}, got {tuple(rows[0])}")
    entries = []
    for row in rows:
        target = dsp.read_wav(path.parent / row["target"])
        interferer = dsp.read_wav(path.parent / row["interferer"])
        utt_id = Path(row["target"]).stem.rsplit("_", 1)[0]
        entries.append(CorpusEntry(utt_id, target, interferer, float(row["sir_db"]), int(row["seed"])))
    return entries


def manifest_digest(path: Path) -> str:
    """sha256 over a manifest and every WAV file it lists."""
    path = Path(path)
    h = hashlib.sha256(path.read_bytes())
    for row in read_csv(path):
        for col in ("target", "interferer"):
            h.update((path.parent / row[col]).read_bytes())
    return h.hexdigest()


@lru_cache(maxsize=8)
def _load_utterances(path: str, stft_cfg: StftConfig, digest: str) -> tuple:
    return tuple(
        utterance_from_signals(e.mixture, e.sources, stft_cfg, e.utt_id) for e in read_manifest(path)
    )


def load_utterances(path: Path, stft_cfg: StftConfig) -> tuple[Utterance, ...]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path} (run the synth subcommand first)")
    return _load_utterances(str(path), stft_cfg, manifest_digest(path))


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------


def loss_label(gamma: float) -> str:
    return "pit" if gamma == 0 else "prob_pit"


def run_name(gamma: float, seed: int) -> str:
    return f"gamma{gamma!r}_seed{seed}"


def corpus_digest(root: Path) -> str:
    """Hash of the train and validation manifests and the audio they list."""
    parts = []
    for split in ("train", "val"):
        path = manifest_path(root, split)
        parts.append(manifest_digest(path) if path.exists() else "missing")
    return hashlib.sha256("".join(parts).encode()).hexdigest()


def run_fingerprint(cfg: ExperimentConfig, gamma: float, seed: int) -> str:
    relevant = {
        "corpus_files": corpus_digest(cfg.root),
        "corpus": _lists(dataclasses.asdict(cfg.corpus)),
        "stft": dataclasses.asdict(cfg.stft),
        "model": dataclasses.asdict(cfg.model),
        "train": dataclasses.asdict(cfg.train),
        "costgap_epochs": list(cfg.costgap_epochs),
        "gamma": repr(float(gamma)),
        "seed": seed,
    }
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()[:16]


def _costs_rows(records: list) -> list:
    return [(utt_id, *(float(c) for c in costs)) for utt_id, costs in records]


def cmd_train(cfg: ExperimentConfig, gamma: float, seed: int, reuse: bool = False) -> Path:
    """Train one model; returns its run directory.

    With ``reuse`` an existing run whose fingerprint matches is left as is.
    """
    gamma = float(gamma)
    run_dir = cfg.root / "runs" / run_name(gamma, seed)
    fingerprint = run_fingerprint(cfg, gamma, seed)
    meta_path = run_dir / "meta.json"
    if reuse and meta_path.exists() and (run_dir / "checkpoint.json").exists():
        if json.loads(meta_path.read_text()).get("fingerprint") == fingerprint:
            return run_dir
    stft_cfg = cfg.stft_config()
    train_set = load_utterances(manifest_path(cfg.root, "train"), stft_cfg)
    val_set = load_utterances(manifest_path(cfg.root, "val"), stft_cfg)
    model = SeparatorModel(cfg.separator_config(seed))
    tc = cfg.train_config(gamma, seed)
    record_epochs = set(cfg.costgap_epochs)
    recorded: dict[int, list] = {e: [] for e in record_epochs if e <= tc.epochs}

    def on_batch(epoch, batch, result):
        if epoch in recorded:
            for utt, pc in zip(batch, result.costs):
                recorded[epoch].append((utt.utt_id, pc.costs))

    history = train(model, train_set, val_set, tc, loss_label(gamma), on_batch=on_batch)
    label = loss_label(gamma)
    meta = {
        "gamma": gamma,
        "seed": seed,
        "loss_kind": label,
        "label": label,
        "fingerprint": fingerprint,
        "epochs_completed": len(history),
        "final_lr": history[-1].lr * (tc.lr_decay if history[-1].lr_changed else 1.0),
    }
    save_checkpoint(run_dir / "checkpoint.json", model, train_seed=seed, meta=meta)
    write_csv(
        run_dir / "history.csv",
        ("epoch", "train_loss", "val_loss", "lr", "lr_reduced"),
        [(h.epoch, h.train_loss, h.val_loss, h.lr, int(h.lr_changed)) for h in history],
    )
    for epoch, records in sorted(recorded.items()):
        records.sort(key=lambda r: r[0])
        n = len(records[0][1]) if records else 2
        write_csv(run_dir / f"costs_epoch{epoch}.csv", ("utt_id", *[f"perm{k}" for k in range(n)]), _costs_rows(records))
    atomic_write_text(meta_path, json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return run_dir


EVAL_HEADER = ("utt_id", "source", "sdr_db", "sir_db", "sar_db", "permutation")


def eval_rows(estimates_per_utt, entries) -> list:
    rows = []
    for entry, estimates in zip(entries, estimates_per_utt):
        report = eval_separation(estimates, entry.sources)
        perm = "-".join(str(p) for p in report.permutation)
        for s in range(len(entry.sources)):
            rows.append((entry.utt_id, s, report.sdr_db[s], report.sir_db[s], report.sar_db[s], perm))
    return rows


def summary_row(rows) -> tuple:
    cols = np.array([[r[2], r[3], r[4]] for r in rows])
    means = cols.mean(axis=0)
    return ("mean", "all", float(means[0]), float(means[1]), float(means[2]), "")


def ideal_mask_estimates(entry: CorpusEntry, stft_cfg: StftConfig) -> list[SignalBuffer]:
    """Ideal ratio masks |X_s| / sum_k |X_k| applied with mixture phase."""
    spec = dsp.stft(entry.mixture, stft_cfg)
    mags = np.stack([np.abs(dsp.stft(s, stft_cfg).bins) for s in entry.sources])
    total = mags.sum(axis=0)
    masks = np.divide(mags, total, out=np.full_like(mags, 1.0 / len(mags)), where=total > 0)
    mix_mag = np.abs(spec.bins)
    n = len(entry.mixture)
    return [dsp.reconstruct_with_mixture_phase(dsp.MagSpectrogram(m * mix_mag), spec, length=n) for m in masks]


ESTIMATORS = ("model", "ideal", "mixture")


def cmd_eval(cfg: ExperimentConfig, checkpoint: Path | None, manifest: Path, out_csv: Path, estimator: str = "model") -> list:
    """Evaluate a checkpoint (or an oracle estimator) on a manifest; returns data rows."""
    if estimator not in ESTIMATORS:
        raise ConfigError(f"estimator must be one of {ESTIMATORS}")
    entries = read_manifest(manifest)
    stft_cfg = cfg.stft_config()
    if estimator == "model":
        if checkpoint is None:
            raise ConfigError("model evaluation needs a checkpoint")
        model, _ = load_checkpoint(checkpoint)
        if model.config.input_dim != stft_cfg.n_bins:
            raise ConfigError(f"checkpoint expects {model.config.input_dim} bins, STFT config gives {stft_cfg.n_bins}")
        estimates = [separate(model, e.mixture, stft_cfg) for e in entries]
    elif estimator == "ideal":
        estimates = [ideal_mask_estimates(e, stft_cfg) for e in entries]
    else:
        estimates = [[e.mixture] * len(e.sources) for e in entries]
    rows = eval_rows(estimates, entries)
    write_csv(out_csv, EVAL_HEADER, rows + [summary_row(rows)])
    return rows


def _train_and_eval(args) -> Path:
    cfg, gamma, seed = args
    run_dir = cmd_train(cfg, gamma, seed, reuse=True)
    eval_csv = run_dir / "eval.csv"
    meta = json.loads((run_dir / "meta.json").read_text())
    if not (eval_csv.exists() and meta.get("evaluated") == meta["fingerprint"]):
        cmd_eval(cfg, run_dir / "checkpoint.json", manifest_path(cfg.root, "test"), eval_csv)
        meta["evaluated"] = meta["fingerprint"]
        atomic_write_text(run_dir / "meta.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return run_dir


def _run_jobs(cfg: ExperimentConfig, jobs: list) -> list[Path]:
    if cfg.jobs == 1 or len(jobs) == 1:
        return [_train_and_eval(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
        return list(pool.map(_train_and_eval, jobs))


# ---------------------------------------------------------------------------
# cost gap
# ---------------------------------------------------------------------------


def read_costs(path: Path) -> np.ndarray:
    rows = read_csv(path)
    if not rows:
        raise DataError(f"{path}: no cost records")
    keys = [k for k in rows[0] if k.startswith("perm")]
    return np.array([[float(r[k]) for k in keys] for r in rows])


def relative_gap(costs: np.ndarray) -> np.ndarray:
    """|cost1 - cost2| / max(cost1, cost2) per utterance (cost1 = min, cost2 = max)."""
    lo = costs.min(axis=1)
    hi = costs.max(axis=1)
    return np.divide(hi - lo, hi, out=np.zeros_like(hi), where=hi > 0)


def costgap_report(run_dir: Path, out_dir: Path, epochs) -> list[dict]:
    summary = []
    for epoch in epochs:
        path = run_dir / f"costs_epoch{epoch}.csv"
        if not path.exists():
            raise DataError(f"{path}: epoch {epoch} was not recorded (is epochs >= {epoch}?)")
        costs = read_costs(path)
        if costs.shape[1] != 2:
            raise ConfigError("the cost-gap study needs two-source mixtures")
        cost1, cost2 = costs.min(axis=1), costs.max(axis=1)
        write_csv(out_dir / f"costs_epoch{epoch}.csv", ("cost1", "cost2"), zip(cost1, cost2))
        for name, values in (("cost1", cost1), ("cost2", cost2)):
            curve = kde(values)
            write_csv(out_dir / f"kde_{name}_epoch{epoch}.csv", ("grid", "density"), zip(curve.grid, curve.density))
        summary.append(
            {
                "epoch": epoch,
                "n": len(cost1),
                "median_relative_gap": float(np.median(relative_gap(costs))),
                "median_abs_gap": float(np.median(cost2 - cost1)),
            }
        )
    write_csv(
        out_dir / "summary.csv",
        ("epoch", "n", "median_relative_gap", "median_abs_gap"),
        [tuple(s.values()) for s in summary],
    )
    return summary


def cmd_costgap(cfg: ExperimentConfig, seed: int) -> list[dict]:
    """PIT run with per-utterance costs recorded at ``cfg.costgap_epochs``."""
    run_dir = cmd_train(cfg, 0.0, seed, reuse=True)
    return costgap_report(run_dir, cfg.root / "costgap" / f"seed{seed}", cfg.costgap_epochs)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

TRIAL_HEADER = (
    "gamma", "trial", "seed", "sdr_src0", "sdr_src1", "sir_src0", "sir_src1", "sdr_mean", "sir_mean", "run",
)
SUMMARY_HEADER = ("gamma", "metric", "n", "mean", "min", "q1", "median", "q3", "max")
TTEST_HEADER = ("gamma", "metric", "n", "mean_diff", "t_stat", "dof", "p_value")
SWEEP_METRICS = ("sdr_mean", "sir_mean", "sdr_src0", "sdr_src1", "sir_src0", "sir_src1")


def trial_row(gamma: float, trial: int, seed: int, run_dir: Path) -> tuple:
    rows = [r for r in read_csv(run_dir / "eval.csv") if r["utt_id"] != "mean"]
    by_source = {}
    for r in rows:
        by_source.setdefault(int(r["source"]), []).append((float(r["sdr_db"]), float(r["sir_db"])))
    sdr = [float(np.mean([v[0] for v in by_source[s]])) for s in (0, 1)]
    sir = [float(np.mean([v[1] for v in by_source[s]])) for s in (0, 1)]
    return (gamma, trial, seed, sdr[0], sdr[1], sir[0], sir[1], float(np.mean(sdr)), float(np.mean(sir)), run_dir.name)


def box_stats(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return (v.size, float(v.mean()), float(v.min()), float(q1), float(med), float(q3), float(v.max()))


def calibrate_gamma_scale(costs: np.ndarray) -> float:
    """Median epoch-1 |cost1 - cost2|: the scale the auto gamma list is built on."""
    scale = float(np.median(np.abs(costs.max(axis=1) - costs.min(axis=1))))
    if not scale > 0:
        raise DegenerateInputError("epoch-1 cost gaps are all zero; cannot calibrate gamma")
    return scale


@dataclass
class SweepReport:
    gammas: list
    trials: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    ttests: list = field(default_factory=list)
    gamma_scale: float | None = None
    costgap: list = field(default_factory=list)

    def mean_metric(self, gamma: float, metric: str = "sdr_mean") -> float:
        col = TRIAL_HEADER.index(metric)
        return float(np.mean([r[col] for r in self.trials if r[0] == gamma]))


def cmd_sweep(cfg: ExperimentConfig) -> SweepReport:
    seeds = [cfg.base_seed + t for t in range(cfg.trials_per_gamma)]
    sweep_dir = cfg.root / "sweep"
    baseline_dirs = _run_jobs(cfg, [(cfg, 0.0, s) for s in seeds])
    scale = None
    costgap = []
    first_epoch = min(cfg.costgap_epochs)
    if cfg.costgap_epochs and (baseline_dirs[0] / f"costs_epoch{first_epoch}.csv").exists():
        recorded = [e for e in cfg.costgap_epochs if (baseline_dirs[0] / f"costs_epoch{e}.csv").exists()]
        costgap = costgap_report(baseline_dirs[0], sweep_dir / "costgap", recorded)
    if cfg.gamma_list == "auto":
        costs_path = baseline_dirs[0] / f"costs_epoch{first_epoch}.csv"
        if not costs_path.exists():
            raise ConfigError("auto gamma calibration needs epoch-1 costs; include 1 in costgap_epochs")
        scale = calibrate_gamma_scale(read_costs(costs_path))
        gammas = [0.0] + [scale * 2.0**k for k in cfg.gamma_exponents]
    else:
        gammas = list(cfg.gamma_list)
    positive = [g for g in gammas if g > 0]
    other_dirs = _run_jobs(cfg, [(cfg, g, s) for g in positive for s in seeds])

    report = SweepReport(gammas=gammas, gamma_scale=scale, costgap=costgap)
    dirs = iter(baseline_dirs + other_dirs)
    for g in [0.0] + positive:
        for t, s in enumerate(seeds):
            report.trials.append(trial_row(g, t, s, next(dirs)))
    write_csv(sweep_dir / "trials.csv", TRIAL_HEADER, report.trials)

    for g in [0.0] + positive:
        rows = [r for r in report.trials if r[0] == g]
        for metric in SWEEP_METRICS:
            col = TRIAL_HEADER.index(metric)
            values = [r[col] for r in rows]
            report.summary.append((g, metric, *box_stats(values)))
            if len(values) >= 2 and np.ptp(values) > 0:
                curve = kde(values)
                write_csv(sweep_dir / "kde" / f"{metric}_gamma{g!r}.csv", ("grid", "density"), zip(curve.grid, curve.density))
    write_csv(sweep_dir / "summary.csv", SUMMARY_HEADER, report.summary)

    base = [r for r in report.trials if r[0] == 0.0]
    for g in positive:
        rows = [r for r in report.trials if r[0] == g]
        for metric in ("sdr_mean", "sir_mean"):
            col = TRIAL_HEADER.index(metric)
            a = [r[col] for r in rows]
            b = [r[col] for r in base]
            try:
                tt = paired_ttest(a, b)
                report.ttests.append((g, metric, len(a), tt.mean_diff, tt.t_stat, tt.dof, tt.p_value))
            except DegenerateInputError:
                report.ttests.append((g, metric, len(a), float(np.mean(a) - np.mean(b)), "", len(a) - 1, ""))
    write_csv(sweep_dir / "ttest.csv", TTEST_HEADER, report.ttests)

    meta = {
        "gamma_scale": scale,
        "gammas": gammas,
        "trials_per_gamma": cfg.trials_per_gamma,
        "seeds": seeds,
        "runs": len(report.trials),
    }
    atomic_write_text(sweep_dir / "meta.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
    atomic_write_text(cfg.root / "config.resolved.yaml", dump_config(cfg))
    return report
