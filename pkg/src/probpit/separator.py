"""Mask-based recurrent separator with hand-written backpropagation.

Architecture, per frame::

    log1p(|Y|) -> tanh feed-forward -> (dropout) -> GRU x L -> linear
               -> softmax over sources per bin -> masks,   O_s = mask_s * |Y|

All parameters live in one flat float64 vector; ``SeparatorModel.layout``
maps names to (offset, shape) views into it.  Forward passes work on a batch
of equal-length utterances stored time-major, ``(M, B, features)``.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dsp import MagSpectrogram, SignalBuffer, StftConfig, reconstruct_with_mixture_phase, stft
from .errors import CheckpointVersionError, ConfigError, ContractError, DataError, NumericError, ShapeError
from .io import atomic_write_text
from .loss import prob_pit_grad

CHECKPOINT_FORMAT = "probpit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SeparatorConfig:
    input_dim: int = 129
    hidden_ff: int = 64
    hidden_rec: int = 48
    num_rec_layers: int = 2
    num_sources: int = 2
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("input_dim", "hidden_ff", "hidden_rec", "num_rec_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_sources < 2:
            raise ConfigError("num_sources must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


def param_layout(cfg: SeparatorConfig) -> dict[str, tuple[int, tuple[int, ...]]]:
    shapes = [("ff.W", (cfg.hidden_ff, cfg.input_dim)), ("ff.b", (cfg.hidden_ff,))]
    n_in = cfg.hidden_ff
    h = cfg.hidden_rec
    for layer in range(cfg.num_rec_layers):
        shapes += [
            (f"rec{layer}.Wx", (3 * h, n_in)),
            (f"rec{layer}.Wh", (3 * h, h)),
            (f"rec{layer}.b", (3 * h,)),
        ]
        n_in = h
    shapes += [("out.W", (cfg.num_sources * cfg.input_dim, h)), ("out.b", (cfg.num_sources * cfg.input_dim,))]
    layout, offset = {}, 0
    for name, shape in shapes:
        layout[name] = (offset, shape)
        offset += math.prod(shape)
    return layout


class SeparatorModel:
    def __init__(self, config: SeparatorConfig, params: np.ndarray | None = None):
        self.config = config
        self.layout = param_layout(config)
        size = sum(math.prod(shape) for _, shape in self.layout.values())
        if params is None:
            params = self._init_params(size)
        params = np.array(params, dtype=np.float64)
        if params.shape != (size,):
            raise ShapeError(f"expected {size} parameters for this config, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise DataError("parameters contain NaN or Inf")
        self.params = params
        self.version = 0

    def _init_params(self, size: int) -> np.ndarray:
        rng = np.random.default_rng(self.config.seed)
        params = np.zeros(size)
        for name, (offset, shape) in self.layout.items():
            if len(shape) == 2:
                fan_out, fan_in = shape
                bound = math.sqrt(6.0 / (fan_in + fan_out))
                params[offset : offset + math.prod(shape)] = rng.uniform(-bound, bound, math.prod(shape))
        return params

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        return self.params[offset : offset + math.prod(shape)].reshape(shape)

    @property
    def n_params(self) -> int:
        return self.params.size

    def mark_updated(self):
        """Invalidate forward caches after an in-place parameter change."""
        self.version += 1

    def copy(self) -> "SeparatorModel":
        return SeparatorModel(self.config, self.params.copy())


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_finite(arr: np.ndarray, layer: str):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite activation in layer {layer}")


@dataclass
class ForwardCache:
    version: int
    mix: np.ndarray  # (M, B, F) mixture magnitudes
    feat: np.ndarray
    ff_act: np.ndarray
    drop_mask: np.ndarray | None
    rec: list = field(default_factory=list)  # per layer dict of saved tensors
    masks: np.ndarray | None = None  # (M, B, S, F)


def _forward_batch(model: SeparatorModel, mix: np.ndarray, train_mode: bool, rng=None):
    """``mix``: (M, B, F) magnitudes.  Returns masks (M, B, S, F) and the cache."""
    cfg = model.config
    if mix.shape[-1] != cfg.input_dim:
        raise ShapeError(f"input has {mix.shape[-1]} bins, model expects {cfg.input_dim}")
    n_frames, batch, _ = mix.shape
    feat = np.log1p(mix)
    ff_act = np.tanh(feat @ model["ff.W"].T + model["ff.b"])
    _check_finite(ff_act, "ff")
    drop_mask = None
    x = ff_act
    if train_mode and cfg.dropout_rate > 0:
        if rng is None:
            raise ContractError("train-mode dropout needs a random generator")
        keep = 1.0 - cfg.dropout_rate
        drop_mask = (rng.random(ff_act.shape) < keep) / keep
        x = ff_act * drop_mask
    cache = ForwardCache(version=model.version, mix=mix, feat=feat, ff_act=ff_act, drop_mask=drop_mask)

    h_dim = cfg.hidden_rec
    for layer in range(cfg.num_rec_layers):
        wh = model[f"rec{layer}.Wh"]
        ax = x @ model[f"rec{layer}.Wx"].T + model[f"rec{layer}.b"]
        r = np.empty((n_frames, batch, h_dim))
        z = np.empty_like(r)
        n = np.empty_like(r)
        hn = np.empty_like(r)
        hs = np.empty((n_frames + 1, batch, h_dim))
        hs[0] = 0.0
        for t in range(n_frames):
            ah = hs[t] @ wh.T
            r[t] = _sigmoid(ax[t, :, :h_dim] + ah[:, :h_dim])
            z[t] = _sigmoid(ax[t, :, h_dim : 2 * h_dim] + ah[:, h_dim : 2 * h_dim])
            hn[t] = ah[:, 2 * h_dim :]
            n[t] = np.tanh(ax[t, :, 2 * h_dim :] + r[t] * hn[t])
            hs[t + 1] = (1.0 - z[t]) * n[t] + z[t] * hs[t]
        _check_finite(hs, f"rec{layer}")
        cache.rec.append({"x": x, "r": r, "z": z, "n": n, "hn": hn, "hs": hs})
        x = hs[1:]

    logits = x @ model["out.W"].T + model["out.b"]
    logits = logits.reshape(n_frames, batch, cfg.num_sources, cfg.input_dim)
    _check_finite(logits, "out")
    logits = logits - logits.max(axis=2, keepdims=True)
    e = np.exp(logits)
    masks = e / e.sum(axis=2, keepdims=True)
    cache.masks = masks
    return masks, cache


def _backward_batch(model: SeparatorModel, cache: ForwardCache, grad_out: np.ndarray) -> np.ndarray:
    """``grad_out``: d(loss)/d(estimates), (M, B, S, F).  Returns the flat parameter gradient."""
    if cache.version != model.version:
        raise ContractError("forward cache is stale: parameters changed since the forward pass")
    cfg = model.config
    if grad_out.shape != cache.masks.shape:
        raise ShapeError(f"gradient shape {grad_out.shape} != estimate shape {cache.masks.shape}")
    grad = np.zeros_like(model.params)

    def put(name, value):
        offset, shape = model.layout[name]
        grad[offset : offset + math.prod(shape)] = value.reshape(-1)

    masks = cache.masks
    n_frames, batch = masks.shape[:2]
    d_mask = grad_out * cache.mix[:, :, None, :]
    d_logit = masks * (d_mask - (masks * d_mask).sum(axis=2, keepdims=True))
    d_logit = d_logit.reshape(n_frames * batch, -1)
    x_last = cache.rec[-1]["hs"][1:].reshape(n_frames * batch, -1)
    put("out.W", d_logit.T @ x_last)
    put("out.b", d_logit.sum(axis=0))
    dx = (d_logit @ model["out.W"]).reshape(n_frames, batch, -1)

    h_dim = cfg.hidden_rec
    for layer in reversed(range(cfg.num_rec_layers)):
        saved = cache.rec[layer]
        r, z, n, hn, hs = saved["r"], saved["z"], saved["n"], saved["hn"], saved["hs"]
        wh = model[f"rec{layer}.Wh"]
        d_ax = np.empty((n_frames, batch, 3 * h_dim))
        d_ah = np.empty_like(d_ax)
        dh_next = np.zeros((batch, h_dim))
        for t in reversed(range(n_frames)):
            dh = dx[t] + dh_next
            d_an = dh * (1.0 - z[t]) * (1.0 - n[t] ** 2)
            d_ar = d_an * hn[t] * r[t] * (1.0 - r[t])
            d_az = dh * (hs[t] - n[t]) * z[t] * (1.0 - z[t])
            d_ax[t, :, :h_dim] = d_ar
            d_ax[t, :, h_dim : 2 * h_dim] = d_az
            d_ax[t, :, 2 * h_dim :] = d_an
            d_ah[t, :, :h_dim] = d_ar
            d_ah[t, :, h_dim : 2 * h_dim] = d_az
            d_ah[t, :, 2 * h_dim :] = d_an * r[t]
            dh_next = dh * z[t] + d_ah[t] @ wh
        x_in = saved["x"]
        flat_ax = d_ax.reshape(n_frames * batch, -1)
        put(f"rec{layer}.Wx", flat_ax.T @ x_in.reshape(n_frames * batch, -1))
        put(f"rec{layer}.b", flat_ax.sum(axis=0))
        put(f"rec{layer}.Wh", d_ah.reshape(n_frames * batch, -1).T @ hs[:-1].reshape(n_frames * batch, -1))
        dx = d_ax @ model[f"rec{layer}.Wx"]

    if cache.drop_mask is not None:
        dx = dx * cache.drop_mask
    d_ff = (dx * (1.0 - cache.ff_act**2)).reshape(n_frames * batch, -1)
    put("ff.W", d_ff.T @ cache.feat.reshape(n_frames * batch, -1))
    put("ff.b", d_ff.sum(axis=0))
    return grad


def _mag_array(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a (bins, frames) magnitude array, got shape {arr.shape}")
    return arr


def forward(model: SeparatorModel, mixture_mag, train_mode: bool = False, rng=None):
    """Masks for one utterance, shape (S, bins, frames), and the cache for :func:`backward`."""
    mix = _mag_array(mixture_mag)
    masks, cache = _forward_batch(model, mix.T[:, None, :], train_mode, rng)
    return masks[:, 0].transpose(1, 2, 0), cache


def backward(model: SeparatorModel, cache: ForwardCache, grad_outputs) -> np.ndarray:
    """Parameter gradient given d(loss)/d(estimate_s) for each source, shape (S, bins, frames)."""
    g = np.asarray(grad_outputs, dtype=np.float64)
    return _backward_batch(model, cache, g.transpose(2, 0, 1)[:, None])


def estimate_sources(masks, mixture_mag) -> np.ndarray:
    m = np.asarray(masks, dtype=np.float64)
    mix = _mag_array(mixture_mag)
    if m.shape[1:] != mix.shape:
        raise ShapeError(f"mask shape {m.shape[1:]} != mixture shape {mix.shape}")
    return m * mix


@dataclass(frozen=True, eq=False)
class Utterance:
    """Training example: mixture magnitudes (bins, M) and targets (S, bins, M)."""

    mixture: np.ndarray
    targets: np.ndarray
    utt_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.mixture.shape[1]


def utterance_from_signals(
    mixture: SignalBuffer, sources: Sequence[SignalBuffer], cfg: StftConfig, utt_id: str = ""
) -> Utterance:
    mix = np.abs(stft(mixture, cfg).bins)
    targets = np.stack([np.abs(stft(s, cfg).bins) for s in sources])
    return Utterance(mix, targets, utt_id)


@dataclass
class BatchResult:
    loss: float  # mean over utterances of loss / (S * bins * M)
    grad: np.ndarray | None
    costs: list  # PermutationCosts per utterance, in input order


def _group_by_length(utts: Sequence[Utterance]):
    groups: dict[int, list[int]] = {}
    for i, u in enumerate(utts):
        groups.setdefault(u.n_frames, []).append(i)
    return groups.values()


def batch_loss_and_grad(
    model: SeparatorModel,
    utts: Sequence[Utterance],
    gamma: float,
    train_mode: bool = False,
    rng=None,
    with_grad: bool = True,
) -> BatchResult:
    """Normalised loss and gradient averaged over ``utts``.

    Each utterance contributes ``loss / (S * bins * M)``; gamma acts on the
    raw summed squared errors before this normalisation.
    """
    if not utts:
        raise DataError("empty batch")
    grad = np.zeros_like(model.params) if with_grad else None
    losses = [0.0] * len(utts)
    costs = [None] * len(utts)
    for idx in _group_by_length(utts):
        mix = np.stack([utts[i].mixture.T for i in idx], axis=1)
        masks, cache = _forward_batch(model, mix, train_mode, rng)
        est = masks * mix[:, :, None, :]
        grad_out = np.empty_like(est) if with_grad else None
        for k, i in enumerate(idx):
            outputs = est[:, k].transpose(1, 2, 0)
            res = prob_pit_grad(outputs, utts[i].targets, gamma)
            norm = 1.0 / outputs.size
            losses[i] = res.loss * norm
            costs[i] = res.costs
            if with_grad:
                grad_out[:, k] = (res.grad * norm).transpose(2, 0, 1)
        if with_grad:
            grad += _backward_batch(model, cache, grad_out)
    if with_grad:
        grad /= len(utts)
    return BatchResult(loss=float(np.mean(losses)), grad=grad, costs=costs)


class Adam:
    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0005
    lr_decay: float = 0.7
    decay_patience: int = 2
    decay_threshold: float = 0.003
    epochs: int = 50
    batch_size: int = 32
    gamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0.0 < self.lr_decay < 1.0:
            raise ConfigError("lr_decay must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.decay_patience < 1:
            raise ConfigError("epochs, batch_size and decay_patience must be >= 1")
        if not self.gamma >= 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")


class LrSchedule:
    """Multiply the rate by ``decay`` once validation loss has improved by
    less than ``threshold`` (absolute) in ``patience`` consecutive epochs."""

    def __init__(self, lr: float, decay: float, patience: int, threshold: float):
        self.lr = lr
        self.decay = decay
        self.patience = patience
        self.threshold = threshold
        self._prev = None
        self._stalled = 0

    def update(self, val_loss: float) -> bool:
        changed = False
        if self._prev is not None:
            if self._prev - val_loss < self.threshold:
                self._stalled += 1
            else:
                self._stalled = 0
            if self._stalled >= self.patience:
                self.lr *= self.decay
                self._stalled = 0
                changed = True
        self._prev = val_loss
        return changed


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    lr_changed: bool


LOSS_KINDS = ("pit", "prob_pit")


def train(
    model: SeparatorModel,
    train_set: Sequence[Utterance],
    val_set: Sequence[Utterance],
    tc: TrainConfig,
    loss_kind: str = "prob_pit",
    on_batch: Callable[[int, list, BatchResult], None] | None = None,
) -> list[EpochRecord]:
    """Train ``model`` in place with Adam; returns one record per epoch.

    ``lr`` in each record is the rate used during that epoch; ``lr_changed``
    marks that the schedule reduced it afterwards.  ``on_batch(epoch,
    utterances, result)`` sees every training batch's forward results.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {loss_kind!r}")
    if not train_set or not val_set:
        raise DataError("training and validation splits must both be nonempty")
    gamma = 0.0 if loss_kind == "pit" else tc.gamma
    shuffle_rng = np.random.default_rng([tc.seed, 0])
    dropout_rng = np.random.default_rng([tc.seed, 1])
    opt = Adam(model.n_params, tc.lr)
    schedule = LrSchedule(tc.lr, tc.lr_decay, tc.decay_patience, tc.decay_threshold)
    history = []
    for epoch in range(1, tc.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        opt.lr = schedule.lr
        batch_losses = []
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            batch = [train_set[i] for i in order[start : start + tc.batch_size]]
            res = batch_loss_and_grad(model, batch, gamma, train_mode=True, rng=dropout_rng)
            if not np.isfinite(res.loss) or not np.all(np.isfinite(res.grad)):
                raise NumericError(f"training diverged at epoch {epoch}, batch {b + 1}")
            if on_batch is not None:
                on_batch(epoch, batch, res)
            opt.step(model.params, res.grad)
            model.mark_updated()
            batch_losses.extend([res.loss] * len(batch))
        val = evaluate_loss(model, val_set, gamma, batch_size=tc.batch_size)
        if not np.isfinite(val):
            raise NumericError(f"validation loss is not finite after epoch {epoch}")
        lr_used = schedule.lr
        changed = schedule.update(val)
        history.append(EpochRecord(epoch, float(np.mean(batch_losses)), val, lr_used, changed))
    return history


def evaluate_loss(model: SeparatorModel, utts: Sequence[Utterance], gamma: float, batch_size: int = 32) -> float:
    total = 0.0
    for start in range(0, len(utts), batch_size):
        chunk = utts[start : start + batch_size]
        total += batch_loss_and_grad(model, chunk, gamma, with_grad=False).loss * len(chunk)
    return total / len(utts)


def separate(model: SeparatorModel, mixture: SignalBuffer, cfg: StftConfig | None = None) -> list[SignalBuffer]:
    """Estimated source waveforms in network output order."""
    cfg = cfg or StftConfig(sample_rate=mixture.sample_rate)
    spec = stft(mixture, cfg)
    mag = np.abs(spec.bins)
    masks, _ = forward(model, mag)
    estimates = estimate_sources(masks, mag)
    return [reconstruct_with_mixture_phase(MagSpectrogram(e), spec, length=len(mixture)) for e in estimates]


def _encode_params(params: np.ndarray) -> str:
    return base64.b64encode(params.astype("<f8").tobytes()).decode("ascii")


def checkpoint_text(model: SeparatorModel, train_seed: int | None = None, meta: dict | None = None) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "layout": [[name, offset, list(shape)] for name, (offset, shape) in model.layout.items()],
        "params_f64le_base64": _encode_params(model.params),
        "train_seed": train_seed,
        "meta": meta or {},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_checkpoint(path, model: SeparatorModel, train_seed: int | None = None, meta: dict | None = None):
    atomic_write_text(path, checkpoint_text(model, train_seed, meta))


def load_checkpoint(path) -> tuple[SeparatorModel, dict]:
    """Returns the model and the checkpoint document (minus the parameter blob)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a checkpoint file ({exc})") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {doc.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
        )
    cfg = SeparatorConfig(**doc["config"])
    expected = [[n, o, list(s)] for n, (o, s) in param_layout(cfg).items()]
    if doc["layout"] != expected:
        raise DataError(f"{path}: parameter layout does not match its config")
    params = np.frombuffer(base64.b64decode(doc.pop("params_f64le_base64")), dtype="<f8")
    return SeparatorModel(cfg, params), doc
