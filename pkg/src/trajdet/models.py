"""Trajectory sequence classifiers and their training loop.

Three variants share one parameter layout convention:

* ``tcn``: WaveNet-style dilated causal blocks (gated activation, residual
  and skip paths), temporal mean-pool, linear head.
* ``transformer``: per-frame linear projection, sinusoidal positions,
  self-attention encoder over time, mean-pool, linear head.
* ``tcn_transformer``: the TCN feature sequence feeds the encoder.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .trajstore import (
    ALL_CLASSES,
    ALL_PLAYERS,
    CLASS_INDEX,
    EVENT_CLASSES,
    EventLabel,
    MatchTrajectories,
    WindowSpec,
    WindowTensor,
    build_windows,
    normalize,
    windows_to_features,
)

log = logging.getLogger(__name__)

VARIANTS = ("tcn", "transformer", "tcn_transformer")


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


class SamplingError(ValueError):
    """The dataset cannot supply the requested kind of window."""


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "tcn_transformer"
    t: int = 51
    k: int = 5
    d: int = 64
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16)
    heads: int = 4
    encoder_layers: int = 2
    ffn_dim: int = 128
    classes: int = 4
    n_players: int = 22  # only used when k == ALL_PLAYERS
    kinematic: bool = True  # append velocity and ball-offset channels to the raw input

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        WindowSpec(self.t, self.k)
        if self.d % self.heads:
            raise ValueError(f"feature width {self.d} is not divisible by {self.heads} heads")
        if self.classes != len(ALL_CLASSES):
            raise ValueError(f"classes must be {len(ALL_CLASSES)}")
        if self.variant != "transformer":
            dl = self.dilations
            if not dl or any(x <= 0 or x & (x - 1) for x in dl) or any(b <= a for a, b in zip(dl, dl[1:])):
                raise ValueError(f"dilations must be strictly increasing powers of 2, got {dl}")
            if self.receptive_field < self.t:
                raise ValueError(f"TCN receptive field {self.receptive_field} is shorter than T={self.t}")

    @property
    def tcn_blocks(self) -> int:
        return len(self.dilations)

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel - 1) * sum(self.dilations)

    @property
    def input_channels(self) -> int:
        n = self.n_players if self.k == ALL_PLAYERS else self.k
        return 2 * (1 + n)

    @property
    def lifted_channels(self) -> int:
        """Width after the fixed kinematic lift (equals ``input_channels`` when off)."""
        c = self.input_channels
        return c if not self.kinematic else 3 * c - 2

    @property
    def window_spec(self) -> WindowSpec:
        return WindowSpec(self.t, self.k)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    max_epochs: int = 20
    steps_per_epoch: int = 100
    background_ratio: float = 0.5
    jitter: int = 2
    near_miss_ratio: float = 0.0
    seed: int = 0
    val_segment_length: int = 500
    val_segments: int = 12
    grad_clip: float = 0.0  # global gradient-norm cap; 0 disables
    warmup_steps: int = 0  # linear learning-rate ramp at the start of training

    def __post_init__(self):
        if not 0.0 <= self.background_ratio <= 1.0:
            raise ValueError("background_ratio must lie in [0, 1]")
        if not 0.0 <= self.near_miss_ratio <= 1.0:
            raise ValueError("near_miss_ratio must lie in [0, 1]")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError("batch_size and steps_per_epoch must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.grad_clip < 0 or self.warmup_steps < 0:
            raise ValueError("grad_clip and warmup_steps must be >= 0")


VELOCITY_SCALE = 50.0
OFFSET_SCALE = 10.0


def kinematic_lift(features: np.ndarray) -> np.ndarray:
    """Append per-frame velocity and ball-relative offsets to raw window features.

    ``features`` is (B, T, 2N) with slot 0 the ball. A slot whose coordinates
    are exactly (0, 0) is treated as padding; derived channels touching it are
    zero. Output is (B, T, 2N + 2N + 2(N - 1)).
    """
    b, t, c = features.shape
    xy = features.reshape(b, t, c // 2, 2)
    present = np.any(xy != 0.0, axis=-1, keepdims=True)
    vel = np.zeros_like(xy)
    both = present[:, 1:] & present[:, :-1]
    vel[:, 1:] = np.where(both, xy[:, 1:] - xy[:, :-1], 0.0) * VELOCITY_SCALE
    rel = np.where(present[:, :, 1:] & present[:, :, :1], xy[:, :, 1:] - xy[:, :, :1], 0.0) * OFFSET_SCALE
    return np.concatenate([features, vel.reshape(b, t, -1), rel.reshape(b, t, -1)], axis=-1)


def positional_encoding(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class TrajectoryModel:
    """A trajectory classifier; ``params`` maps names to leaf tensors."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.last_attention: list[np.ndarray] = []
        rng = np.random.default_rng(seed)
        c, d = config.lifted_channels, config.d

        def add(name, shape, fan_in):
            self.params[name] = ad.init_uniform(rng, shape, fan_in, name)

        def const(name, value):
            self.params[name] = Tensor(value, requires_grad=True, name=name)

        add("in.w", (c, d), c)
        const("in.b", np.zeros(d))
        if config.variant != "transformer":
            for i in range(config.tcn_blocks):
                add(f"tcn{i}.conv.w", (config.kernel, d, 2 * d), config.kernel * d)
                const(f"tcn{i}.conv.b", np.zeros(2 * d))
                if i < config.tcn_blocks - 1:  # the last block's residual output feeds nothing
                    add(f"tcn{i}.res.w", (d, d), d)
                    const(f"tcn{i}.res.b", np.zeros(d))
                add(f"tcn{i}.skip.w", (d, d), d)
                const(f"tcn{i}.skip.b", np.zeros(d))
        if config.variant != "tcn":
            for i in range(config.encoder_layers):
                for p in "qkvo":
                    add(f"enc{i}.{p}.w", (d, d), d)
                    const(f"enc{i}.{p}.b", np.zeros(d))
                const(f"enc{i}.ln1.g", np.ones(d))
                const(f"enc{i}.ln1.b", np.zeros(d))
                add(f"enc{i}.ff1.w", (d, config.ffn_dim), d)
                const(f"enc{i}.ff1.b", np.zeros(config.ffn_dim))
                add(f"enc{i}.ff2.w", (config.ffn_dim, d), config.ffn_dim)
                const(f"enc{i}.ff2.b", np.zeros(d))
                const(f"enc{i}.ln2.g", np.ones(d))
                const(f"enc{i}.ln2.b", np.zeros(d))
        # zero head: an untrained model predicts the uniform distribution
        const("head.w", np.zeros((d, config.classes)))
        const("head.b", np.zeros(config.classes))
        self._pe = positional_encoding(config.t, d)

    @property
    def window_spec(self) -> WindowSpec:
        return self.config.window_spec

    # -- building blocks

    def _tcn(self, h: Tensor) -> Tensor:
        P = self.params
        skip = None
        for i, dil in enumerate(self.config.dilations):
            z = ad.gated_activation(ad.conv1d_causal_dilated(h, P[f"tcn{i}.conv.w"], dil, P[f"tcn{i}.conv.b"]))
            if f"tcn{i}.res.w" in P:
                h = h + ad.linear(z, P[f"tcn{i}.res.w"], P[f"tcn{i}.res.b"])
            s = ad.linear(z, P[f"tcn{i}.skip.w"], P[f"tcn{i}.skip.b"])
            skip = s if skip is None else skip + s
        return ad.relu(skip)

    def _attention(self, x: Tensor, i: int) -> Tensor:
        P = self.params
        b, t, d = x.shape
        h = self.config.heads
        dh = d // h

        def split(name):
            y = ad.linear(x, P[f"enc{i}.{name}.w"], P[f"enc{i}.{name}.b"])
            return ad.transpose(ad.reshape(y, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = split("q"), split("k"), split("v")
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        self.last_attention.append(attn.data)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        return ad.linear(ctx, P[f"enc{i}.o.w"], P[f"enc{i}.o.b"])

    def _encoder(self, x: Tensor) -> Tensor:
        P = self.params
        if self.config.encoder_layers == 0:
            return x
        x = x + self._pe[None, : x.shape[1]]
        for i in range(self.config.encoder_layers):
            x = ad.layer_norm(x + self._attention(x, i), P[f"enc{i}.ln1.g"], P[f"enc{i}.ln1.b"])
            ff = ad.linear(ad.relu(ad.linear(x, P[f"enc{i}.ff1.w"], P[f"enc{i}.ff1.b"])), P[f"enc{i}.ff2.w"], P[f"enc{i}.ff2.b"])
            x = ad.layer_norm(x + ff, P[f"enc{i}.ln2.g"], P[f"enc{i}.ln2.b"])
        return x

    # -- public API

    def forward(self, features) -> Tensor:
        """``features`` (B, T, 2N) -> class probabilities (B, 4)."""
        x = ad.as_tensor(features)
        cfg = self.config
        if x.ndim != 3 or x.shape[1:] != (cfg.t, cfg.input_channels):
            raise ad.ShapeError(f"expected input (batch, {cfg.t}, {cfg.input_channels}), got {x.shape}")
        self.last_attention = []
        if cfg.kinematic:
            x = Tensor(kinematic_lift(x.data))
        h = ad.linear(x, self.params["in.w"], self.params["in.b"])
        if cfg.variant != "transformer":
            h = self._tcn(h)
        if cfg.variant != "tcn":
            h = self._encoder(h)
        pooled = ad.mean(h, axis=1)
        return ad.softmax(ad.linear(pooled, self.params["head.w"], self.params["head.b"]), axis=-1)

    def forward_window(self, window: WindowTensor) -> np.ndarray:
        return self.predict(windows_to_features(window.values[None]))[0]

    def predict(self, features: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.forward(features).data

    def loss(self, features: np.ndarray, targets: np.ndarray) -> Tensor:
        return ad.cross_entropy(self.forward(features), targets)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ad.ShapeError(f"parameter {k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def save(self, path: str | Path, train_config: TrainConfig | None = None) -> None:
        """Write ``path`` (parameters) and ``path`` + ``.json`` (configs)."""
        path = Path(path)
        ad.save_params(self.params, path)
        side = {"model_config": asdict(self.config), "train_config": asdict(train_config) if train_config else None}
        Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> TrajectoryModel:
        path = Path(path)
        side_path = Path(str(path) + ".json")
        if not path.exists() or not side_path.exists():
            raise FileNotFoundError(f"checkpoint {path} (or its .json sidecar) not found")
        side = json.loads(side_path.read_text())
        model = cls(ModelConfig(**side["model_config"]))
        model.load_state(ad.load_params(path))
        return model


# ---------------------------------------------------------------- sampling


@dataclass
class TrainingData:
    """Normalized matches plus sampling indexes."""

    matches: list[MatchTrajectories]
    labels: list[list[EventLabel]]
    half: int
    background: list[np.ndarray] = field(default_factory=list)
    event_distance: list[np.ndarray] = field(default_factory=list)  # frames to the nearest label
    events: dict[str, list[tuple[int, int]]] = field(default_factory=dict)

    @classmethod
    def build(cls, dataset: Sequence[tuple[MatchTrajectories, Sequence[EventLabel]]], half: int, jitter: int = 0):
        data = cls([normalize(m) for m, _ in dataset], [list(lb) for _, lb in dataset], half)
        for m, labels in zip(data.matches, data.labels):
            near = np.full(m.frame_count, np.iinfo(np.int64).max // 2, dtype=np.int64)
            frames = np.arange(m.frame_count)
            for e in labels:
                near = np.minimum(near, np.abs(frames - e.frame))
            data.event_distance.append(near)
            data.background.append(np.flatnonzero(near > half))
        data.events = {c: [] for c in EVENT_CLASSES}
        for mi, labels in enumerate(data.labels):
            for e in labels:
                data.events[e.cls].append((mi, e.frame))
        return data


def _as_training_data(dataset, half: int, jitter: int) -> TrainingData:
    if isinstance(dataset, TrainingData):
        return dataset
    return TrainingData.build(dataset, half, jitter)


def _pick_frame(rng: np.random.Generator, pools: list[np.ndarray]) -> tuple[int, int]:
    sizes = np.array([len(p) for p in pools], dtype=np.float64)
    mi = int(rng.choice(len(pools), p=sizes / sizes.sum()))
    return mi, int(pools[mi][rng.integers(len(pools[mi]))])


def _near_miss(data: TrainingData, cfg: TrainConfig, rng: np.random.Generator, present: list[str]) -> tuple[int, int] | None:
    """A frame a few frames off an event of a uniformly chosen class, farther than jitter + 2 from every label."""
    lo, hi = cfg.jitter + 3, data.half
    if lo > hi:
        return None
    for _ in range(10):
        cls = present[int(rng.integers(len(present)))]
        mi, frame = data.events[cls][int(rng.integers(len(data.events[cls])))]
        center = frame + int(rng.choice([-1, 1])) * int(rng.integers(lo, hi + 1))
        if 0 <= center < data.matches[mi].frame_count and data.event_distance[mi][center] > cfg.jitter + 2:
            return mi, center
    return None


def sample_centers(data: TrainingData, cfg: TrainConfig, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Draw ``(match index, center frame, class index)`` triples for one batch.

    Background windows have no event within half a window of their center.
    Event windows pick a class uniformly among those present, then a label
    of that class, then jitter the center by up to ``cfg.jitter`` frames.
    With ``near_miss_ratio`` > 0, that share of the background slots is instead
    labeled background at a frame offset from an event (class chosen uniformly)
    by more than the jitter band but at most half a window.
    """
    present = [c for c in EVENT_CLASSES if data.events.get(c)]
    if not present:
        raise SamplingError("dataset has no labeled events")
    if cfg.background_ratio > 0 and sum(len(b) for b in data.background) == 0:
        raise SamplingError("dataset has no background frames")
    n_bg = int(rng.binomial(cfg.batch_size, cfg.background_ratio))
    out = []
    for _ in range(n_bg):
        pick = _near_miss(data, cfg, rng, present) if cfg.near_miss_ratio > 0 and rng.random() < cfg.near_miss_ratio else None
        mi, f = pick if pick is not None else _pick_frame(rng, data.background)
        out.append((mi, f, 0))
    for _ in range(cfg.batch_size - n_bg):
        cls = present[int(rng.integers(len(present)))]
        mi, frame = data.events[cls][int(rng.integers(len(data.events[cls])))]
        shift = int(rng.integers(-cfg.jitter, cfg.jitter + 1)) if cfg.jitter else 0
        center = min(max(frame + shift, 0), data.matches[mi].frame_count - 1)
        out.append((mi, center, CLASS_INDEX[cls]))
    return out


def batch_features(data: TrainingData, spec: WindowSpec, picks: list[tuple[int, int, int]]):
    feats = np.zeros((len(picks), spec.t, 2 * spec.n_slots(data.matches[0])))
    targets = np.array([p[2] for p in picks], dtype=np.int64)
    by_match: dict[int, list[int]] = {}
    for i, (mi, _, _) in enumerate(picks):
        by_match.setdefault(mi, []).append(i)
    for mi, rows in by_match.items():
        values, _ = build_windows(data.matches[mi], spec, [picks[i][1] for i in rows])
        feats[rows] = windows_to_features(values)
    return feats, targets


def sample_batch(dataset, cfg: TrainConfig, rng: np.random.Generator, spec: WindowSpec) -> list[tuple[WindowTensor, int]]:
    data = _as_training_data(dataset, spec.half, cfg.jitter)
    picks = sample_centers(data, cfg, rng)
    out = []
    for mi, center, cls in picks:
        values, mask = build_windows(data.matches[mi], spec, [center])
        out.append((WindowTensor(values[0], mask[0]), cls))
    return out


# ---------------------------------------------------------------- training


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad * p.grad
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_f_score: float | None = None
    val_per_class: dict[str, float] = field(default_factory=dict)


def validation_score(model: TrajectoryModel, val: TrainingData, cfg: TrainConfig) -> tuple[float, dict[str, float]]:
    """Mean tuned F-score over event classes on validation segments."""
    from .detector import infer_timeline
    from .evaluator import labels_in, segment_bounds
    from .tuner import tune

    segs = []
    for mi, m in enumerate(val.matches):
        for s, e in segment_bounds(m.frame_count, cfg.val_segment_length):
            segs.append((mi, s, e))
    if cfg.val_segments and len(segs) > cfg.val_segments:
        pick = np.random.default_rng(cfg.seed + 1).choice(len(segs), cfg.val_segments, replace=False)
        segs = [segs[i] for i in sorted(pick)]
    timelines = [infer_timeline(model, val.matches[mi], s, e) for mi, s, e in segs]
    gts = [labels_in(val.labels[mi], s, e) for mi, s, e in segs]
    tuned = tune(timelines, gts, w_eval=51, fps=val.matches[0].fps)
    per = {c: t.f_score for c, t in tuned.classes.items() if t.tunable}
    return (float(np.mean(list(per.values()))) if per else 0.0), per


def train(
    model: TrajectoryModel,
    dataset,
    cfg: TrainConfig,
    validation=None,
) -> tuple[TrajectoryModel, list[EpochLog]]:
    """Adam on cross-entropy; keeps the parameters of the best validation epoch.

    Without validation data the final parameters are kept.
    """
    spec = model.window_spec
    data = _as_training_data(dataset, spec.half, cfg.jitter)
    val = _as_training_data(validation, spec.half, cfg.jitter) if validation is not None else None
    rng = np.random.default_rng(cfg.seed)
    params = list(model.params.values())
    opt = Adam(params, cfg.learning_rate)
    history: list[EpochLog] = []
    best_state, best_f = None, -1.0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            feats, targets = batch_features(data, spec, sample_centers(data, cfg, rng))
            ad.zero_grads(params)
            loss = model.loss(feats, targets)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}")
            loss.backward()
            if cfg.grad_clip > 0:
                clip_gradients(params, cfg.grad_clip)
            step += 1
            opt.lr = cfg.learning_rate * min(1.0, step / cfg.warmup_steps) if cfg.warmup_steps else cfg.learning_rate
            opt.step()
            losses.append(value)
        entry = EpochLog(epoch, float(np.mean(losses)))
        if val is not None:
            entry.val_f_score, entry.val_per_class = validation_score(model, val, cfg)
            if entry.val_f_score >= best_f:  # ties go to the later, longer-trained epoch
                best_f, best_state = entry.val_f_score, model.state()
        history.append(entry)
        log.info(
            json.dumps({"event": "epoch", "epoch": epoch, "loss": round(entry.train_loss, 6), "val_f": entry.val_f_score})
        )
    ad.zero_grads(params)
    if best_state is not None:
        model.load_state(best_state)
    return model, history


def clone(model: TrajectoryModel) -> TrajectoryModel:
    return copy.deepcopy(model)
