"""Optimisation loop: Adam with global-norm clipping, evaluation, checkpoints."""
from __future__ import annotations

import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .compute import Tensor, backward
from .decode import beam_search, greedy_decode
from .model import ModelConfig, Seq2SeqModel, forward_nll, total_loss
from .planner import GumbelNoise
from .tasks import Dataset, TaskInstance

CHECKPOINT_VERSION = "plangen-ckpt/1"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, update: int, instance_id: int, value: float):
        super().__init__(f"non-finite loss {value} at update {update} (instance {instance_id})")
        self.update = update
        self.instance_id = instance_id


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    clip_threshold: float = 5.0
    lambda_com: float | None = None  # None: use the planner config's value
    max_updates: int = 1000
    seed: int = 0
    eval_interval: int = 1000
    log_interval: int = 100
    batch_size: int = 1
    nll_window: int = 100
    target_accuracy: float | None = None
    target_nll: float | None = None
    eval_decoder: str = "greedy"
    beam_width: int = 4

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be positive")
        if self.batch_size < 1 or self.max_updates < 0:
            raise ValueError("batch_size >= 1 and max_updates >= 0 required")


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def global_grad_norm(params: dict[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))


def clip_gradients(params: dict[str, Tensor], threshold: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``threshold``; return the factor."""
    norm = global_grad_norm(params)
    if norm <= threshold:
        return 1.0
    factor = threshold / norm
    for p in params.values():
        if p.grad is not None:
            p.grad = p.grad * factor
    return factor


def adam_step(state: AdamState, params: dict[str, Tensor], lr: float) -> None:
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class FlatParams:
    """Parameters rebound as views of one contiguous buffer, so Adam and
    clipping run as a handful of vector ops instead of one loop per tensor."""

    def __init__(self, params: dict[str, Tensor], state: AdamState):
        self.params = params
        self.state = state
        sizes = [p.data.size for p in params.values()]
        self.bounds = np.cumsum([0] + sizes).tolist()
        self.data = np.concatenate([p.data.ravel() for p in params.values()])
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self._tmp = np.empty_like(self.data)
        self._grad = np.empty_like(self.data)
        for (name, p), a, b in zip(params.items(), self.bounds[:-1], self.bounds[1:]):
            shape = p.data.shape
            p.data = self.data[a:b].reshape(shape)
            if name in state.m:
                self.m[a:b] = state.m[name].ravel()
                self.v[a:b] = state.v[name].ravel()
            state.m[name] = self.m[a:b].reshape(shape)
            state.v[name] = self.v[a:b].reshape(shape)

    def gather_grad(self) -> np.ndarray:
        out = self._grad
        for p, a, b in zip(self.params.values(), self.bounds[:-1], self.bounds[1:]):
            if p.grad is None:
                out[a:b] = 0.0
            else:
                out[a:b] = p.grad.ravel()
        return out

    def step(self, lr: float, clip_threshold: float) -> float:
        """Clip by global norm, then one Adam update; returns the pre-clip norm."""
        g = self.gather_grad()
        norm = math.sqrt(float(g @ g))
        if norm > clip_threshold:
            g *= clip_threshold / norm
        st = self.state
        st.step += 1
        b1, b2 = st.beta1, st.beta2
        c1, c2 = 1.0 - b1 ** st.step, 1.0 - b2 ** st.step
        m, v, tmp = self.m, self.v, self._tmp
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        # same arithmetic as adam_step, ordered to reuse buffers
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += st.eps
        np.divide(m, c1, out=g)
        g *= lr
        g /= tmp
        self.data -= g
        return norm


# ---------------------------------------------------------------- evaluation

def default_max_len(source: Sequence[int]) -> int:
    return 2 * len(source) + 2


def decode_instance(model: Seq2SeqModel, source: Sequence[int], decoder: str = "greedy",
                    beam_width: int = 4, max_len: int | None = None):
    max_len = max_len or default_max_len(source)
    if decoder == "greedy":
        return greedy_decode(model, source, max_len)
    if decoder == "beam":
        return beam_search(model, source, beam_width, max_len)
    raise ValueError(f"unknown decoder {decoder!r}")


def evaluate(model: Seq2SeqModel, dataset: Dataset | Sequence[TaskInstance], decoder: str = "greedy",
             beam_width: int = 4) -> float:
    """Fraction of instances whose decoded output equals the target exactly."""
    instances = list(dataset)
    if not instances:
        return 0.0
    hits = sum(decode_instance(model, inst.source, decoder, beam_width).tokens == list(inst.target)
               for inst in instances)
    return hits / len(instances)


# ---------------------------------------------------------------- training loop

@dataclass
class LogRow:
    update: int
    nll: float
    commit_penalty: float
    valid_accuracy: float
    wall_time: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)
    nll_trace: list[float] = field(default_factory=list)
    first_below_target_nll: int | None = None
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return self.nll_trace


class Trainer:
    """Stateful training loop that can be checkpointed and resumed bit-exactly."""

    def __init__(self, model: Seq2SeqModel, train_set: Dataset, config: TrainConfig,
                 valid_set: Dataset | None = None):
        if len(train_set) == 0:
            raise ValueError("training dataset is empty")
        self.model = model
        self.train_set = train_set
        self.valid_set = valid_set
        self.config = config
        self.params = model.parameters()
        self.adam = AdamState()
        self.order_rng = np.random.default_rng(config.seed)
        self.noise = GumbelNoise.seeded(model.config.planner.gumbel_seed + 7919 * config.seed)
        self.order = np.arange(0)
        self.cursor = 0
        self.update = 0
        self.log = TrainLog()
        self.window: deque[float] = deque(maxlen=config.nll_window)
        self.last_valid = float("nan")
        self._acc_nll = self._acc_pen = 0.0
        self._acc_n = 0
        self.wall_time = 0.0
        self._flat: FlatParams | None = None

    @property
    def lambda_com(self) -> float:
        lam = self.config.lambda_com
        return self.model.config.planner.lambda_com if lam is None else lam

    def _next_instance(self) -> TaskInstance:
        if self.cursor >= len(self.order):
            self.order = self.order_rng.permutation(len(self.train_set))
            self.cursor = 0
        inst = self.train_set[int(self.order[self.cursor])]
        self.cursor += 1
        return inst

    def train_step(self) -> tuple[float, float]:
        """One parameter update over ``batch_size`` instances; returns (nll, penalty)."""
        for p in self.params.values():
            p.grad = None
        k = self.model.config.planner.k
        nll_sum = pen_sum = 0.0
        bs = self.config.batch_size
        for _ in range(bs):
            inst = self._next_instance()
            res = forward_nll(self.model, inst.source, inst.target, self.noise)
            loss = total_loss(res.loss, res.commitments, self.lambda_com, k)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteLossError(self.update + 1, inst.id, value)
            if bs > 1:
                loss = loss * (1.0 / bs)
            backward(loss)
            nll_sum += res.loss.item()
            pen_sum += value - res.loss.item()
        if self._flat is None:
            self._flat = FlatParams(self.params, self.adam)
        self._flat.step(self.config.learning_rate, self.config.clip_threshold)
        self.update += 1
        return nll_sum / bs, pen_sum / bs

    def _validate(self) -> float:
        if self.valid_set is None or len(self.valid_set) == 0:
            return float("nan")
        return evaluate(self.model, self.valid_set, self.config.eval_decoder, self.config.beam_width)

    def run(self, max_updates: int | None = None,
            on_log: Callable[[LogRow], None] | None = None) -> TrainLog:
        """Train until ``max_updates`` total updates or an early-stop target is met."""
        cfg = self.config
        limit = cfg.max_updates if max_updates is None else max_updates
        t0 = time.perf_counter()
        while self.update < limit:
            nll, pen = self.train_step()
            self.log.nll_trace.append(nll)
            self.window.append(nll)
            self._acc_nll += nll
            self._acc_pen += pen
            self._acc_n += 1
            stop = False
            if cfg.target_nll is not None and self.log.first_below_target_nll is None \
                    and len(self.window) == self.window.maxlen \
                    and sum(self.window) / len(self.window) <= cfg.target_nll:
                self.log.first_below_target_nll = self.update
                stop = True
            evaluated = False
            if cfg.eval_interval and self.update % cfg.eval_interval == 0:
                self.last_valid = self._validate()
                evaluated = True
                if cfg.target_accuracy is not None and self.last_valid >= cfg.target_accuracy:
                    stop = True
            # the final row is tied to the configured budget, not to this call's
            # limit, so running in chunks logs exactly like one long run
            last = stop or self.update == cfg.max_updates
            if self.update % cfg.log_interval == 0 or last:
                if last and not evaluated and self.valid_set is not None:
                    self.last_valid = self._validate()
                row = LogRow(self.update, self._acc_nll / self._acc_n, self._acc_pen / self._acc_n,
                             self.last_valid, self.wall_time + time.perf_counter() - t0)
                self.log.rows.append(row)
                self._acc_nll = self._acc_pen = 0.0
                self._acc_n = 0
                if on_log:
                    on_log(row)
            if stop:
                self.log.stopped_early = True
                break
        self.wall_time += time.perf_counter() - t0
        return self.log


def train(model: Seq2SeqModel, dataset: Dataset, config: TrainConfig,
          valid_set: Dataset | None = None) -> TrainLog:
    return Trainer(model, dataset, config, valid_set).run()


# ---------------------------------------------------------------- checkpoints
#
# A checkpoint is an uncompressed .npz archive.  Entry "meta" holds UTF-8 JSON
# with the version tag, model/train configs, optimiser counters, RNG states
# and loop position; entries "param/<name>", "adam_m/<name>", "adam_v/<name>"
# hold row-major float64 arrays, and "order" the current epoch permutation.

def save_checkpoint(path: str | Path, trainer: Trainer) -> None:
    model = trainer.model
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": asdict(trainer.config),
        "update": trainer.update,
        "cursor": trainer.cursor,
        "adam_step": trainer.adam.step,
        "order_rng": trainer.order_rng.bit_generator.state,
        "noise_rng": trainer.noise.rng.bit_generator.state,
        "window": list(trainer.window),
        "last_valid": trainer.last_valid,
        "acc": [trainer._acc_nll, trainer._acc_pen, trainer._acc_n],
        "wall_time": trainer.wall_time,
        "first_below_target_nll": trainer.log.first_below_target_nll,
        "vocab": list(trainer.train_set.vocab.tokens),
        "kind": trainer.train_set.kind,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
              "order": np.asarray(trainer.order, dtype=np.int64)}
    for name, p in trainer.params.items():
        arrays[f"param/{name}"] = p.data
        if name in trainer.adam.m:
            arrays[f"adam_m/{name}"] = trainer.adam.m[name]
            arrays[f"adam_v/{name}"] = trainer.adam.v[name]
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path: str | Path) -> tuple[Seq2SeqModel, dict, dict]:
    """Rebuild the model from a checkpoint; returns ``(model, meta, arrays)``."""
    with np.load(Path(path)) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays["meta"].tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
    model = Seq2SeqModel(ModelConfig.from_dict(meta["model_config"]))
    for name, p in model.parameters().items():
        stored = arrays[f"param/{name}"]
        if stored.shape != p.shape:
            raise ValueError(f"parameter {name}: checkpoint shape {stored.shape} != model {p.shape}")
        p.data = stored.astype(np.float64).copy()
    return model, meta, arrays


def load_checkpoint(path: str | Path, train_set: Dataset, valid_set: Dataset | None = None,
                    config: TrainConfig | None = None) -> Trainer:
    """Restore a trainer so continued training matches an uninterrupted run."""
    model, meta, arrays = load_model(path)
    trainer = Trainer(model, train_set, config or TrainConfig(**meta["train_config"]), valid_set)
    trainer.update = meta["update"]
    trainer.cursor = meta["cursor"]
    trainer.order = arrays["order"].copy()
    trainer.adam.step = meta["adam_step"]
    for name in trainer.params:
        if f"adam_m/{name}" in arrays:
            trainer.adam.m[name] = arrays[f"adam_m/{name}"].copy()
            trainer.adam.v[name] = arrays[f"adam_v/{name}"].copy()
    trainer.order_rng.bit_generator.state = meta["order_rng"]
    trainer.noise.rng.bit_generator.state = meta["noise_rng"]
    trainer.window.extend(meta["window"])
    trainer.last_valid = meta["last_valid"]
    trainer._acc_nll, trainer._acc_pen, trainer._acc_n = meta["acc"]
    trainer.wall_time = meta["wall_time"]
    trainer.log.first_below_target_nll = meta["first_below_target_nll"]
    return trainer
