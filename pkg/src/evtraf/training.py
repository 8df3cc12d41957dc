"""Training loop: evidential speed loss, flow MAE, scheduled sampling.

The objective is the mean over samples, nodes and decoder steps of the
speed total loss (Student-t NLL plus epsilon times the error-ratio
regularizer, both in normalized units) plus flow_loss_weight times the
flow mean absolute error.  Decoder inputs follow inverse-sigmoid-free
scheduled sampling: at global iteration i each decoder step of each
sample independently consumes ground truth with probability
p = exp(-decay_c * i).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import TrainingDivergedError, ValidationError
from .evidential import nll_loss_t, ratio_regularizer_t
from .model import DgcrnnModel


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValidationError(f"learning rate must be positive, got {self.learning_rate}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Adam:
    """Adaptive moment estimation over a named parameter dict."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self):
        out = {}
        for name in self.params:
            out[f"adam_m.{name}"] = self.m[name]
            out[f"adam_v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays, step_count):
        self.t = int(step_count)
        for name in self.params:
            mk, vk = f"adam_m.{name}", f"adam_v.{name}"
            if mk in arrays:
                self.m[name] = np.asarray(arrays[mk], dtype=np.float64).reshape(
                    self.m[name].shape
                )
            if vk in arrays:
                self.v[name] = np.asarray(arrays[vk], dtype=np.float64).reshape(
                    self.v[name].shape
                )


@dataclass
class LogRow:
    epoch: int
    iteration: int
    loss: float
    sampling_p: float


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, iteration, loss, sampling_p):
        self.rows.append(LogRow(epoch, iteration, loss, sampling_p))

    def to_csv(self, path, seed=0, config_hash="0" * 16):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"# evtraf-train-log v1 seed={seed} config={config_hash}\n")
            fh.write("epoch,iteration,loss,sampling_p\n")
            for r in self.rows:
                fh.write(
                    f"{r.epoch},{r.iteration},{r.loss:.10g},{r.sampling_p:.17g}\n"
                )


def sampling_probability(decay_c, iteration):
    """Scheduled-sampling teacher probability p = exp(-c * i)."""
    return math.exp(-decay_c * iteration)


def batch_loss(model: DgcrnnModel, chunk, teacher_mask):
    """Differentiable loss over a list of samples; returns a scalar tensor."""
    cfg = model.cfg
    b = len(chunk)
    n = model.n
    obs_s = np.stack([s.obs_speed for s in chunk]).astype(np.float64)
    obs_f = np.stack([s.obs_flow for s in chunk]).astype(np.float64)
    tgt_s = np.stack([s.target_speed for s in chunk]).astype(np.float64)
    tgt_f = np.stack([s.target_flow for s in chunk]).astype(np.float64)
    out = model.unroll(obs_s, obs_f, tgt_s, tgt_f, teacher_mask=teacher_mask)
    tgt_sn = tgt_s / cfg.speed_scale
    tgt_fn = tgt_f / cfg.flow_scale
    step_losses = []
    for k in range(cfg.decoder_steps):
        x_true = T.Tensor(tgt_sn[:, :, k].reshape(b * n, 1))
        q_true = T.Tensor(tgt_fn[:, :, k].reshape(b * n, 1))
        speed_term = nll_loss_t(
            x_true, out["speed"][k], out["nu"][k], out["alpha"][k], out["beta"][k]
        )
        if cfg.epsilon > 0.0:
            speed_term = speed_term + cfg.epsilon * ratio_regularizer_t(
                x_true,
                out["speed"][k],
                out["nu"][k],
                out["alpha"][k],
                out["beta"][k],
                clip_bracket=cfg.clip_bracket,
            )
        flow_term = T.absolute(out["flow"][k] - q_true) * cfg.flow_loss_weight
        step_losses.append((speed_term + flow_term).mean())
    total = step_losses[0]
    for sl in step_losses[1:]:
        total = total + sl
    return total * (1.0 / cfg.decoder_steps)


def train(
    model: DgcrnnModel,
    corpus,
    train_cfg: TrainConfig,
    start_iteration=0,
    optimizer=None,
    log=None,
):
    """Optimize the model in place; returns (log, optimizer, iteration).

    `start_iteration` continues the scheduled-sampling decay across
    resumed runs.  Aborts with the offending batch index if the loss
    turns non-finite.
    """
    if corpus.window_in != model.cfg.encoder_steps:
        raise ValidationError(
            f"corpus window_in {corpus.window_in} != encoder_steps "
            f"{model.cfg.encoder_steps}"
        )
    if corpus.window_out != model.cfg.decoder_steps:
        raise ValidationError(
            f"corpus window_out {corpus.window_out} != decoder_steps "
            f"{model.cfg.decoder_steps}"
        )
    if corpus.node_count != model.n:
        raise ValidationError(
            f"corpus has {corpus.node_count} nodes, model expects {model.n}"
        )
    if len(corpus) == 0:
        raise ValidationError("corpus is empty")
    rng = np.random.default_rng(train_cfg.seed)
    opt = optimizer or Adam(model.params, lr=train_cfg.learning_rate)
    log = log or TrainingLog()
    iteration = start_iteration
    order = np.arange(len(corpus))
    for epoch in range(train_cfg.epochs):
        if train_cfg.shuffle:
            rng.shuffle(order)
        epoch_losses = []
        last_i = iteration
        for lo in range(0, len(order), train_cfg.batch_size):
            idx = order[lo : lo + train_cfg.batch_size]
            chunk = [corpus.samples[i] for i in idx]
            last_i = iteration
            p = sampling_probability(model.cfg.decay_c, iteration)
            mask = rng.random((len(chunk), model.cfg.decoder_steps)) < p
            opt.zero_grad()
            loss = batch_loss(model, chunk, mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch index "
                    f"{lo // train_cfg.batch_size} (iteration {iteration})",
                    batch_index=lo // train_cfg.batch_size,
                )
            loss.backward()
            opt.step()
            iteration += 1
            epoch_losses.append(value)
        # the logged pair (iteration, p) always satisfies p = exp(-c * i)
        log.append(
            epoch,
            last_i,
            float(np.mean(epoch_losses)),
            sampling_probability(model.cfg.decay_c, last_i),
        )
    return log, opt, iteration
