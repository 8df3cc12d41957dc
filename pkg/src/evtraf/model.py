"""Encoder-decoder traffic forecaster with dynamic graph convolutions.

Each step consumes, per node, the traffic state (speed, flow) plus the
three NIG uncertainty parameters of that state, and produces the next
state, its uncertainty parameters, and a new hidden state:

* the next means come from a dynamic graph convolution: per-edge
  kernels are generated from the current input and hidden state,
  normalized to sum to one over each node's masked in-neighborhood
  (upstream and downstream parameterized separately), and applied to a
  shared node-wise feature transform; a bounded fluctuation term is
  added on top;
* the hidden state advances through a GRU whose dense transforms are
  static graph convolutions over the speed-degree mask;
* a linear head on the new hidden state emits raw NIG parameters which
  become valid through the positivity transform.

Speed uses a small receptive field sized to the congested wave, flow a
larger one sized to the free-flow wave.  Inputs are normalized by fixed
scales; predictions are clamped to the physical range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .evidential import PARAM_FLOOR, inverse_softplus, positivity_transform_t
from .roadgraph import NeighborhoodMask, RoadGraph, adjacency_power

FEATURES = 5

# fixed affine scalings that keep the three NIG input features O(1)
_LOG_NU_SCALE = 4.0
_LOG_ALPHA_SCALE = 4.0
_LOG_BETA_SHIFT = 12.0
_LOG_BETA_SCALE = 6.0

_DIR_SELF, _DIR_UP, _DIR_DOWN = 0, 1, 2


@dataclass
class ModelConfig:
    """Architecture and loss settings; defaults follow the reference setup."""

    hidden_dim: int = 64
    kernel_dim: int = 16
    feat_hidden: int = 16
    degree_speed: int = 2
    degree_flow: int = 11
    fluct_bound_speed: float = 130.0  # km/h, urban speed-limit headroom
    fluct_bound_flow: float = 1800.0  # veh/h/lane, capacity
    encoder_steps: int = 20
    decoder_steps: int = 15
    epsilon: float = 0.01
    flow_loss_weight: float = 1.0
    decay_c: float = 1.25e-4
    speed_scale: float = 130.0
    flow_scale: float = 1800.0
    teacher_total_variance: float = 0.4  # (km/h)^2 fed with ground-truth inputs
    teacher_nu: float = 2.0
    teacher_alpha: float = 2.0
    clip_bracket: bool = False

    def __post_init__(self):
        for name in (
            "hidden_dim",
            "kernel_dim",
            "feat_hidden",
            "degree_speed",
            "degree_flow",
            "encoder_steps",
            "decoder_steps",
        ):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in (
            "fluct_bound_speed",
            "fluct_bound_flow",
            "speed_scale",
            "flow_scale",
            "teacher_total_variance",
            "decay_c",
        ):
            if getattr(self, name) <= 0.0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epsilon < 0.0 or self.flow_loss_weight < 0.0:
            raise ValidationError("epsilon and flow_loss_weight must be >= 0")
        if self.teacher_nu <= 0.0 or self.teacher_alpha <= 1.0:
            raise ValidationError("teacher NIG needs nu > 0 and alpha > 1")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def teacher_nig_normalized(self):
        """(nu, alpha, beta) fed alongside ground-truth inputs.

        beta is chosen so the NIG total variance equals
        teacher_total_variance, expressed in normalized speed units.
        """
        var_norm = self.teacher_total_variance / self.speed_scale**2
        nu, alpha = self.teacher_nu, self.teacher_alpha
        beta = var_norm * nu * (alpha - 1.0) / (nu + 1.0)
        return nu, alpha, beta


@dataclass(frozen=True)
class EdgeSet:
    """Flattened neighborhood structure grouped by destination node."""

    src: np.ndarray
    dst: np.ndarray
    dircls: np.ndarray
    seg_ptr: np.ndarray


def build_edge_set(mask: NeighborhoodMask) -> EdgeSet:
    """Edges (j -> i) for every j in i's masked neighborhood.

    Direction classes: self, upstream, downstream.  A neighbor reachable
    both ways within the degree counts as upstream.
    """
    n = mask.upstream.shape[0]
    src, dst, dircls = [], [], []
    counts = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        members = np.nonzero(mask.upstream[i] | mask.downstream[i])[0]
        for j in members:
            src.append(int(j))
            dst.append(i)
            if j == i:
                dircls.append(_DIR_SELF)
            elif mask.upstream[i, j]:
                dircls.append(_DIR_UP)
            else:
                dircls.append(_DIR_DOWN)
        counts[i + 1] = counts[i] + len(members)
    return EdgeSet(
        src=np.asarray(src, dtype=np.int64),
        dst=np.asarray(dst, dtype=np.int64),
        dircls=np.asarray(dircls, dtype=np.int64),
        seg_ptr=counts,
    )


def _tile_edges(es: EdgeSet, batch, n):
    """Replicate an edge set across a batch stacked along the node axis."""
    if batch == 1:
        return es
    e = len(es.src)
    offs = (np.arange(batch, dtype=np.int64) * n)[:, None]
    src = (es.src[None, :] + offs).ravel()
    dst = (es.dst[None, :] + offs).ravel()
    dircls = np.tile(es.dircls, batch)
    counts = np.diff(es.seg_ptr)
    seg_ptr = np.concatenate(
        [[0], np.cumsum(np.tile(counts, batch))]
    ).astype(np.int64)
    assert seg_ptr[-1] == e * batch
    return EdgeSet(src=src, dst=dst, dircls=dircls, seg_ptr=seg_ptr)


@dataclass
class DgcKernels:
    """Per-edge weights and fluctuations from one dynamic convolution."""

    speed_edges: EdgeSet
    flow_edges: EdgeSet
    speed_weights: np.ndarray
    flow_weights: np.ndarray
    fluct_speed: np.ndarray  # km/h
    fluct_flow: np.ndarray  # veh/h/lane


@dataclass
class StepState:
    """One decoder step: per-node means, raw NIG parameters, hidden."""

    speed_mean: np.ndarray  # km/h, within [0, speed_scale]
    flow_mean: np.ndarray  # veh/h/lane, within [0, flow_scale]
    raw_nu: np.ndarray
    raw_alpha: np.ndarray
    raw_beta: np.ndarray
    hidden: np.ndarray


class DgcrnnModel:
    """The forecaster: parameters, masks, and the step/rollout logic."""

    def __init__(self, cfg: ModelConfig, graph: RoadGraph, seed=0):
        self.cfg = cfg
        self.graph = graph
        self.n = len(graph)
        self.mask_speed = adjacency_power(graph, cfg.degree_speed)
        self.mask_flow = adjacency_power(graph, cfg.degree_flow)
        self.edges_speed = build_edge_set(self.mask_speed)
        self.edges_flow = build_edge_set(self.mask_flow)
        # static convolution for the GRU gates: uniform weights over the
        # speed-degree neighborhood
        counts = np.diff(self.edges_speed.seg_ptr)
        self.static_weights = np.repeat(1.0 / counts.astype(np.float64), counts)
        self.params = {}
        self._edge_cache = {}
        self._init_params(seed)

    # -- parameters -----------------------------------------------------
    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        h, k, fh = self.cfg.hidden_dim, self.cfg.kernel_dim, self.cfg.feat_hidden
        fin = FEATURES + h

        def w(name, shape):
            scale = 1.0 / math.sqrt(shape[0])
            self.params[name] = T.Tensor(
                rng.normal(0.0, scale, size=shape), requires_grad=True
            )

        def b(name, size):
            self.params[name] = T.Tensor(np.zeros(size), requires_grad=True)

        for q in ("spd", "flw"):
            w(f"dgc_{q}_proj_w", (fin, k))
            b(f"dgc_{q}_proj_b", k)
            w(f"dgc_{q}_src_vec", (3, k))
            w(f"dgc_{q}_dst_vec", (3, k))
        w("feat_w1", (fin, fh))
        b("feat_b1", fh)
        w("feat_w_spd", (fh, 1))
        b("feat_b_spd", 1)
        w("feat_w_flw", (fh, 1))
        b("feat_b_flw", 1)
        w("fluct_w", (fin, 2))
        b("fluct_b", 2)
        w("gru_wz", (fin, h))
        b("gru_bz", h)
        w("gru_wr", (fin, h))
        b("gru_br", h)
        w("gru_wh", (fin, h))
        b("gru_bh", h)
        w("head_w", (h, 3))
        b("head_b", 3)

    def parameter_names(self):
        return list(self.params)

    def set_parameters(self, arrays):
        for name, arr in arrays.items():
            if name not in self.params:
                raise ValidationError(f"unknown parameter {name!r}")
            if tuple(arr.shape) != tuple(self.params[name].shape):
                raise ValidationError(
                    f"parameter {name!r} has shape {arr.shape}, "
                    f"expected {self.params[name].shape}"
                )
            self.params[name] = T.Tensor(
                np.asarray(arr, dtype=np.float64), requires_grad=True
            )

    # -- edge batching ----------------------------------------------------
    def _edges(self, which, batch):
        key = (which, batch)
        if key not in self._edge_cache:
            base = {
                "spd": self.edges_speed,
                "flw": self.edges_flow,
            }[which]
            self._edge_cache[key] = _tile_edges(base, batch, self.n)
        return self._edge_cache[key]

    def _static_w(self, batch):
        key = ("static", batch)
        if key not in self._edge_cache:
            self._edge_cache[key] = T.Tensor(np.tile(self.static_weights, batch))
        return self._edge_cache[key]

    # -- feature construction ----------------------------------------------
    def teacher_features(self, speed_norm, flow_norm):
        """Features for ground-truth inputs: fixed small input uncertainty."""
        nu, alpha, beta = self.cfg.teacher_nig_normalized()
        rows = speed_norm.shape[0]
        out = np.empty((rows, FEATURES))
        out[:, 0] = speed_norm
        out[:, 1] = flow_norm
        out[:, 2] = math.log(nu) / _LOG_NU_SCALE
        out[:, 3] = math.log(alpha - 1.0) / _LOG_ALPHA_SCALE
        out[:, 4] = (math.log(beta) + _LOG_BETA_SHIFT) / _LOG_BETA_SCALE
        return out

    def teacher_raw_nig(self):
        """Raw head values whose positivity transform hits the teacher NIG."""
        nu, alpha, beta = self.cfg.teacher_nig_normalized()
        return (
            float(inverse_softplus(nu - PARAM_FLOOR)),
            float(inverse_softplus(alpha - 1.0 - PARAM_FLOOR)),
            float(inverse_softplus(beta - PARAM_FLOOR)),
        )

    @staticmethod
    def _pred_features(m_spd, m_flw, nu, alpha, beta):
        """Tensor features from the previous step's own outputs."""
        return T.concat(
            [
                m_spd,
                m_flw,
                T.log(nu) * (1.0 / _LOG_NU_SCALE),
                T.log(alpha - 1.0) * (1.0 / _LOG_ALPHA_SCALE),
                (T.log(beta) + _LOG_BETA_SHIFT) * (1.0 / _LOG_BETA_SCALE),
            ],
            axis=1,
        )

    # -- single building blocks (tensor graph) ------------------------------
    def _dgc(self, z, batch):
        p = self.params
        cfg = self.cfg
        ffeat = T.tanh(z @ p["feat_w1"] + p["feat_b1"])
        f_spd = T.sigmoid(ffeat @ p["feat_w_spd"] + p["feat_b_spd"])
        f_flw = T.sigmoid(ffeat @ p["feat_w_flw"] + p["feat_b_flw"])
        r = T.tanh(z @ p["fluct_w"] + p["fluct_b"])
        r_spd = r[:, 0:1] * (cfg.fluct_bound_speed / cfg.speed_scale)
        r_flw = r[:, 1:2] * (cfg.fluct_bound_flow / cfg.flow_scale)

        weights = {}
        aggregated = {}
        for q, feat in (("spd", f_spd), ("flw", f_flw)):
            es = self._edges(q, batch)
            proj = T.tanh(z @ p[f"dgc_{q}_proj_w"] + p[f"dgc_{q}_proj_b"])
            # direction-specific scores for every node, then per-edge logits
            src_scores = proj @ T.transpose(p[f"dgc_{q}_src_vec"])
            dst_scores = proj @ T.transpose(p[f"dgc_{q}_dst_vec"])
            logits = T.gather_pairs(src_scores, es.src, es.dircls) + T.gather_pairs(
                dst_scores, es.dst, es.dircls
            )
            w = T.segment_softmax(logits, es.seg_ptr)
            weights[q] = w
            agg = T.neighbor_weighted_sum(
                w, feat, es.src, es.seg_ptr
            )
            aggregated[q] = agg
        m_spd = T.clip(aggregated["spd"] + r_spd, 0.0, 1.0)
        m_flw = T.clip(aggregated["flw"] + r_flw, 0.0, 1.0)
        return m_spd, m_flw, weights, r_spd, r_flw

    def _gru(self, z, x, h, batch):
        p = self.params
        es = self._edges("spd", batch)
        sw = self._static_w(batch)
        conv_z = T.neighbor_weighted_sum(sw, z, es.src, es.seg_ptr)
        update = T.sigmoid(conv_z @ p["gru_wz"] + p["gru_bz"])
        reset = T.sigmoid(conv_z @ p["gru_wr"] + p["gru_br"])
        z2 = T.concat([x, reset * h], axis=1)
        conv_h = T.neighbor_weighted_sum(sw, z2, es.src, es.seg_ptr)
        cand = T.tanh(conv_h @ p["gru_wh"] + p["gru_bh"])
        return (1.0 - update) * h + update * cand

    def _cell(self, x, h, batch, predict=True):
        """One step: returns (m_spd, m_flw, raw, h_next, weights)."""
        z = T.concat([x, h], axis=1)
        m_spd = m_flw = weights = r_spd = r_flw = None
        if predict:
            m_spd, m_flw, weights, r_spd, r_flw = self._dgc(z, batch)
        h_next = self._gru(z, x, h, batch)
        raw = h_next @ self.params["head_w"] + self.params["head_b"]
        return m_spd, m_flw, raw, h_next, weights, r_spd, r_flw

    # -- public single-step API (numpy in, numpy out) ----------------------
    def dgc_forward(self, speed, flow, nig, hidden):
        """Next means from one dynamic graph convolution.

        `speed` (km/h), `flow` (veh/h/lane), `nig` = (nu, alpha, beta)
        arrays, `hidden` (n, hidden_dim).  Returns physical-unit means
        and the generated kernels.
        """
        x, h = self._wrap_inputs(speed, flow, nig, hidden)
        with T.no_grad():
            m_spd, m_flw, weights, r_spd, r_flw = self._dgc(
                T.concat([x, h], axis=1), 1
            )
        return (
            m_spd.data[:, 0] * self.cfg.speed_scale,
            m_flw.data[:, 0] * self.cfg.flow_scale,
            DgcKernels(
                speed_edges=self.edges_speed,
                flow_edges=self.edges_flow,
                speed_weights=weights["spd"].data.copy(),
                flow_weights=weights["flw"].data.copy(),
                fluct_speed=r_spd.data[:, 0] * self.cfg.speed_scale,
                fluct_flow=r_flw.data[:, 0] * self.cfg.flow_scale,
            ),
        )

    def gcgru_step(self, speed, flow, nig, hidden):
        """Advance the hidden state one step; returns (n, hidden_dim)."""
        x, h = self._wrap_inputs(speed, flow, nig, hidden)
        with T.no_grad():
            z = T.concat([x, h], axis=1)
            h_next = self._gru(z, x, h, 1)
        return h_next.data

    def uncertainty_head(self, hidden):
        """Raw NIG parameters from a hidden state; rows are nodes."""
        hidden = np.asarray(hidden, dtype=np.float64)
        with T.no_grad():
            raw = T.Tensor(hidden) @ self.params["head_w"] + self.params["head_b"]
        return raw.data

    def _wrap_inputs(self, speed, flow, nig, hidden):
        speed = np.asarray(speed, dtype=np.float64) / self.cfg.speed_scale
        flow = np.asarray(flow, dtype=np.float64) / self.cfg.flow_scale
        nu, alpha, beta = (np.asarray(v, dtype=np.float64) for v in nig)
        rows = speed.shape[0]
        feats = np.empty((rows, FEATURES))
        feats[:, 0] = speed
        feats[:, 1] = flow
        feats[:, 2] = np.log(nu) / _LOG_NU_SCALE
        feats[:, 3] = np.log(alpha - 1.0) / _LOG_ALPHA_SCALE
        feats[:, 4] = (np.log(beta) + _LOG_BETA_SHIFT) / _LOG_BETA_SCALE
        return T.Tensor(feats), T.Tensor(np.asarray(hidden, dtype=np.float64))

    # -- unrolling -----------------------------------------------------------
    def unroll(
        self,
        obs_speed,
        obs_flow,
        target_speed=None,
        target_flow=None,
        teacher_mask=None,
    ):
        """Run encoder and decoder over a stacked batch (tensor graph).

        Arrays are (batch, nodes, steps) in physical units.  Returns a
        dict of per-step lists of (batch * nodes, 1) tensors:
        speed/flow means (normalized) and transformed NIG parameters.

        teacher_mask is (batch, decoder_steps) booleans; where true, the
        decoder input for that step is the ground-truth previous target.
        Entry 0 is ignored: the first decoder input is always the last
        observation.
        """
        cfg = self.cfg
        batch, n, wi = obs_speed.shape
        if n != self.n:
            raise ValidationError(f"batch has {n} nodes, model expects {self.n}")
        if wi != cfg.encoder_steps:
            raise ValidationError(
                f"observation window {wi} != encoder_steps {cfg.encoder_steps}"
            )
        rows = batch * n
        sscale, fscale = cfg.speed_scale, cfg.flow_scale
        obs_sp = np.ascontiguousarray(obs_speed, dtype=np.float64) / sscale
        obs_fl = np.ascontiguousarray(obs_flow, dtype=np.float64) / fscale
        h = T.Tensor(np.zeros((rows, cfg.hidden_dim)))
        out = {
            "speed": [],
            "flow": [],
            "nu": [],
            "alpha": [],
            "beta": [],
            "raw": [],
            "hidden": [],
        }

        for t in range(cfg.encoder_steps):
            x_np = self.teacher_features(
                obs_sp[:, :, t].reshape(rows), obs_fl[:, :, t].reshape(rows)
            )
            x = T.Tensor(x_np)
            last = t == cfg.encoder_steps - 1
            m_spd, m_flw, raw, h, _, _, _ = self._cell(x, h, batch, predict=last)
            if last:
                nu, alpha, beta = positivity_transform_t(
                    raw[:, 0:1], raw[:, 1:2], raw[:, 2:3]
                )
                out["speed"].append(m_spd)
                out["flow"].append(m_flw)
                out["nu"].append(nu)
                out["alpha"].append(alpha)
                out["beta"].append(beta)
                out["raw"].append(raw)
                out["hidden"].append(h)

        if teacher_mask is None:
            teacher_mask = np.zeros((batch, cfg.decoder_steps), dtype=bool)
        tgt_sp = tgt_fl = None
        if target_speed is not None:
            tgt_sp = np.ascontiguousarray(target_speed, dtype=np.float64) / sscale
            tgt_fl = np.ascontiguousarray(target_flow, dtype=np.float64) / fscale
        elif teacher_mask[:, 1:].any():
            raise ValidationError("teacher forcing requires target arrays")

        for k in range(1, cfg.decoder_steps):
            pred_x = self._pred_features(
                out["speed"][k - 1],
                out["flow"][k - 1],
                out["nu"][k - 1],
                out["alpha"][k - 1],
                out["beta"][k - 1],
            )
            use_truth = teacher_mask[:, k]
            if tgt_sp is not None and use_truth.any():
                truth_x = T.Tensor(
                    self.teacher_features(
                        tgt_sp[:, :, k - 1].reshape(rows),
                        tgt_fl[:, :, k - 1].reshape(rows),
                    )
                )
                mix = np.repeat(use_truth.astype(np.float64), n)[:, None]
                x = truth_x * mix + pred_x * (1.0 - mix)
            else:
                x = pred_x
            m_spd, m_flw, raw, h, _, _, _ = self._cell(x, h, batch, predict=True)
            nu, alpha, beta = positivity_transform_t(
                raw[:, 0:1], raw[:, 1:2], raw[:, 2:3]
            )
            out["speed"].append(m_spd)
            out["flow"].append(m_flw)
            out["nu"].append(nu)
            out["alpha"].append(alpha)
            out["beta"].append(beta)
            out["raw"].append(raw)
            out["hidden"].append(h)
        return out

    def rollout(self, sample, teacher_forcing_mask=None):
        """Forecast one sample; returns a StepState per decoder step.

        With a true entry in teacher_forcing_mask, that decoder step
        consumes the ground-truth previous target instead of its own
        prediction, so errors do not compound through it.
        """
        cfg = self.cfg
        if teacher_forcing_mask is None:
            mask = np.zeros((1, cfg.decoder_steps), dtype=bool)
        else:
            mask = np.asarray(teacher_forcing_mask, dtype=bool).reshape(
                1, cfg.decoder_steps
            )
        with T.no_grad():
            out = self.unroll(
                sample.obs_speed[None, :, :],
                sample.obs_flow[None, :, :],
                sample.target_speed[None, :, :],
                sample.target_flow[None, :, :],
                teacher_mask=mask,
            )
        states = []
        for k in range(cfg.decoder_steps):
            raw = out["raw"][k].data
            states.append(
                StepState(
                    speed_mean=out["speed"][k].data[:, 0] * cfg.speed_scale,
                    flow_mean=out["flow"][k].data[:, 0] * cfg.flow_scale,
                    raw_nu=raw[:, 0].copy(),
                    raw_alpha=raw[:, 1].copy(),
                    raw_beta=raw[:, 2].copy(),
                    hidden=out["hidden"][k].data.copy(),
                )
            )
        return states

    def predict(self, samples, batch_size=64):
        """Batched free-running inference over corpus samples.

        Returns arrays keyed speed (km/h), flow (veh/h/lane), nu, alpha,
        beta (normalized NIG), each shaped (samples, nodes, steps).
        """
        cfg = self.cfg
        count = len(samples)
        shape = (count, self.n, cfg.decoder_steps)
        res = {k: np.empty(shape) for k in ("speed", "flow", "nu", "alpha", "beta")}
        for lo in range(0, count, batch_size):
            chunk = samples[lo : lo + batch_size]
            b = len(chunk)
            obs_s = np.stack([s.obs_speed for s in chunk]).astype(np.float64)
            obs_f = np.stack([s.obs_flow for s in chunk]).astype(np.float64)
            with T.no_grad():
                out = self.unroll(obs_s, obs_f)
            for k in range(cfg.decoder_steps):
                res["speed"][lo : lo + b, :, k] = (
                    out["speed"][k].data.reshape(b, self.n) * cfg.speed_scale
                )
                res["flow"][lo : lo + b, :, k] = (
                    out["flow"][k].data.reshape(b, self.n) * cfg.flow_scale
                )
                for name in ("nu", "alpha", "beta"):
                    res[name][lo : lo + b, :, k] = out[name][k].data.reshape(b, self.n)
        return res
