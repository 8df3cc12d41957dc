"""Sliding-window sample corpora and their on-disk formats.

A sample is a (nodes x window) block of speed and flow, split into an
observation prefix and a forecast target suffix.  Samples overlapping
an incident window are tagged rare at generation time; the tag is
ground truth for evaluating uncertainty-based rarity ranking and is
never shown to the model.

Binary layout (little-endian): an ``EVTC`` header carrying version,
seed, config hash, node count, window sizes and the grid spacing,
followed by fixed-size records with float32 payloads.  Writing the same
corpus twice produces byte-identical files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorpusFormatError, ValidationError

MAGIC = b"EVTC"
VERSION = 1
_HEADER = struct.Struct("<4sIQ16sIIIddI")
_RECORD_META = struct.Struct("<IIB")


@dataclass
class Sample:
    scenario_id: int
    offset: int
    rare: bool
    window_in: int
    speed: np.ndarray  # (nodes, window_in + window_out) float32, km/h
    flow: np.ndarray  # (nodes, window_in + window_out) float32, veh/h/lane

    @property
    def obs_speed(self):
        return self.speed[:, : self.window_in]

    @property
    def target_speed(self):
        return self.speed[:, self.window_in :]

    @property
    def obs_flow(self):
        return self.flow[:, : self.window_in]

    @property
    def target_flow(self):
        return self.flow[:, self.window_in :]


class Corpus:
    """An ordered list of samples plus the metadata to interpret them."""

    def __init__(
        self,
        samples,
        node_count,
        window_in,
        window_out,
        delta_t,
        delta_x,
        seed=0,
        config_hash="0" * 16,
    ):
        self.samples = list(samples)
        self.node_count = int(node_count)
        self.window_in = int(window_in)
        self.window_out = int(window_out)
        self.delta_t = float(delta_t)
        self.delta_x = float(delta_x)
        self.seed = int(seed)
        self.config_hash = str(config_hash)
        if len(self.config_hash) != 16:
            raise ValidationError("config hash must be 16 hex characters")
        width = self.window_in + self.window_out
        for i, s in enumerate(self.samples):
            if s.speed.shape != (self.node_count, width) or s.flow.shape != (
                self.node_count,
                width,
            ):
                raise ValidationError(
                    f"sample {i} has blocks {s.speed.shape}, expected "
                    f"({self.node_count}, {width})"
                )

    def __len__(self):
        return len(self.samples)

    def subset(self, indices):
        return Corpus(
            [self.samples[i] for i in indices],
            self.node_count,
            self.window_in,
            self.window_out,
            self.delta_t,
            self.delta_x,
            seed=self.seed,
            config_hash=self.config_hash,
        )

    def merged_with(self, other: "Corpus") -> "Corpus":
        for attr in ("node_count", "window_in", "window_out", "delta_t", "delta_x"):
            if getattr(self, attr) != getattr(other, attr):
                raise CorpusFormatError(
                    f"cannot merge corpora with different {attr}: "
                    f"{getattr(self, attr)} vs {getattr(other, attr)}"
                )
        return Corpus(
            self.samples + other.samples,
            self.node_count,
            self.window_in,
            self.window_out,
            self.delta_t,
            self.delta_x,
            seed=self.seed,
            config_hash=self.config_hash,
        )

    # -- binary round trip -------------------------------------------------
    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(
                _HEADER.pack(
                    MAGIC,
                    VERSION,
                    self.seed,
                    self.config_hash.encode("ascii"),
                    self.node_count,
                    self.window_in,
                    self.window_out,
                    self.delta_t,
                    self.delta_x,
                    len(self.samples),
                )
            )
            for s in self.samples:
                fh.write(_RECORD_META.pack(s.scenario_id, s.offset, int(s.rare)))
                fh.write(
                    np.ascontiguousarray(s.speed, dtype="<f4").tobytes()
                )
                fh.write(np.ascontiguousarray(s.flow, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Corpus":
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            if len(head) != _HEADER.size:
                raise CorpusFormatError(f"{path}: truncated header")
            (
                magic,
                version,
                seed,
                config_hash,
                node_count,
                window_in,
                window_out,
                delta_t,
                delta_x,
                n_samples,
            ) = _HEADER.unpack(head)
            if magic != MAGIC:
                raise CorpusFormatError(f"{path}: bad magic {magic!r}")
            if version != VERSION:
                raise CorpusFormatError(
                    f"{path}: unsupported corpus version {version}"
                )
            width = window_in + window_out
            block = node_count * width
            samples = []
            for k in range(n_samples):
                meta = fh.read(_RECORD_META.size)
                if len(meta) != _RECORD_META.size:
                    raise CorpusFormatError(f"{path}: truncated sample {k}")
                scenario_id, offset, rare = _RECORD_META.unpack(meta)
                payload = fh.read(2 * block * 4)
                if len(payload) != 2 * block * 4:
                    raise CorpusFormatError(f"{path}: truncated sample {k}")
                arr = np.frombuffer(payload, dtype="<f4")
                samples.append(
                    Sample(
                        scenario_id=scenario_id,
                        offset=offset,
                        rare=bool(rare),
                        window_in=window_in,
                        speed=arr[:block].reshape(node_count, width).copy(),
                        flow=arr[block:].reshape(node_count, width).copy(),
                    )
                )
            if fh.read(1):
                raise CorpusFormatError(f"{path}: trailing bytes after last sample")
        return cls(
            samples,
            node_count,
            window_in,
            window_out,
            delta_t,
            delta_x,
            seed=seed,
            config_hash=config_hash.decode("ascii"),
        )

    # -- csv export ---------------------------------------------------------
    def to_csv(self, path):
        """Long-format dump: one row per (sample, node, step)."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(
                f"# evtraf-corpus v{VERSION} seed={self.seed} "
                f"config={self.config_hash}\n"
            )
            fh.write("sample,scenario,offset,rare,node,step,speed_kmh,flow_vphpl\n")
            for k, s in enumerate(self.samples):
                for i in range(self.node_count):
                    for t in range(s.speed.shape[1]):
                        fh.write(
                            f"{k},{s.scenario_id},{s.offset},{int(s.rare)},"
                            f"{i},{t},{s.speed[i, t]:.6g},{s.flow[i, t]:.6g}\n"
                        )


def window_count(steps, window, stride):
    """Number of sliding windows of `window` steps over `steps` steps."""
    if steps < window:
        return 0
    return (steps - window) // stride + 1


def make_corpus(
    graph,
    scenario_fields,
    window_in=20,
    window_out=15,
    stride=1,
    seed=0,
    config_hash="0" * 16,
) -> Corpus:
    """Slice simulated fields into sliding-window samples.

    `scenario_fields` is a list of (Scenario, TrafficField) pairs;
    scenario ids are positions in that list.  A sample is tagged rare
    when its window overlaps any incident interval of its scenario.
    """
    if window_in < 1 or window_out < 1:
        raise ValidationError("window sizes must be >= 1")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    width = window_in + window_out
    samples = []
    for sid, (scenario, field) in enumerate(scenario_fields):
        steps = field.steps
        if field.speed.shape[0] != len(graph):
            raise ValidationError(
                f"scenario {sid}: field has {field.speed.shape[0]} nodes, "
                f"graph has {len(graph)}"
            )
        for offset in range(0, steps - width + 1, stride):
            rare = any(
                inc.start < offset + width and offset < inc.start + inc.duration
                for inc in scenario.incidents
            )
            samples.append(
                Sample(
                    scenario_id=sid,
                    offset=offset,
                    rare=rare,
                    window_in=window_in,
                    speed=field.speed[:, offset : offset + width].astype("<f4"),
                    flow=field.flow[:, offset : offset + width].astype("<f4"),
                )
            )
    return Corpus(
        samples,
        node_count=len(graph),
        window_in=window_in,
        window_out=window_out,
        delta_t=graph.delta_t,
        delta_x=graph.delta_x,
        seed=seed,
        config_hash=config_hash,
    )
