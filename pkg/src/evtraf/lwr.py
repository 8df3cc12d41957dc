"""Kinematic-wave (LWR) traffic simulator on road graphs.

First-order Godunov scheme with a triangular fundamental diagram.
Cell densities are per lane; fluxes between cells take the minimum of
upstream demand and downstream supply, with proportional merging when
several approaches compete for one cell's supply and equal splitting
across diverging branches.  Incidents and static bottlenecks scale a
cell's capacity.

The simulator integrates on a fine internal step and aggregates density
and flow averages onto the coarser output grid, mirroring aggregated
detector data.  Boundary inflow that the network cannot accept within a
step is dropped (no external queue is modeled).  Incident start and
duration are expressed in output steps, so they are effectively
quantized to the output grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import CflError, ValidationError
from .roadgraph import RoadGraph


@dataclass(frozen=True)
class FundamentalDiagram:
    """Triangular flow-density relation, per lane.

    Defaults give capacity 1800 veh/h/lane at the critical density and a
    congested wave speed of 18 km/h (0.3 km/min).
    """

    free_speed: float = 120.0  # km/h
    critical_density: float = 15.0  # veh/km/lane
    jam_density: float = 115.0  # veh/km/lane

    def __post_init__(self):
        if self.free_speed <= 0.0:
            raise ValidationError(f"free speed must be positive, got {self.free_speed}")
        if not 0.0 < self.critical_density < self.jam_density:
            raise ValidationError(
                "need 0 < critical density < jam density, got "
                f"{self.critical_density} and {self.jam_density}"
            )

    @property
    def capacity(self):
        return self.free_speed * self.critical_density

    @property
    def wave_speed(self):
        return self.capacity / (self.jam_density - self.critical_density)

    def demand(self, rho, cap_factor=1.0):
        """Flow a cell at density rho wants to send, per lane."""
        return np.minimum(self.free_speed * np.asarray(rho), self.capacity * cap_factor)

    def supply(self, rho, cap_factor=1.0):
        """Flow a cell at density rho can accept, per lane."""
        return np.minimum(
            self.capacity * cap_factor,
            self.wave_speed * (self.jam_density - np.asarray(rho)),
        )

    def local_flow(self, rho, cap_factor=1.0):
        q = np.minimum(
            np.minimum(self.free_speed * np.asarray(rho), self.capacity * cap_factor),
            self.wave_speed * (self.jam_density - np.asarray(rho)),
        )
        return np.maximum(q, 0.0)


@dataclass(frozen=True)
class Incident:
    """Transient capacity loss at one node, in output-step units."""

    node: str
    start: int
    duration: int
    capacity_drop: float

    def __post_init__(self):
        if not 0.0 < self.capacity_drop <= 1.0:
            raise ValidationError(
                f"capacity drop must be in (0, 1], got {self.capacity_drop}"
            )
        if self.duration < 1:
            raise ValidationError(f"duration must be >= 1 step, got {self.duration}")


@dataclass
class Scenario:
    """One simulation setup over a road graph.

    demand_profile maps boundary node ids to per-output-step inflow in
    veh/h.  bottlenecks are static (node, capacity_factor) pairs;
    incidents are transient capacity drops tagged as rare events.
    noise_sigma perturbs boundary demand; measurement_sigma perturbs the
    observed speeds (detector noise) without touching the true state.
    """

    graph: RoadGraph
    demand_profile: dict
    incidents: list = field(default_factory=list)
    bottlenecks: list = field(default_factory=list)
    seed: int = 0
    noise_sigma: float = 0.1
    measurement_sigma: float = 0.0
    name: str = ""


@dataclass(frozen=True)
class TrafficField:
    """Aggregated simulator output on the (node, output step) grid."""

    speed: np.ndarray  # km/h
    flow: np.ndarray  # veh/h/lane
    density: np.ndarray  # veh/km/lane
    delta_t: float
    delta_x: float

    @property
    def steps(self):
        return self.speed.shape[1]


def _edge_arrays(graph: RoadGraph):
    src, dst, frac = [], [], []
    out_deg = graph.adjacency.sum(axis=1)
    for i in range(len(graph)):
        succ = graph.successors(i)
        for j in succ:
            src.append(i)
            dst.append(int(j))
            frac.append(1.0 / out_deg[i])
    is_sink = (out_deg == 0).astype(np.uint8)
    return (
        np.asarray(src, dtype=np.int64),
        np.asarray(dst, dtype=np.int64),
        np.asarray(frac, dtype=np.float64),
        is_sink,
    )


def check_cfl(fd: FundamentalDiagram, dt_min, dx_km):
    """Fastest characteristic must not cross a cell per step."""
    travel = fd.free_speed * dt_min / 60.0
    if travel > dx_km + 1e-12:
        raise CflError(
            f"time step {dt_min} min lets the free-flow wave travel {travel} km, "
            f"exceeding the cell length {dx_km} km"
        )


def godunov_step(
    density,
    fd: FundamentalDiagram,
    dt_min,
    dx_km,
    graph: RoadGraph,
    inflow=None,
    cap_factor=None,
):
    """One Godunov update of per-lane densities over the graph.

    `inflow` is total veh/h entering each node from outside; sinks
    (nodes with no successors) discharge freely.  Returns the new
    density array.
    """
    check_cfl(fd, dt_min, dx_km)
    n = len(graph)
    rho = np.array(density, dtype=np.float64)
    if rho.shape != (n,):
        raise ValidationError(f"density must have shape ({n},), got {rho.shape}")
    src, dst, frac, is_sink = _edge_arrays(graph)
    inflow = np.zeros(n) if inflow is None else np.asarray(inflow, dtype=np.float64)
    cap = np.ones(n) if cap_factor is None else np.asarray(cap_factor, dtype=np.float64)
    _kernels.godunov_window(
        rho,
        graph.lanes,
        src,
        dst,
        frac,
        inflow,
        cap,
        is_sink,
        1,
        float(dt_min),
        float(dx_km),
        fd.free_speed,
        fd.wave_speed,
        fd.capacity,
        fd.jam_density,
    )
    return rho


def simulate(
    scenario: Scenario,
    horizon,
    fd: FundamentalDiagram = FundamentalDiagram(),
    substep_min=0.1,
    initial_density=None,
) -> TrafficField:
    """Run a scenario for `horizon` output steps.

    Demand noise is one multiplicative lognormal draw (mean one) per
    boundary node per output step, seeded from the scenario.  Measurement
    noise, when enabled, perturbs the observed speeds per (node, step) and
    rederives flow as density * speed; densities stay exact.
    """
    graph = scenario.graph
    n = len(graph)
    dt_out = graph.delta_t
    dx = graph.delta_x
    check_cfl(fd, substep_min, dx)
    substeps = int(round(dt_out / substep_min))
    if abs(substeps * substep_min - dt_out) > 1e-9:
        raise ValidationError(
            f"output interval {dt_out} min is not a multiple of the internal "
            f"step {substep_min} min"
        )
    src, dst, frac, is_sink = _edge_arrays(graph)
    lanes = graph.lanes
    rho = (
        np.zeros(n)
        if initial_density is None
        else np.array(initial_density, dtype=np.float64)
    )
    if rho.shape != (n,):
        raise ValidationError(f"initial density must have shape ({n},), got {rho.shape}")

    base_cap = np.ones(n)
    for node, factor in scenario.bottlenecks:
        if node not in graph.index:
            raise ValidationError(f"bottleneck references unknown node {node!r}")
        if not 0.0 <= factor <= 1.0:
            raise ValidationError(f"bottleneck factor must be in [0, 1], got {factor}")
        base_cap[graph.index[node]] = factor

    demand_nodes = []
    demand_series = []
    for node, series in sorted(scenario.demand_profile.items()):
        if node not in graph.index:
            raise ValidationError(f"demand profile references unknown node {node!r}")
        series = np.asarray(series, dtype=np.float64)
        if series.shape != (horizon,):
            raise ValidationError(
                f"demand series for {node!r} must have length {horizon}, "
                f"got {series.shape}"
            )
        if np.any(series < 0.0):
            raise ValidationError(f"demand series for {node!r} has negative entries")
        demand_nodes.append(graph.index[node])
        demand_series.append(series)

    for inc in scenario.incidents:
        if inc.node not in graph.index:
            raise ValidationError(f"incident references unknown node {inc.node!r}")

    rng = np.random.default_rng(scenario.seed)
    sigma = scenario.noise_sigma
    density = np.empty((n, horizon))
    flow = np.empty((n, horizon))
    for t in range(horizon):
        inflow = np.zeros(n)
        for k, i in enumerate(demand_nodes):
            noise = 1.0
            if sigma > 0.0:
                noise = float(np.exp(sigma * rng.standard_normal() - 0.5 * sigma**2))
            inflow[i] = demand_series[k][t] * noise
        capf = base_cap.copy()
        for inc in scenario.incidents:
            if inc.start <= t < inc.start + inc.duration:
                i = graph.index[inc.node]
                capf[i] = min(capf[i], 1.0 - inc.capacity_drop)
        dens_sum, flow_sum = _kernels.godunov_window(
            rho,
            lanes,
            src,
            dst,
            frac,
            inflow,
            capf,
            is_sink,
            substeps,
            float(substep_min),
            float(dx),
            fd.free_speed,
            fd.wave_speed,
            fd.capacity,
            fd.jam_density,
        )
        density[:, t] = dens_sum / substeps
        flow[:, t] = flow_sum / substeps

    speed = np.where(density > 1e-12, flow / np.maximum(density, 1e-12), fd.free_speed)
    ms = scenario.measurement_sigma
    if ms > 0.0:
        # own stream so enabling it leaves the demand draws untouched
        obs_rng = np.random.default_rng([scenario.seed, 7919])
        speed = np.clip(
            speed * (1.0 + ms * obs_rng.standard_normal(speed.shape)),
            0.1,
            fd.free_speed,
        )
        flow = density * speed  # keep the observed triple consistent
    return TrafficField(
        speed=speed, flow=flow, density=density, delta_t=dt_out, delta_x=dx
    )


# -- scenario generation -------------------------------------------------


def _peak_profile(horizon, base, peak, start, length):
    """Trapezoid demand: ramp up to `peak`, hold, ramp back to `base`."""
    out = np.full(horizon, float(base))
    ramp = max(3, length // 6)
    for t in range(horizon):
        if start <= t < start + ramp:
            out[t] = base + (peak - base) * (t - start + 1) / ramp
        elif start + ramp <= t < start + length - ramp:
            out[t] = peak
        elif start + length - ramp <= t < start + length:
            out[t] = peak - (peak - base) * (t - (start + length - ramp) + 1) / ramp
    return out


def scenario_mix(
    graph: RoadGraph,
    seed=0,
    recurrent=10,
    freeflow=3,
    incident_count=35,
    horizon=185,
    incident_horizon=39,
    base_demand=400.0,
    peak_demand=1800.0,
    incident_demand=900.0,
    bottleneck_factor=0.55,
    incident_drop=0.9,
    noise_sigma=0.1,
    measurement_sigma=0.0,
):
    """Build a corpus recipe: duplicated recurrent-congestion scenarios,
    free-flow scenarios, and short unique incident scenarios.

    Recurrent scenarios share one demand profile and one bottleneck
    (congestion always forms at the same place); incidents strike
    varying nodes at varying times, so their patterns are rare by
    construction.  Returns (scenarios, horizons) of equal length.
    """
    if len(graph) < 4:
        raise ValidationError("scenario mix needs a graph with at least 4 nodes")
    entry = graph.node_ids[0]
    bottleneck_node = graph.node_ids[2 * len(graph) // 3]
    rng = np.random.default_rng(seed)
    scenarios = []
    horizons = []

    peak_start = max(5, horizon // 4)
    peak_len = horizon // 3
    lanes_entry = graph.nodes[graph.index[entry]].lanes
    base_profile = _peak_profile(
        horizon, base_demand * lanes_entry, peak_demand * lanes_entry, peak_start, peak_len
    )
    for r in range(recurrent):
        scenarios.append(
            Scenario(
                graph=graph,
                demand_profile={entry: base_profile.copy()},
                bottlenecks=[(bottleneck_node, bottleneck_factor)],
                seed=int(rng.integers(2**31)),
                noise_sigma=noise_sigma,
                measurement_sigma=measurement_sigma,
                name=f"recurrent-{r}",
            )
        )
        horizons.append(horizon)

    for r in range(freeflow):
        scenarios.append(
            Scenario(
                graph=graph,
                demand_profile={
                    entry: np.full(horizon, base_demand * lanes_entry)
                },
                bottlenecks=[(bottleneck_node, bottleneck_factor)],
                seed=int(rng.integers(2**31)),
                noise_sigma=noise_sigma,
                measurement_sigma=measurement_sigma,
                name=f"freeflow-{r}",
            )
        )
        horizons.append(horizon)

    # incident candidates avoid the first nodes (need upstream room for the
    # queue to be visible) and the recurrent bottleneck itself
    candidates = [
        nid
        for k, nid in enumerate(graph.node_ids)
        if k >= 2 and nid != bottleneck_node
    ]
    for r in range(incident_count):
        node = candidates[int(rng.integers(len(candidates)))]
        start = int(rng.integers(6, 13))
        duration = int(rng.integers(14, 22))
        scenarios.append(
            Scenario(
                graph=graph,
                demand_profile={
                    entry: np.full(incident_horizon, incident_demand * lanes_entry)
                },
                incidents=[
                    Incident(
                        node=node,
                        start=start,
                        duration=duration,
                        capacity_drop=incident_drop,
                    )
                ],
                seed=int(rng.integers(2**31)),
                noise_sigma=noise_sigma,
                measurement_sigma=measurement_sigma,
                name=f"incident-{r}",
            )
        )
        horizons.append(incident_horizon)
    return scenarios, horizons
