"""FedDif protocol simulator: deployment, diffusion rounds, aggregation, metrics.

Every random draw comes from a stream derived from ``(seed, purpose, ...)``,
so paired runs that differ only in mode or stop threshold see identical
data, positions, fading and mini-batch orders round by round.
"""
from __future__ import annotations

import enum
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from feddif import auction, channel, learn
from feddif.dist import (
    DiffusionChain, DistanceMetric, Dol, Dsi, dirichlet_partition, dol_update,
    iid_distance, max_distance, stratified_partition,
)

log = logging.getLogger(__name__)


class ConstraintViolation(AssertionError):
    pass


class Mode(str, enum.Enum):
    FEDDIF = "feddif"
    BASELINE = "baseline"
    FULL_DIFFUSION = "full_diffusion"


@dataclass(frozen=True)
class SimConfig:
    n_pues: int = 10
    n_models: Optional[int] = None  # defaults to n_pues
    cue_arrival_rate: float = 2.0
    alpha: float = 1.0
    epsilon: float = 0.04
    gamma_min: float = 1.0
    n_rounds: int = 30
    metric: DistanceMetric = DistanceMetric.W1L2
    mode: Mode = Mode.FEDDIF
    allow_retrain: bool = False
    exhaustive: Optional[bool] = None  # None -> exhaustive exactly when the stop threshold is 0
    radio: channel.RadioConfig = field(default_factory=channel.RadioConfig)
    hp: learn.Hyperparams = field(default_factory=learn.Hyperparams)
    model: learn.ModelSpec = field(default_factory=learn.ModelSpec)
    seed: int = 0
    max_outage: float = channel.MAX_OUTAGE
    outage_rate: Optional[float] = None  # rate term of the outage gate; None -> gamma_min
    max_diffusion_rounds: Optional[int] = None  # None -> n_pues * (n_pues - 1)
    count_bs_links: bool = False
    check_constraints: bool = True
    partition: str = "dirichlet"
    samples_per_pue: int = 30
    test_samples: int = 2000
    separation: float = 0.35
    clusters_per_class: int = 1
    dataset_path: Optional[str] = None
    test_path: Optional[str] = None
    init_scheme: str = "uniform"
    init_scale: float = 0.05
    target_accuracy: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "metric", DistanceMetric(self.metric))
        object.__setattr__(self, "mode", Mode(self.mode))
        checks = {
            "n_pues": self.n_pues >= 1,
            "n_models": self.n_models is None or 1 <= self.n_models <= self.n_pues,
            "cue_arrival_rate": self.cue_arrival_rate >= 0,
            "alpha": self.alpha > 0,
            "epsilon": self.epsilon >= 0,
            "gamma_min": self.gamma_min >= 0,
            "n_rounds": self.n_rounds >= 0,
            "max_outage": 0 <= self.max_outage <= 1,
            "outage_rate": self.outage_rate is None or self.outage_rate >= 0,
            "max_diffusion_rounds": self.max_diffusion_rounds is None or self.max_diffusion_rounds >= 0,
            "partition": self.partition in ("dirichlet", "uniform"),
            "samples_per_pue": self.samples_per_pue >= 1,
            "test_samples": self.test_samples >= 1,
            "separation": self.separation > 0,
            "clusters_per_class": self.clusters_per_class >= 1,
            "init_scale": self.init_scale >= 0,
            "target_accuracy": self.target_accuracy is None or 0 <= self.target_accuracy <= 1,
        }
        for key, ok in checks.items():
            if not ok:
                raise ValueError(f"invalid value for {key}: {getattr(self, key)!r}")

    @property
    def effective_epsilon(self) -> float:
        return 0.0 if self.mode is Mode.FULL_DIFFUSION else self.epsilon

    @property
    def is_exhaustive(self) -> bool:
        """Full diffusion: every model keeps moving until no eligible PUE is left.

        The non-negative-decrement rule and the distance halt are both off.
        """
        if self.exhaustive is not None:
            return self.exhaustive
        return self.effective_epsilon == 0

    @property
    def models(self) -> int:
        return self.n_models or self.n_pues

    @property
    def diffusion_cap(self) -> int:
        if self.max_diffusion_rounds is not None:
            return self.max_diffusion_rounds
        return self.n_pues * (self.n_pues - 1)

    def rules(self, model_bits: int) -> auction.AuctionRules:
        rate = self.gamma_min if self.outage_rate is None else self.outage_rate
        return auction.AuctionRules(
            model_bits=model_bits,
            gamma_min=self.gamma_min,
            rate_product=rate,
            max_outage=self.max_outage,
            allow_retrain=self.allow_retrain,
            enforce_decrement=not self.is_exhaustive,
            # Larger than any decrease in distance, so shifted weights stay positive.
            valuation_offset=2 * max_distance(self.model.n_classes, self.metric),
        )


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    diffusion_rounds: int
    subframes: int
    models_transmitted: int
    subframes_cum: int
    models_cum: int
    mean_iid_distance: float
    weight_divergence: float
    n_cues: int = 0


@dataclass(frozen=True)
class Transmission:
    round: int
    diffusion_round: int
    model_id: int
    src: int
    dst: int
    valuation: float
    weight: float
    second_price: float
    resource: float
    subframes: int
    spectral_eff: float
    outage: float


@dataclass
class RoundDetail:
    models: list
    transmissions: list
    mean_iid_history: list
    stalled: bool


@dataclass
class World:
    """Per-experiment fixtures that do not change across rounds."""

    cfg: SimConfig
    train: learn.Dataset
    test: learn.Dataset
    parts: list
    dsis: list
    pue_data: list
    init: learn.ModelParams
    oracle: list  # centralized reference after each round, index 0 = init


@dataclass
class SimState:
    world: World
    global_params: learn.ModelParams
    t: int = 0
    subframes_cum: int = 0
    models_cum: int = 0
    constraint_checks: int = 0
    history: list = field(default_factory=list)
    last_round: Optional[RoundDetail] = None


# ------------------------------------------------------------ RNG streams

def rng_for(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    tag = zlib.crc32(purpose.encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, *map(int, keys)]))


# -------------------------------------------------------------- deployment

def sample_disk(n: int, radius: float, rng) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(0.0, 1.0, n))
    theta = rng.uniform(0.0, 2 * math.pi, n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def deploy_users(cfg: SimConfig, rng):
    """PUE and CUE positions, uniform in the cell; CUE count is Poisson."""
    pues = sample_disk(cfg.n_pues, cfg.radio.cell_radius, rng)
    n_cues = int(rng.poisson(cfg.cue_arrival_rate))
    cues = sample_disk(n_cues, cfg.radio.cell_radius, rng)
    return pues, cues


def pairwise_distances(pos: np.ndarray) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


# ------------------------------------------------------------------ setup

def build_world(cfg: SimConfig) -> World:
    spec = cfg.model
    if cfg.dataset_path:
        train = learn.load_dataset(cfg.dataset_path, spec.n_classes)
        if cfg.test_path:
            test = learn.load_dataset(cfg.test_path, spec.n_classes)
        else:
            test = train
    else:
        rng = rng_for(cfg.seed, "data")
        total = cfg.n_pues * cfg.samples_per_pue
        centres = learn.gaussian_centres(spec.n_features, spec.n_classes, rng,
                                         cfg.separation, cfg.clusters_per_class)
        train = learn.sample_mixture(centres, math.ceil(total / spec.n_classes), rng)
        test = learn.sample_mixture(centres, math.ceil(cfg.test_samples / spec.n_classes), rng)
    if train.n_features != spec.n_features:
        raise ValueError(
            f"dataset has {train.n_features} features but model.n_features = {spec.n_features}"
        )
    if cfg.partition == "uniform":
        split = stratified_partition(train.y, cfg.n_pues, spec.n_classes)
    else:
        split = dirichlet_partition(train.y, cfg.n_pues, cfg.alpha,
                                    rng_for(cfg.seed, "partition"), spec.n_classes)
    parts = [p for p, _ in split]
    dsis = [d for _, d in split]
    init = learn.init_params(spec, rng_for(cfg.seed, "init"), cfg.init_scheme, cfg.init_scale)
    oracle = [init]
    for t in range(1, cfg.n_rounds + 1):
        oracle.append(learn.centralized_oracle(
            oracle[-1], train, cfg.hp, cfg.hp.local_epochs, rng_for(cfg.seed, "oracle", t)))
    return World(cfg, train, test, parts, dsis, [train.subset(p) for p in parts], init, oracle)


def init_state(cfg: SimConfig, world: Optional[World] = None) -> SimState:
    world = world or build_world(cfg)
    return SimState(world=world, global_params=world.init)


# --------------------------------------------------------------- protocol

def local_update(model: learn.LocalModel, pue: int, world: World, t: int, k: int,
                 model_id: int) -> None:
    cfg = world.cfg
    rng = rng_for(cfg.seed, "train", t, k, model_id)
    model.params = learn.local_train(model.params, world.pue_data[pue], cfg.hp, rng, round_index=t)
    model.chain.append(pue, world.dsis[pue].data_size)
    model.dol = dol_update(model.dol, world.dsis[pue])
    model.holder = pue


def check_stop(models, epsilon: float, metric=DistanceMetric.W1L2, had_winners: bool = True) -> bool:
    """Halt when every model is within ``epsilon`` of IID, or nothing moved."""
    if not had_winners:
        return True
    return all(iid_distance(m.dol, metric) <= epsilon for m in models)


def verify_constraints(bids, chains, awards, links_ok, budget: float,
                       rules: auction.AuctionRules, dols, dsis, metric) -> None:
    """Independent re-check of every scheduled transmission in a diffusion round."""
    row_of = {b.model_id: r for r, b in enumerate(bids)}
    receivers = [a.pue_id for a in awards]
    if len(set(receivers)) != len(receivers):
        raise ConstraintViolation("a PUE was assigned more than one model")
    if len({a.model_id for a in awards}) != len(awards):
        raise ConstraintViolation("a model was assigned more than one PUE")
    spent = 0.0
    for a in awards:
        r = row_of[a.model_id]
        v = auction.valuation(dols[r], dsis[a.pue_id], metric)
        if rules.enforce_decrement and v < 0:
            raise ConstraintViolation(f"model {a.model_id}: negative decrement {v}")
        if not rules.allow_retrain and a.pue_id in chains[r]:
            raise ConstraintViolation(f"model {a.model_id}: PUE {a.pue_id} retrains it")
        link = bids[r].link_states[a.pue_id]
        if link.spectral_eff < rules.gamma_min:
            raise ConstraintViolation(f"model {a.model_id}: link below gamma_min")
        if channel.outage_probability(rules.rate_product, link.snr) > rules.max_outage:
            raise ConstraintViolation(f"model {a.model_id}: outage above {rules.max_outage}")
        if not links_ok(r, a.pue_id):
            raise ConstraintViolation(f"model {a.model_id}: link failed the QoS gate")
        spent += a.resource
    if spent > budget * (1 + 1e-12):
        raise ConstraintViolation(f"bandwidth {spent} exceeds budget {budget}")


def _bs_link_cost(world: World, pues_pos, t: int, tag: str, model_bits: int):
    """Sub-frames for moving every model between the BS and its holder PUE."""
    cfg = world.cfg
    rng = rng_for(cfg.seed, tag, t)
    h = channel.sample_fading(rng, cfg.n_pues)
    frames = 0
    for pue in range(cfg.models):
        link = channel.make_link(float(np.linalg.norm(pues_pos[pue])), h[pue], cfg.radio)
        if link.spectral_eff <= 0:
            continue
        res = channel.required_resource(model_bits, link.spectral_eff)
        frames += channel.subframe_count(res, cfg.radio.link_bandwidth, cfg.radio)
    return frames


def run_communication_round(state: SimState, cfg: Optional[SimConfig] = None):
    """One communication round: broadcast, local training, diffusion, FedAvg."""
    world = state.world
    cfg = cfg or world.cfg
    t = state.t + 1
    metric = cfg.metric
    eps = cfg.effective_epsilon
    spec = cfg.model
    pos, cues = deploy_users(cfg, rng_for(cfg.seed, "deploy", t))
    dist = pairwise_distances(pos)
    budget = cfg.radio.round_budget(len(cues))
    model_bits = state.global_params.bit_size
    rules = cfg.rules(model_bits)

    models = [
        learn.LocalModel(state.global_params, Dol.empty(spec.n_classes), DiffusionChain(), m)
        for m in range(cfg.models)
    ]
    subframes = 0
    sent = 0
    if cfg.count_bs_links:
        subframes += _bs_link_cost(world, pos, t, "downlink", model_bits)
        sent += cfg.models
    for m, model in enumerate(models):
        local_update(model, m, world, t, 0, m)

    transmissions = []
    history = [float(np.mean([iid_distance(m.dol, metric) for m in models]))]
    diffusion_rounds = 0
    stalled = False
    k = 0
    if cfg.mode is not Mode.BASELINE:
        exhaustive = cfg.is_exhaustive
        while k < cfg.diffusion_cap:
            if not exhaustive and check_stop(models, eps, metric):
                break
            k += 1
            h = channel.sample_fading(rng_for(cfg.seed, "fading", t, k), (cfg.n_pues, cfg.n_pues))
            active = [m for m, model in enumerate(models)
                      if exhaustive or iid_distance(model.dol, metric) > eps]
            bids, chains, dols, link_rows = [], [], [], []
            for m in active:
                src = models[m].holder
                links = [channel.make_link(dist[src, j], h[src, j], cfg.radio)
                         for j in range(cfg.n_pues)]
                bids.append(auction.make_bid(m, src, models[m].dol, world.dsis, links, metric))
                chains.append(models[m].chain)
                dols.append(models[m].dol)
            _, _, awards = auction.select_winners(bids, chains, budget, rules)
            if cfg.check_constraints:
                def links_ok(r, i):
                    return channel.gate_link(bids[r].link_states[i], rules.gamma_min,
                                             rules.rate_product, rules.max_outage)
                verify_constraints(bids, chains, awards, links_ok, budget, rules,
                                   dols, world.dsis, metric)
                state.constraint_checks += 1
            if not awards:
                stalled = True
                break
            diffusion_rounds += 1
            for a in awards:
                model = models[a.model_id]
                link = bids[active.index(a.model_id)].link_states[a.pue_id]
                frames = channel.subframe_count(a.resource, cfg.radio.link_bandwidth, cfg.radio)
                transmissions.append(Transmission(
                    t, k, a.model_id, model.holder, a.pue_id, a.valuation, a.weight,
                    a.second_price, a.resource, frames, link.spectral_eff,
                    channel.outage_probability(rules.rate_product, link.snr),
                ))
                subframes += frames
                sent += 1
                local_update(model, a.pue_id, world, t, k, a.model_id)
            history.append(float(np.mean([iid_distance(m.dol, metric) for m in models])))
    if cfg.count_bs_links:
        subframes += _bs_link_cost(world, pos, t, "uplink", model_bits)
        sent += cfg.models

    new_global = learn.fedavg(models)
    state.t = t
    state.global_params = new_global
    state.subframes_cum += subframes
    state.models_cum += sent
    oracle = world.oracle[t] if t < len(world.oracle) else world.oracle[-1]
    metrics = RoundMetrics(
        round=t,
        test_accuracy=learn.evaluate(new_global, world.test),
        diffusion_rounds=diffusion_rounds,
        subframes=subframes,
        models_transmitted=sent,
        subframes_cum=state.subframes_cum,
        models_cum=state.models_cum,
        mean_iid_distance=history[-1],
        weight_divergence=learn.weight_divergence(new_global, oracle),
        n_cues=len(cues),
    )
    state.history.append(metrics)
    state.last_round = RoundDetail(models, transmissions, history, stalled)
    log.debug("round %d: acc=%.4f K=%d sent=%d", t, metrics.test_accuracy,
              diffusion_rounds, sent)
    return new_global, metrics


# ------------------------------------------------------------- experiments

@dataclass
class ExperimentResult:
    config: SimConfig
    metrics: list
    summary: dict
    details: list = field(default_factory=list)


def cost_to_target(metrics, target: Optional[float]) -> dict:
    """First round reaching ``target`` and the cumulative cost spent by then."""
    out = {"target_accuracy": target, "rounds_to_target": None,
           "subframes_to_target": None, "models_to_target": None}
    if target is None:
        return out
    for m in metrics:
        if m.test_accuracy >= target:
            out.update(rounds_to_target=m.round, subframes_to_target=m.subframes_cum,
                       models_to_target=m.models_cum)
            break
    return out


def summarize(metrics, target: Optional[float] = None) -> dict:
    if metrics:
        peak = max(metrics, key=lambda m: (m.test_accuracy, -m.round))
        summary = {
            "peak_accuracy": peak.test_accuracy,
            "peak_round": peak.round,
            "final_accuracy": metrics[-1].test_accuracy,
            "final_weight_divergence": metrics[-1].weight_divergence,
            "total_diffusion_rounds": sum(m.diffusion_rounds for m in metrics),
            "total_subframes": metrics[-1].subframes_cum,
            "total_models": metrics[-1].models_cum,
        }
    else:
        summary = {"peak_accuracy": None, "peak_round": None, "final_accuracy": None,
                   "final_weight_divergence": None, "total_diffusion_rounds": 0,
                   "total_subframes": 0, "total_models": 0}
    summary.update(cost_to_target(metrics, target))
    return summary


def run_experiment(cfg: SimConfig, target_accuracy: Optional[float] = None,
                   keep_details: bool = False, world: Optional[World] = None) -> ExperimentResult:
    state = init_state(cfg, world)
    details = []
    for _ in range(cfg.n_rounds):
        run_communication_round(state, cfg)
        if keep_details:
            details.append(state.last_round)
    target = target_accuracy if target_accuracy is not None else cfg.target_accuracy
    return ExperimentResult(cfg, state.history, summarize(state.history, target), details)


def replay_dol(chain: DiffusionChain, dsis, n_classes: int) -> Dol:
    dol = Dol.empty(n_classes)
    for pue in chain.members:
        dol = dol_update(dol, dsis[pue])
    return dol
