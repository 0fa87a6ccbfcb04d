"""Adam training loop for the physics-informed field network.

Every iteration draws a fresh stratified collocation batch and a fresh data
batch (both deterministic in (seed, iteration)), evaluates the adaptively
weighted objective on the tape, and takes one Adam step on the network
parameters and one on the two log-scale weights.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import NumericError, Tape, absolute, mean
from .gridio import FieldGrid
from .network import (NetConfig, NetField, forward, forward_jet,
                      load_checkpoint, params_to_tape, save_checkpoint)
from .physics import (AdaptiveWeights, Medium, residual_from_hdiag,
                      sample_data, sample_lhs, weight_grads)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators, one entry per named parameter."""

    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(np.asarray(v, dtype=np.float64))
                    for k, v in params.items()},
                   {k: np.zeros_like(np.asarray(v, dtype=np.float64))
                    for k, v in params.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()},
                         self.t, self.beta1, self.beta2, self.eps)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float) -> dict:
    """One bias-corrected Adam update; mutates ``state``, returns new params.

    Zero gradients leave parameters exactly unchanged (the step counter still
    advances).  A non-finite gradient aborts with the offending parameter
    named.
    """
    if set(params) != set(grads):
        raise ValueError("params and grads must have identical keys")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape "
                             f"{p.shape} for {name!r}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = state.m[name] / c1
        vhat = state.v[name] / c2
        out[name] = p - lr * mhat / (np.sqrt(vhat) + state.eps)
    return out


# ---------------------------------------------------------------------------
# config, log, checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 20000
    lr_w: float = 1e-3           # network parameters
    lr_eps: float = 2e-3         # log-scale loss weights
    n_f: int = 1024              # collocation points per iteration
    n_d: int = 1024              # data samples per iteration
    seed: int = 0
    validation_positions: list = None   # (x, y) pairs held out of training
    checkpoint_interval: int = 1000
    log_interval: int = 100
    grad_clip: bool = False      # clip global grad norm at 1.0 when set
    eps_d0: float = 1.0
    eps_f0: float = 10.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr_w <= 0 or self.lr_eps <= 0:
            raise ValueError("learning rates must be > 0")
        if self.n_f < 1 or self.n_d < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ValueError("intervals must be >= 1")
        if self.eps_d0 <= 0 or self.eps_f0 <= 0:
            raise ValueError("initial scales must be > 0")

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        if d["validation_positions"] is not None:
            d["validation_positions"] = [list(map(float, p))
                                         for p in d["validation_positions"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


LOG_COLUMNS = ("iteration", "loss_data", "loss_pde", "val_mae",
               "eps_d", "eps_f", "wall_clock")


@dataclass
class TrainLog:
    """Loss and weight trajectory at the logging cadence."""

    rows: list = field(default_factory=list)

    def append(self, iteration, loss_data, loss_pde, val_mae, eps_d, eps_f,
               wall_clock):
        if self.rows and iteration <= self.rows[-1][0]:
            raise ValueError("iteration indices must increase")
        self.rows.append((int(iteration), float(loss_data), float(loss_pde),
                          float(val_mae), float(eps_d), float(eps_f),
                          float(wall_clock)))

    def column(self, name: str) -> np.ndarray:
        i = LOG_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write(",".join(LOG_COLUMNS) + "\n")
            for r in self.rows:
                f.write(",".join(repr(v) for v in r) + "\n")

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path) as f:
            header = f.readline().strip()
            if header != ",".join(LOG_COLUMNS):
                raise ValueError(f"unexpected log header {header!r}")
            for line in f:
                vals = line.strip().split(",")
                log.append(int(vals[0]), *map(float, vals[1:]))
        return log


@dataclass
class TrainCheckpoint:
    """Everything needed to continue training bit-exactly."""

    iteration: int
    params: dict
    weights: AdaptiveWeights
    opt_w: AdamState
    opt_s: AdamState

    def copy(self) -> "TrainCheckpoint":
        return TrainCheckpoint(self.iteration,
                               {k: v.copy() for k, v in self.params.items()},
                               replace(self.weights),
                               self.opt_w.copy(), self.opt_s.copy())


def save_train_checkpoint(path, ckpt: TrainCheckpoint, net_config: NetConfig):
    arrays = dict(ckpt.params)
    for k, v in ckpt.opt_w.m.items():
        arrays[f"adam_m/{k}"] = v
    for k, v in ckpt.opt_w.v.items():
        arrays[f"adam_v/{k}"] = v
    extra = {
        "iteration": ckpt.iteration,
        "s_d": ckpt.weights.s_d, "s_f": ckpt.weights.s_f,
        "adam_t": ckpt.opt_w.t,
        "opt_s": {"t": ckpt.opt_s.t,
                  "m": {k: float(v) for k, v in ckpt.opt_s.m.items()},
                  "v": {k: float(v) for k, v in ckpt.opt_s.v.items()}},
    }
    save_checkpoint(path, arrays, net_config, extra=extra)


def load_train_checkpoint(path):
    """Returns (TrainCheckpoint, NetConfig)."""
    arrays, config, extra = load_checkpoint(path)
    params, m, v = {}, {}, {}
    for k, arr in arrays.items():
        if k.startswith("adam_m/"):
            m[k[7:]] = arr
        elif k.startswith("adam_v/"):
            v[k[7:]] = arr
        else:
            params[k] = arr
    opt_w = AdamState(m, v, t=int(extra["adam_t"]))
    so = extra["opt_s"]
    opt_s = AdamState({k: np.float64(x) for k, x in so["m"].items()},
                      {k: np.float64(x) for k, x in so["v"].items()},
                      t=int(so["t"]))
    weights = AdaptiveWeights(float(extra["s_d"]), float(extra["s_f"]))
    return TrainCheckpoint(int(extra["iteration"]), params, weights,
                           opt_w, opt_s), config


class DivergenceError(NumericError):
    """Loss or gradient went non-finite; carries the last good state."""

    def __init__(self, message, checkpoint: TrainCheckpoint, log: "TrainLog"):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate(net, positions, data: FieldGrid, n_samples: int = 4096,
             seed: int = 0) -> float:
    """MAE of ``net`` against held-out truth at randomly sampled times.

    ``positions`` are the training positions; every position in ``data``
    must be disjoint from them (a shared position means the "held-out" point
    was trained on, which voids the metric).
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if positions.shape[0]:
        for p in data.positions:
            if np.min(np.linalg.norm(positions - p, axis=1)) < 1e-9:
                raise ValueError(
                    f"held-out position {tuple(p)} overlaps a training position")
    batch = sample_data(data, n_samples, seed)
    pred = np.asarray(net(batch.points), dtype=np.float64).reshape(-1)
    return float(np.mean(np.abs(pred - batch.targets)))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _split_validation(data: FieldGrid, val_positions):
    """Partition a grid into (training grid, validation grid or None)."""
    if not val_positions:
        return data, None
    vp = np.asarray(val_positions, dtype=np.float64).reshape(-1, 2)
    val_idx = []
    for p in vp:
        d = np.linalg.norm(data.positions - p, axis=1)
        j = int(np.argmin(d))
        if d[j] > 1e-9:
            raise ValueError(f"validation position {tuple(p)} not in the grid")
        val_idx.append(j)
    val_idx = np.array(sorted(set(val_idx)))
    train_idx = np.setdiff1d(np.arange(data.n_pos), val_idx)
    if train_idx.size == 0:
        raise ValueError("validation set swallows every position")
    return data.subset(train_idx), data.subset(val_idx)


def _iteration_rngs(seed: int, iteration: int):
    ss = np.random.SeedSequence(entropy=(seed, iteration))
    return [np.random.Generator(np.random.PCG64(c)) for c in ss.spawn(3)]


def _clip_grads(grads: dict, limit: float = 1.0):
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g) ** 2))
    norm = np.sqrt(total)
    if norm > limit:
        scale = limit / norm
        return {k: np.asarray(g) * scale for k, g in grads.items()}
    return grads


def train(net: NetField, cfg: TrainConfig, data: FieldGrid,
          medium: Medium = Medium(),
          resume: TrainCheckpoint = None):
    """Optimize the network and its loss weights against a measured grid.

    Returns (final params, TrainLog, checkpoints).  Checkpoints are full
    optimizer snapshots taken at ``cfg.checkpoint_interval`` and at the end;
    passing one back as ``resume`` continues the run bit-exactly because
    batch sampling is keyed by (seed, iteration) alone.  A non-finite loss
    or gradient raises :class:`DivergenceError` with the last good snapshot.
    """
    train_grid, val_grid = _split_validation(data, cfg.validation_positions)
    if resume is not None:
        params = {k: v.copy() for k, v in resume.params.items()}
        weights = resume.weights
        opt_w = resume.opt_w.copy()
        opt_s = resume.opt_s.copy()
        start = resume.iteration
        if start >= cfg.iterations:
            raise ValueError(f"checkpoint is already at iteration {start}")
    else:
        params = {k: np.asarray(v, dtype=np.float64).copy()
                  for k, v in net.params.items()}
        weights = AdaptiveWeights.from_eps(cfg.eps_d0, cfg.eps_f0)
        opt_w = AdamState.for_params(params)
        opt_s = AdamState.for_params({"s_d": np.float64(0), "s_f": np.float64(0)})
        start = 0
    net_cfg = net.config
    bounds = [tuple(b) for b in net_cfg.bounds]
    log = TrainLog()
    checkpoints = []
    last_good = TrainCheckpoint(start, params, weights, opt_w, opt_s).copy()
    t_start = time.perf_counter()

    for it in range(start + 1, cfg.iterations + 1):
        rng_f, rng_d, rng_v = _iteration_rngs(cfg.seed, it)
        colloc = sample_lhs(bounds, cfg.n_f, rng_f)
        batch = sample_data(train_grid, cfg.n_d, rng_d)

        tape = Tape()
        taped = params_to_tape(params, tape)
        pred = forward(taped, net_cfg, batch.points)
        l_data_t = mean(absolute(pred - batch.targets.reshape(-1, 1)))
        jet = forward_jet(taped, net_cfg, colloc.points, tape)
        res = residual_from_hdiag(jet.hdiag, medium)
        l_pde_t = mean(absolute(res))
        l_data = float(np.asarray(l_data_t.value))
        l_pde = float(np.asarray(l_pde_t.value))
        if not (np.isfinite(l_data) and np.isfinite(l_pde)):
            raise DivergenceError(
                f"non-finite loss at iteration {it} "
                f"(data={l_data}, pde={l_pde})", last_good, log)

        objective = l_data_t * weights.coeff_data() + l_pde_t * weights.coeff_pde()
        grads = tape.backward(objective)
        if cfg.grad_clip:
            grads = _clip_grads(grads)
        g_sd, g_sf = weight_grads(l_data, l_pde, weights)
        try:
            params = adam_step(opt_w, params, grads, cfg.lr_w)
            s_new = adam_step(opt_s,
                              {"s_d": np.float64(weights.s_d),
                               "s_f": np.float64(weights.s_f)},
                              {"s_d": np.float64(g_sd),
                               "s_f": np.float64(g_sf)}, cfg.lr_eps)
        except NumericError as exc:
            raise DivergenceError(f"{exc} at iteration {it}",
                                  last_good, log) from exc
        weights = AdaptiveWeights(float(s_new["s_d"]), float(s_new["s_f"]))

        if it == start + 1 or it % cfg.log_interval == 0 or it == cfg.iterations:
            if val_grid is not None:
                field = NetField(params, net_cfg)
                val_mae = validate(field, train_grid.positions, val_grid,
                                   seed=rng_v)
            else:
                val_mae = np.nan
            log.append(it, l_data, l_pde, val_mae, weights.eps_d,
                       weights.eps_f, time.perf_counter() - t_start)
        if it % cfg.checkpoint_interval == 0 or it == cfg.iterations:
            ck = TrainCheckpoint(it, params, weights, opt_w, opt_s).copy()
            checkpoints.append(ck)
            last_good = ck

    return params, log, checkpoints
