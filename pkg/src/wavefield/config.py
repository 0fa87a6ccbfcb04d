"""One structured document that drives every command.

Parsing is strict: a key that does not name a known field fails loudly with
its dotted path instead of silently falling back to a default, and every run
records the hash of its fully resolved configuration so results can be traced
back to exact settings.  Files are YAML (JSON being a YAML subset, both
load); ``section.key=value`` override strings patch the document before
validation, with values read as YAML scalars.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, field as dc_field

import numpy as np
import yaml

from .network import NetConfig
from .physics import Medium
from .training import TrainConfig


class ConfigError(ValueError):
    """Configuration document is malformed or contains unknown keys."""


# ---------------------------------------------------------------------------
# sections
# ---------------------------------------------------------------------------

@dataclass
class PulseSpec:
    """One plane-wave Gaussian-pulse component of a synthesized field."""

    theta: float = 0.0
    f_c: float = 300.0
    t_peak: float = 0.0
    amplitude: float = 1.0
    sigma: float = None
    phase: float = 0.0


@dataclass
class RoomSpecSection:
    """Mirror-image room model settings.

    ``beta`` is a single wall reflection coefficient applied to all six
    surfaces, or three (low-wall, high-wall) pairs.  ``drive_f_c``, when set,
    excites the room with a Gaussian pulse instead of an ideal impulse.
    """

    dimensions: tuple = (6.12, 5.77, 3.07)
    beta: object = 0.35
    source: tuple = (1.0, 1.0, 1.0)
    max_order: int = 3
    drive_f_c: float = None
    drive_t_peak: float = 0.0

    def beta_pairs(self) -> tuple:
        b = self.beta
        if np.isscalar(b):
            return ((b, b), (b, b), (b, b))
        pairs = tuple(tuple(float(x) for x in p) for p in b)
        if len(pairs) != 3 or any(len(p) != 2 for p in pairs):
            raise ConfigError("field.room.beta must be a scalar or 3 (lo, hi) pairs")
        return pairs


@dataclass
class FieldSection:
    """What sound field to synthesize: exact pulses or a simulated room."""

    kind: str = "pulses"
    pulses: list = dc_field(default_factory=lambda: [
        PulseSpec(theta=0.7, f_c=200.0, t_peak=0.012),
        PulseSpec(theta=2.4, f_c=150.0, t_peak=0.022),
        PulseSpec(theta=4.6, f_c=250.0, t_peak=0.032),
    ])
    room: RoomSpecSection = dc_field(default_factory=RoomSpecSection)

    def __post_init__(self):
        if self.kind not in ("pulses", "room"):
            raise ConfigError(f"field.kind must be 'pulses' or 'room', got {self.kind!r}")
        if self.kind == "pulses" and not self.pulses:
            raise ConfigError("field.pulses must list at least one component")


@dataclass
class GridSection:
    """Receiver plane geometry and sampling, plus the training subset rule.

    ``stride`` keeps every stride-th point along both axes; ``count`` draws
    that many positions at random (seeded).  At most one may be set; with
    neither, the training subset is the full grid.
    """

    nx: int = 30
    ny: int = 30
    extent: tuple = ((-0.4, 0.4), (-0.4, 0.4))
    z: float = 0.0
    fs: float = 2000.0
    duration: float = 0.05
    t0: float = 0.0
    stride: int = 3
    count: int = None

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ConfigError("grid.nx and grid.ny must be >= 1")
        if self.fs <= 0 or self.duration <= 0:
            raise ConfigError("grid.fs and grid.duration must be > 0")
        ext = tuple(tuple(float(v) for v in pair) for pair in self.extent)
        if len(ext) != 2 or any(len(p) != 2 or p[1] < p[0] for p in ext):
            raise ConfigError("grid.extent must be ((x0, x1), (y0, y1)) with hi >= lo")
        self.extent = ext
        if self.stride is not None and self.count is not None:
            raise ConfigError("grid.stride and grid.count are mutually exclusive")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("grid.stride must be >= 1")
        if self.count is not None and self.count < 1:
            raise ConfigError("grid.count must be >= 1")

    def positions(self) -> np.ndarray:
        """(nx*ny, 2) plane positions, row-major with x fastest."""
        gx = np.linspace(self.extent[0][0], self.extent[0][1], self.nx)
        gy = np.linspace(self.extent[1][0], self.extent[1][1], self.ny)
        xx, yy = np.meshgrid(gx, gy)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def times(self) -> np.ndarray:
        n = int(round(self.duration * self.fs))
        return self.t0 + np.arange(n) / self.fs


@dataclass
class BaselineSection:
    """Sparse-regression baseline settings shared by both methods."""

    method: str = "pw-rls"
    lam: float = 1e-3
    max_iter: int = 500
    tol: float = 1e-9
    solver: str = "fista-lasso"
    debias: bool = False
    directions: int = 64
    freq_range: tuple = (30.0, 1000.0)
    sources: int = 512
    radius_factor: float = 2.0

    def __post_init__(self):
        if self.method not in ("td-laplace", "pw-rls"):
            raise ConfigError(f"baseline.method must be 'td-laplace' or 'pw-rls', "
                              f"got {self.method!r}")
        if self.directions < 1 or self.sources < 1:
            raise ConfigError("baseline.directions and baseline.sources must be >= 1")
        self.freq_range = tuple(float(v) for v in self.freq_range)
        if len(self.freq_range) != 2:
            raise ConfigError("baseline.freq_range must be (lo_hz, hi_hz)")


@dataclass
class MetricsSection:
    window: float = 1.8e-3       # snapshot window length, seconds
    hop: float = 0.9e-3          # 50 percent overlap by default
    distance_bins: int = 5

    def __post_init__(self):
        if self.window <= 0 or self.hop <= 0:
            raise ConfigError("metrics.window and metrics.hop must be > 0")
        if self.distance_bins < 1:
            raise ConfigError("metrics.distance_bins must be >= 1")


@dataclass
class RunConfig:
    """Resolved settings for a full synth/train/reconstruct/evaluate run."""

    seed: int = 0
    out_dir: str = "runs"
    net: NetConfig = dc_field(default_factory=NetConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    medium: Medium = dc_field(default_factory=Medium)
    field: FieldSection = dc_field(default_factory=FieldSection)
    grid: GridSection = dc_field(default_factory=GridSection)
    baseline: BaselineSection = dc_field(default_factory=BaselineSection)
    metrics: MetricsSection = dc_field(default_factory=MetricsSection)


# ---------------------------------------------------------------------------
# strict construction
# ---------------------------------------------------------------------------

_PAIR_TUPLE_FIELDS = {
    NetConfig: ("bounds",),
    GridSection: ("extent",),
    RoomSpecSection: ("dimensions", "source"),
    BaselineSection: ("freq_range",),
}


def _check_keys(doc: dict, cls, path: str):
    known = {f.name for f in fields(cls)}
    for key in doc:
        full = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(f"unknown config key {full!r}")


def _build_section(cls, doc, path: str):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {path!r} must be a mapping")
    _check_keys(doc, cls, path)
    doc = dict(doc)
    for name in _PAIR_TUPLE_FIELDS.get(cls, ()):
        if doc.get(name) is not None:
            try:
                doc[name] = tuple(tuple(pair) if isinstance(pair, (list, tuple))
                                  else pair for pair in doc[name])
            except TypeError:
                raise ConfigError(f"config key {path}.{name} has the wrong shape")
    try:
        return cls(**doc)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config section {path!r}: {exc}")


def _build_field_section(doc) -> FieldSection:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config section 'field' must be a mapping")
    _check_keys(doc, FieldSection, "field")
    out = {}
    if "kind" in doc:
        out["kind"] = doc["kind"]
    if doc.get("pulses") is not None:
        if not isinstance(doc["pulses"], list):
            raise ConfigError("field.pulses must be a list of pulse mappings")
        out["pulses"] = [_build_section(PulseSpec, p, f"field.pulses[{i}]")
                         for i, p in enumerate(doc["pulses"])]
    if doc.get("room") is not None:
        out["room"] = _build_section(RoomSpecSection, doc["room"], "field.room")
    try:
        return FieldSection(**out)
    except ConfigError:
        raise


def build_config(doc) -> RunConfig:
    """Construct a validated RunConfig from a plain mapping (strict keys)."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("top-level config must be a mapping")
    _check_keys(doc, RunConfig, "")
    sections = {
        "net": lambda d: _build_section(NetConfig, d, "net"),
        "train": lambda d: _build_section(TrainConfig, d, "train"),
        "medium": lambda d: _build_section(Medium, d, "medium"),
        "field": _build_field_section,
        "grid": lambda d: _build_section(GridSection, d, "grid"),
        "baseline": lambda d: _build_section(BaselineSection, d, "baseline"),
        "metrics": lambda d: _build_section(MetricsSection, d, "metrics"),
    }
    kwargs = {name: build(doc.get(name)) for name, build in sections.items()}
    if "seed" in doc:
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = doc["seed"]
    if "out_dir" in doc:
        kwargs["out_dir"] = str(doc["out_dir"])
    return RunConfig(**kwargs)


def load_config(path) -> dict:
    """Read a YAML or JSON config document as a plain mapping."""
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}")
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top-level config must be a mapping")
    return doc


def apply_overrides(doc: dict, assignments) -> dict:
    """Patch ``doc`` in place with dotted ``section.key=value`` strings.

    Values are parsed as YAML scalars, so numbers, booleans, lists, and
    inline mappings all work.  Unknown keys surface later in build_config.
    """
    for item in assignments:
        key, sep, raw = str(item).partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}")
        if isinstance(value, str):
            # the YAML 1.1 resolver misses dotless scientific notation (5e-4)
            try:
                value = float(value)
            except ValueError:
                pass
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r} descends through non-mapping {part!r}")
            node = nxt
        node[parts[-1]] = value
    return doc


# ---------------------------------------------------------------------------
# resolved form and hash
# ---------------------------------------------------------------------------

def _plainify(obj):
    if isinstance(obj, dict):
        return {str(k): _plainify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plainify(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _plainify(getattr(obj, f.name))
                for f in fields(obj)}
    return obj


def resolved_dict(cfg: RunConfig) -> dict:
    """The full configuration with every default filled in, as plain JSON
    types (the document that the config hash is computed over)."""
    return _plainify(cfg)


def config_hash(cfg: RunConfig) -> str:
    """Short stable digest of the resolved configuration."""
    blob = json.dumps(resolved_dict(cfg), sort_keys=True,
                      separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# derived settings
# ---------------------------------------------------------------------------

def derive_bounds(grid) -> tuple:
    """Network input bounds covering a measured grid's aperture and window.

    Degenerate axes (single receiver line or point) are padded so the
    normalization stays well defined.
    """
    lo = grid.positions.min(axis=0)
    hi = grid.positions.max(axis=0)
    pairs = []
    for axis in range(2):
        a, b = float(lo[axis]), float(hi[axis])
        if b - a < 1e-9:
            a, b = a - 0.1, b + 0.1
        pairs.append((a, b))
    pairs.append((float(grid.t0), float(grid.t0 + grid.duration)))
    return tuple(pairs)


def subset_indices(grid: GridSection, rng=None) -> np.ndarray:
    """Training-subset indices into the row-major position list."""
    from .gridio import stride_subset_indices

    n = grid.nx * grid.ny
    if grid.count is not None:
        if grid.count > n:
            raise ConfigError(f"grid.count {grid.count} exceeds {n} grid positions")
        rng = np.random.default_rng(rng)
        return np.sort(rng.choice(n, size=grid.count, replace=False))
    if grid.stride is not None:
        return stride_subset_indices(grid.nx, grid.ny, grid.stride)
    return np.arange(n)
