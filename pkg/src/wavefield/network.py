"""Sinusoidal neural fields for pressure p(x, y, t), in two flavors:

* ``mlp``: a plain stack of sine layers.
* ``mmlp``: the gated variant, where two encoders U, V of the input are
  blended into every hidden layer through a convex gate.

The forward pass exists twice on purpose: :func:`forward` computes values
only (cheap, used for the data-fit term and for inference), and
:func:`forward_jet` pushes second-order jets through identical arithmetic to
expose the space/time derivatives the wave-equation residual needs.  Both
run on raw numpy arrays or taped tensors.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    Jet2,
    JetBatch,
    ShapeError,
    Tape,
    Tensor,
    jet_affine,
    jet_gate,
    jet_scale,
    jet_sin,
    matmul,
    sin,
)

N_IN = 3  # input coordinates: x, y, t


@dataclass
class NetConfig:
    """Architecture and input scaling of a pressure field network.

    ``bounds`` maps the physical aperture/time window onto [-1, 1] per axis;
    derivatives reported by the jet path stay in physical units.
    ``pressure_scale`` multiplies the raw network output so targets of any
    magnitude can be fit with O(1) weights.
    """

    arch: str = "mmlp"
    width: int = 128
    depth: int = 3
    omega0: float = 15.0
    bounds: tuple = (( -1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0))
    pressure_scale: float = 1.0
    sigma_output: bool = False

    def __post_init__(self):
        if self.arch not in ("mlp", "mmlp"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(b) != N_IN or any(hi <= lo for lo, hi in b):
            raise ValueError(f"bounds must be {N_IN} (lo, hi) pairs with hi > lo")
        self.bounds = b

    def layer_names(self) -> list[str]:
        names = []
        if self.arch == "mmlp":
            names += ["w_enc_u", "b_enc_u", "w_enc_v", "b_enc_v"]
        for l in range(self.depth):
            names += [f"w{l}", f"b{l}"]
        names += ["w_out", "b_out"]
        return names

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = [list(p) for p in self.bounds]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["bounds"] = tuple(tuple(p) for p in d["bounds"])
        return cls(**d)


def init_siren(config: NetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Draw weights with the sine-network scheme: layers reading the raw
    input from U[-1/n_in, 1/n_in], deeper layers from
    U[-sqrt(6/n_in)/omega0, +sqrt(6/n_in)/omega0]; biases start at zero."""
    w = config.width
    first = 1.0 / N_IN
    deep = np.sqrt(6.0 / w) / config.omega0
    params: dict[str, np.ndarray] = {}

    def draw(bound, shape):
        return rng.uniform(-bound, bound, size=shape)

    if config.arch == "mmlp":
        params["w_enc_u"] = draw(first, (N_IN, w))
        params["b_enc_u"] = np.zeros(w)
        params["w_enc_v"] = draw(first, (N_IN, w))
        params["b_enc_v"] = np.zeros(w)
    for l in range(config.depth):
        n_in = N_IN if l == 0 else w
        bound = first if l == 0 else deep
        params[f"w{l}"] = draw(bound, (n_in, w))
        params[f"b{l}"] = np.zeros(w)
    params["w_out"] = draw(deep, (w, 1))
    params["b_out"] = np.zeros(1)
    return params


def params_to_tape(params: dict[str, np.ndarray], tape: Tape) -> dict[str, Tensor]:
    return {k: tape.param(v, name=k) for k, v in params.items()}


def axis_scales(config: NetConfig) -> np.ndarray:
    return np.array([2.0 / (hi - lo) for lo, hi in config.bounds])


def normalize_input(x: np.ndarray, config: NetConfig) -> np.ndarray:
    """Map physical (x, y, t) rows onto [-1, 1] per axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != N_IN:
        raise ShapeError(f"expected (B, {N_IN}) coordinates, got {x.shape}")
    lo = np.array([b[0] for b in config.bounds])
    hi = np.array([b[1] for b in config.bounds])
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def _affine(x, w, b):
    if isinstance(x, Tensor) or isinstance(w, Tensor):
        return matmul(x, w) + b
    return x @ (w.value if isinstance(w, Tensor) else w) + (b.value if isinstance(b, Tensor) else b)


def forward(params, config: NetConfig, x: np.ndarray):
    """Pressure values at coordinate rows ``x`` (B, 3); returns (B, 1).

    ``params`` may hold numpy arrays or taped tensors; with tensors the
    whole pass is recorded for the backward sweep.
    """
    xn = normalize_input(x, config)
    act = lambda u: sin(config.omega0 * u)
    if config.arch == "mmlp":
        enc_u = act(_affine(xn, params["w_enc_u"], params["b_enc_u"]))
        enc_v = act(_affine(xn, params["w_enc_v"], params["b_enc_v"]))
        h = xn
        for l in range(config.depth):
            z = act(_affine(h, params[f"w{l}"], params[f"b{l}"]))
            h = enc_u + z * (enc_v - enc_u)
    else:
        h = xn
        for l in range(config.depth):
            h = act(_affine(h, params[f"w{l}"], params[f"b{l}"]))
    out = _affine(h, params["w_out"], params["b_out"])
    if config.sigma_output:
        out = act(out)
    return config.pressure_scale * out


def forward_jet(params, config: NetConfig, x: np.ndarray, tape: Tape | None = None) -> JetBatch:
    """Pressure with first and second derivatives along x, y, t.

    Returns a :class:`JetBatch` whose channels have shape (B, 1) and
    (B, 3, 1); derivatives are in physical units (Pa/m, Pa/s, ...).
    """
    xn = normalize_input(x, config)
    jet = JetBatch.seed(xn, axis_scales(config), tape=tape)
    if config.arch == "mmlp":
        enc_u = jet_sin(config.omega0, jet_affine(params["w_enc_u"], params["b_enc_u"], jet))
        enc_v = jet_sin(config.omega0, jet_affine(params["w_enc_v"], params["b_enc_v"], jet))
        h = jet
        for l in range(config.depth):
            z = jet_sin(config.omega0, jet_affine(params[f"w{l}"], params[f"b{l}"], h))
            h = jet_gate(z, enc_u, enc_v)
    else:
        h = jet
        for l in range(config.depth):
            h = jet_sin(config.omega0, jet_affine(params[f"w{l}"], params[f"b{l}"], h))
    out = jet_affine(params["w_out"], params["b_out"], h)
    if config.sigma_output:
        out = jet_sin(config.omega0, out)
    return jet_scale(config.pressure_scale, out)


class NetField:
    """Callable view of a trained network: ``field(points) -> pressure``.

    Also exposes the derivative channels the physics and evaluation modules
    consume, hiding the jet plumbing.
    """

    def __init__(self, params: dict[str, np.ndarray], config: NetConfig):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.config = config
        missing = set(config.layer_names()) - set(self.params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return forward(self.params, self.config, points)[:, 0]

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """(B, 3) spatial/temporal first derivatives (∂p/∂x, ∂p/∂y, ∂p/∂t)."""
        jet = forward_jet(self.params, self.config, points)
        return np.asarray(jet.grad)[:, :, 0]

    def hessian_diag(self, points: np.ndarray) -> np.ndarray:
        jet = forward_jet(self.params, self.config, points)
        return np.asarray(jet.hdiag)[:, :, 0]

    def query(self, t: float, r) -> Jet2:
        pt = np.array([[r[0], r[1], t]])
        jet = forward_jet(self.params, self.config, pt)
        return Jet2(float(np.asarray(jet.value)[0, 0]),
                    np.asarray(jet.grad)[0, :, 0],
                    np.asarray(jet.hdiag)[0, :, 0])


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"WFPN"
_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray], config: NetConfig,
                    extra: dict | None = None) -> None:
    """Write params + config (+ small JSON-serializable ``extra`` state) to a
    single self-describing binary file with an integrity hash."""
    arrays = [(k, np.ascontiguousarray(np.asarray(v, dtype=np.float64)))
              for k, v in params.items()]
    header = {
        "config": config.to_dict(),
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = bytearray()
    blob += _MAGIC
    blob += np.uint32(_VERSION).tobytes()
    blob += np.uint64(len(hbytes)).tobytes()
    blob += hbytes
    for _, v in arrays:
        blob += v.astype("<f8").tobytes()
    blob += hashlib.sha256(bytes(blob)).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path):
    """Read a checkpoint; returns (params, config, extra).

    Raises ``ValueError`` on a wrong magic, unknown version, or a payload
    whose integrity hash does not match.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 + 8 + 32 or raw[:4] != _MAGIC:
        raise ValueError("not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ValueError("checkpoint corrupted: hash mismatch")
    version = int(np.frombuffer(raw, "<u4", count=1, offset=4)[0])
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    hlen = int(np.frombuffer(raw, "<u8", count=1, offset=8)[0])
    off = 16
    header = json.loads(raw[off:off + hlen].decode())
    off += hlen
    config = NetConfig.from_dict(header["config"])
    params = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, "<f8", count=n, offset=off).reshape(shape).copy()
        params[entry["name"]] = arr
        off += 8 * n
    if off != len(body):
        raise ValueError("checkpoint corrupted: trailing bytes")
    return params, config, header["extra"]
