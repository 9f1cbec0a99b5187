"""Recurrent backbone, cultivar embedding and output heads.

Layout per day::

    [embed(cultivar), W_t] -> linear+relu -> linear+relu -> GRU
        -> linear+relu -> linear -> head

The ``dmc`` head applies ``tanh`` (normalized biophysical parameters), the
``regression`` head is a bare scalar and ``classification`` emits logits.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

HEADS = ("dmc", "regression", "classification")

SCALES = {"full": 1.0, "desk": 1.0 / 8.0}

# widths at full scale
_DMC_WIDTHS = ((256, 512), 1024, (512, 256))
_DL_WIDTHS = ((512, 1024), 2048, (1024, 512))


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int
    out_dim: int
    head: str = "dmc"
    n_cultivars: int = 0
    embed_dim: int = 0
    pre_widths: tuple[int, int] = (32, 64)
    gru_hidden: int = 128
    post_widths: tuple[int, int] = (64, 32)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.n_cultivars and not self.embed_dim:
            raise ValueError("multi-task config needs embed_dim > 0")

    @property
    def multitask(self) -> bool:
        return self.n_cultivars > 0

    @classmethod
    def build(cls, head: str, input_dim: int, out_dim: int, n_cultivars: int = 0,
              scale: str | float = "desk") -> "BackboneConfig":
        """Full-scale widths times the scale multiplier; DMC heads use the smaller GRU."""
        mult = SCALES[scale] if isinstance(scale, str) else float(scale)
        pre, gru, post = _DMC_WIDTHS if head == "dmc" else _DL_WIDTHS
        w = lambda n: max(1, int(round(n * mult)))
        return cls(input_dim=input_dim, out_dim=out_dim, head=head,
                   n_cultivars=n_cultivars, embed_dim=input_dim if n_cultivars else 0,
                   pre_widths=(w(pre[0]), w(pre[1])), gru_hidden=w(gru),
                   post_widths=(w(post[0]), w(post[1])))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["pre_widths"] = tuple(d["pre_widths"])
        d["post_widths"] = tuple(d["post_widths"])
        return cls(**d)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        H = self.gru_hidden
        p0, p1 = self.pre_widths
        q0, q1 = self.post_widths
        shapes: dict[str, tuple[int, ...]] = {}
        if self.multitask:
            shapes["embedding"] = (self.n_cultivars, self.embed_dim)
        shapes.update({
            "pre0.W": (self.embed_dim + self.input_dim, p0), "pre0.b": (p0,),
            "pre1.W": (p0, p1), "pre1.b": (p1,),
            "gru.Wx": (p1, 3 * H), "gru.Wh": (H, 3 * H), "gru.b": (3 * H,),
            "post0.W": (H, q0), "post0.b": (q0,),
            "post1.W": (q0, q1), "post1.b": (q1,),
            "head.W": (q1, self.out_dim), "head.b": (self.out_dim,),
        })
        return shapes


class NetworkWeights:
    """Named weight tensors for one :class:`BackboneConfig`."""

    def __init__(self, config: BackboneConfig, tensors: dict[str, Tensor]):
        expected = config.shapes()
        if set(tensors) != set(expected):
            raise ValueError(f"weight names {sorted(tensors)} != {sorted(expected)}")
        for name, shape in expected.items():
            if tensors[name].value.shape != shape:
                raise ValueError(f"{name}: shape {tensors[name].value.shape} != {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.tensors.items()}

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.config, {k: Tensor(t.value.copy(), requires_grad=True)
                                            for k, t in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([t.value.ravel() for t in self.tensors.values()])

    def digest(self) -> str:
        return hashlib.sha256(self.flat().astype("<f8").tobytes()).hexdigest()

    # checkpoint format: <stem>.bin holds little-endian float64 values in
    # manifest order, <stem>.json holds the config and per-tensor shapes.
    def save(self, path) -> None:
        path = Path(path)
        manifest = {
            "format": "dmcmtl-weights-v1",
            "config": self.config.to_dict(),
            "tensors": [{"name": k, "shape": list(t.value.shape)} for k, t in self.tensors.items()],
            "sha256": self.digest(),
        }
        _atomic_write(path.with_suffix(".bin"), self.flat().astype("<f8").tobytes())
        _atomic_write(path.with_suffix(".json"),
                      (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())

    @classmethod
    def load(cls, path) -> "NetworkWeights":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
        tensors, offset = {}, 0
        for entry in manifest["tensors"]:
            n = int(np.prod(entry["shape"], dtype=np.int64))
            tensors[entry["name"]] = Tensor(flat[offset:offset + n].reshape(entry["shape"]).copy(),
                                            requires_grad=True)
            offset += n
        if offset != flat.size:
            raise ValueError(f"{path}: manifest covers {offset} values, file has {flat.size}")
        return cls(BackboneConfig.from_dict(manifest["config"]), tensors)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def init_weights(config: BackboneConfig, seed: int) -> NetworkWeights:
    """Uniform fan-based weights, zero biases, embedding in U(-0.1, 0.1)."""
    rng = np.random.default_rng(seed)
    H = config.gru_hidden
    tensors = {}
    for name, shape in config.shapes().items():
        if name == "embedding":
            value = rng.uniform(-0.1, 0.1, shape)
        elif name.endswith(".b"):
            value = np.zeros(shape)
        elif name in ("gru.Wx", "gru.Wh"):
            # each gate block maps [x, h] -> H
            a = np.sqrt(6.0 / (config.shapes()["gru.Wx"][0] + H + H))
            value = rng.uniform(-a, a, shape)
        else:
            a = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-a, a, shape)
        tensors[name] = Tensor(value, requires_grad=True)
    return NetworkWeights(config, tensors)


def gru_cell(x, h, Wx, Wh, b) -> Tensor:
    """Standard GRU update with gates ordered ``[z, r, candidate]``."""
    x, h = ad.as_tensor(x), ad.as_tensor(h)
    H = h.value.shape[-1]
    if Wh.value.shape != (H, 3 * H) or Wx.value.shape[0] != x.value.shape[-1]:
        raise ValueError("GRU dimension mismatch")
    return _gru_update(ad.add(ad.matmul(x, Wx), b), h, Wh[:, :2 * H], Wh[:, 2 * H:])


def _gru_update(xproj: Tensor, h: Tensor, Wh_zr: Tensor, Wh_c: Tensor) -> Tensor:
    H = h.value.shape[-1]
    zr = ad.sigmoid(ad.add(xproj[:2 * H], ad.matmul(h, Wh_zr)))
    z, r = zr[:H], zr[H:]
    cand = ad.tanh(ad.add(xproj[2 * H:], ad.matmul(ad.mul(r, h), Wh_c)))
    return ad.add(h, ad.mul(z, ad.sub(cand, h)))


def embed_cultivar(cultivar_id: int, weights: NetworkWeights) -> Tensor:
    n = weights.config.n_cultivars
    if not weights.config.multitask:
        raise ValueError("single-task network has no embedding")
    if not 0 <= int(cultivar_id) < n:
        raise KeyError(f"unknown cultivar id {cultivar_id} (have {n})")
    return weights["embedding"][int(cultivar_id)]


def _input_bias(cultivar_id, weights: NetworkWeights) -> Tensor:
    """First-layer bias plus the embedding's contribution, shared by every day."""
    cfg = weights.config
    if not cfg.multitask:
        return weights["pre0.b"]
    W_e = weights["pre0.W"][:cfg.embed_dim]
    return ad.add(ad.matmul(embed_cultivar(cultivar_id, weights), W_e), weights["pre0.b"])


def _apply_head(out: Tensor, head: str) -> Tensor:
    if head == "dmc":
        return ad.tanh(out)
    return out


def _check_finite(t: Tensor, where: str) -> None:
    if not np.all(np.isfinite(t.value)):
        raise FloatingPointError(f"non-finite activation at {where}")


def _post_layers(h: Tensor, weights: NetworkWeights) -> Tensor:
    y = ad.relu(ad.add(ad.matmul(h, weights["post0.W"]), weights["post0.b"]))
    y = ad.add(ad.matmul(y, weights["post1.W"]), weights["post1.b"])
    return ad.add(ad.matmul(y, weights["head.W"]), weights["head.b"])


def initial_hidden(weights: NetworkWeights) -> Tensor:
    return Tensor(np.zeros(weights.config.gru_hidden))


def forward_day(w_t, cultivar_id, h: Tensor, weights: NetworkWeights) -> tuple[Tensor, Tensor]:
    """One causal step: returns ``(head output, new hidden state)``."""
    cfg = weights.config
    w_t = ad.as_tensor(w_t)
    if w_t.value.shape != (cfg.input_dim,):
        raise ValueError(f"weather vector has shape {w_t.value.shape}, expected ({cfg.input_dim},)")
    W_x = weights["pre0.W"][cfg.embed_dim:] if cfg.multitask else weights["pre0.W"]
    a = ad.relu(ad.add(ad.matmul(w_t, W_x), _input_bias(cultivar_id, weights)))
    a = ad.relu(ad.add(ad.matmul(a, weights["pre1.W"]), weights["pre1.b"]))
    h = gru_cell(a, h, weights["gru.Wx"], weights["gru.Wh"], weights["gru.b"])
    out = _apply_head(_post_layers(h, weights), cfg.head)
    _check_finite(out, "forward_day")
    return out, h


def forward_season(weather, cultivar_id, weights: NetworkWeights) -> Tensor:
    """Run a whole season; returns ``(T, out_dim)`` head outputs.

    Equivalent to looping :func:`forward_day` from a zero hidden state, but
    the non-recurrent layers are applied to all days at once.
    """
    cfg = weights.config
    X = np.asarray(weather, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ValueError(f"weather matrix has shape {X.shape}, expected (T, {cfg.input_dim})")
    H = cfg.gru_hidden
    W_x = weights["pre0.W"][cfg.embed_dim:] if cfg.multitask else weights["pre0.W"]
    a = ad.relu(ad.add(ad.matmul(X, W_x), _input_bias(cultivar_id, weights)))
    a = ad.relu(ad.add(ad.matmul(a, weights["pre1.W"]), weights["pre1.b"]))
    xproj = ad.add(ad.matmul(a, weights["gru.Wx"]), weights["gru.b"])
    Wh = weights["gru.Wh"]
    Wh_zr, Wh_c = Wh[:, :2 * H], Wh[:, 2 * H:]
    h = initial_hidden(weights)
    hs = []
    for t in range(X.shape[0]):
        h = _gru_update(xproj[t], h, Wh_zr, Wh_c)
        hs.append(h)
    out = _apply_head(_post_layers(ad.stack(hs), weights), cfg.head)
    if not np.all(np.isfinite(out.value)):
        day = int(np.flatnonzero(~np.all(np.isfinite(out.value), axis=1))[0])
        raise FloatingPointError(f"non-finite activation on day {day}")
    return out
