"""AHGCSP: attention + fused heterogeneous graphs + two-layer GCN + LSTM.

Every function here works on batched tensors. A batch carries B samples of
P slots each; window tensors have shape (B, P, N, N), per-sample static
similarities (B, N, N) and the geographic kernel (N, N).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    as_tensor,
    concat,
    matmul,
    mul,
    parameter,
    relu,
    reshape,
    row_softmax,
    sigmoid,
    take,
    tanh,
    transpose,
)
from .core import OdflowError, ShapeMismatch
from .ingestion import Normalizer
from .io import read_checkpoint, write_checkpoint


class AllRelationsDisabled(OdflowError):
    pass


class WrongSequenceLength(OdflowError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and ablation switches.

    ``output_floor`` is the normalized value that corresponds to a zero count.
    The output head applies its ReLU relative to that level so predictions
    are nonnegative on the count scale. Setting it to 0 applies the ReLU in
    normalized space instead.
    """

    n_stations: int
    window: int = 8
    gcn_units: int = 128
    lstm_units: int = 256
    lstm_layers: int = 2
    attention_units: tuple = (16, 16, 16)
    use_geo: bool = True
    use_functional: bool = True
    use_dynamic: bool = True
    use_gcn: bool = True
    output_floor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "attention_units", tuple(self.attention_units))
        if self.use_gcn and not (self.use_geo or self.use_functional or self.use_dynamic):
            raise AllRelationsDisabled("graph convolution needs at least one relation")
        if self.lstm_layers < 1 or self.window < 1:
            raise ValueError("need at least one LSTM layer and one input slot")

    def to_json(self) -> dict:
        d = asdict(self)
        d["attention_units"] = list(self.attention_units)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


ATTENTION_BRANCHES = ("key", "query", "bar_key", "bar_query")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        n, G, U = config.n_stations, config.gcn_units, config.lstm_units
        t: dict[str, Tensor] = {}
        for branch in ATTENTION_BRANCHES:
            width = n
            for k, units in enumerate(config.attention_units):
                t[f"att.{branch}.{k}.W"] = parameter(_glorot(rng, width, units))
                t[f"att.{branch}.{k}.b"] = parameter(np.zeros(units))
                width = units
        for name, val in (
            ("w_att", 0.5),
            ("w_att_bar", 0.5),
            ("w_f_mix", 0.5),
            ("w_d", 1 / 3),
            ("w_f", 1 / 3),
            ("w_g", 1 / 3),
        ):
            t[name] = parameter(np.array(val))
        t["gcn.W1"] = parameter(_glorot(rng, n, G))
        t["gcn.b1"] = parameter(np.zeros(G))
        t["gcn.W2"] = parameter(_glorot(rng, G, G))
        t["gcn.b2"] = parameter(np.zeros(G))
        width = G if config.use_gcn else n
        for layer in range(config.lstm_layers):
            t[f"lstm.{layer}.W"] = parameter(_glorot(rng, width + U, 4 * U))
            t[f"lstm.{layer}.b"] = parameter(np.zeros(4 * U))
            width = U
        t["head.W"] = parameter(_glorot(rng, U, n))
        t["head.b"] = parameter(np.zeros(n))
        for k, v in t.items():
            v.name = k
        return cls(config, t)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def load_arrays(self, arrays: dict) -> None:
        for k, v in self.tensors.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != v.data.shape:
                raise ShapeMismatch(f"{k}: {a.shape} vs {v.data.shape}")
            v.data = a.copy()

    def copy(self) -> "ModelParams":
        other = ModelParams.init(self.config, 0)
        other.load_arrays(self.arrays())
        return other

    def all_finite(self) -> bool:
        return all(np.isfinite(v.data).all() for v in self.tensors.values())

    def count(self) -> int:
        return sum(v.data.size for v in self.tensors.values())


def _mlp(x: Tensor, params: ModelParams, branch: str) -> Tensor:
    for k in range(len(params.config.attention_units)):
        x = relu(add(matmul(x, params[f"att.{branch}.{k}.W"]), params[f"att.{branch}.{k}.b"]))
    return x


def dynamic_scores(m_rows, odt_rows, params: ModelParams) -> Tensor:
    """Attention relation from the current OD rows and ODt rows.

    e_ij = key(D_i) . query(D_j); the result is the weighted sum of the two
    row-softmaxed score matrices, so every row sums to w_att + w_att_bar.
    """
    m, mb = as_tensor(m_rows), as_tensor(odt_rows)
    if m.shape != mb.shape or m.shape[-1] != m.shape[-2]:
        raise ShapeMismatch(f"dynamic_scores: {m.shape} vs {mb.shape}")
    e = matmul(_mlp(m, params, "key"), transpose(_mlp(m, params, "query")))
    e_bar = matmul(_mlp(mb, params, "bar_key"), transpose(_mlp(mb, params, "bar_query")))
    return add(mul(row_softmax(e), params["w_att"]), mul(row_softmax(e_bar), params["w_att_bar"]))


def fuse_adjacency(
    dyn: Optional[Tensor],
    si,
    so,
    geo,
    params: ModelParams,
    config: Optional[ModelConfig] = None,
) -> Tensor:
    """Row-softmax of the weighted sum of the enabled relations."""
    config = config or params.config
    terms = []
    if config.use_dynamic:
        if dyn is None:
            raise ValueError("dynamic relation enabled but not supplied")
        terms.append(mul(dyn, params["w_d"]))
    if config.use_functional:
        w = params["w_f_mix"]
        func = add(mul(as_tensor(si), w), mul(as_tensor(so), add(mul(w, -1.0), 1.0)))
        terms.append(mul(func, params["w_f"]))
    if config.use_geo:
        terms.append(mul(as_tensor(geo), params["w_g"]))
    if not terms:
        raise AllRelationsDisabled("no relation enabled")
    total = terms[0]
    for extra in terms[1:]:
        total = add(total, extra)
    return row_softmax(total)


def gcn_forward(H, M, params: ModelParams) -> Tensor:
    """Two graph-convolution layers: ReLU(H (ReLU(H M W1 + b1)) W2 + b2)."""
    H, M = as_tensor(H), as_tensor(M)
    if H.shape[-1] != M.shape[-2]:
        raise ShapeMismatch(f"gcn: H {H.shape} vs M {M.shape}")
    y1 = relu(add(matmul(matmul(H, M), params["gcn.W1"]), params["gcn.b1"]))
    return relu(add(matmul(matmul(H, y1), params["gcn.W2"]), params["gcn.b2"]))


def _lstm(seq: Sequence[Tensor], params: ModelParams) -> Tensor:
    """Stacked LSTM over a list of (rows, features) tensors; top-layer final h."""
    U = params.config.lstm_units
    rows = seq[0].shape[0]
    xs = list(seq)
    for layer in range(params.config.lstm_layers):
        W, b = params[f"lstm.{layer}.W"], params[f"lstm.{layer}.b"]
        h = Tensor(np.zeros((rows, U)))
        c = Tensor(np.zeros((rows, U)))
        outs = []
        for x in xs:
            z = add(matmul(concat([x, h], axis=-1), W), b)
            i = sigmoid(take(z, (slice(None), slice(0, U))))
            f = sigmoid(take(z, (slice(None), slice(U, 2 * U))))
            g = tanh(take(z, (slice(None), slice(2 * U, 3 * U))))
            o = sigmoid(take(z, (slice(None), slice(3 * U, 4 * U))))
            c = add(mul(f, c), mul(i, g))
            h = mul(o, tanh(c))
            outs.append(h)
        xs = outs
    return xs[-1]


def temporal_head(features, params: ModelParams) -> Tensor:
    """LSTM over the slot sequence per station, then the ReLU output layer.

    ``features`` has shape (B, P, N, F), oldest slot first. Stations of all
    samples form one LSTM batch sharing weights. Returns (B, N, N) in
    normalized units.
    """
    cfg = params.config
    x = as_tensor(features)
    if x.ndim != 4:
        raise ShapeMismatch(f"temporal_head expects (B, P, N, F), got {x.shape}")
    B, P, N, F = x.shape
    if P != cfg.window:
        raise WrongSequenceLength(f"expected {cfg.window} slots, got {P}")
    seq = [reshape(take(x, (slice(None), p)), (B * N, F)) for p in range(P)]
    ms = _lstm(seq, params)
    z = add(matmul(ms, params["head.W"]), params["head.b"])
    floor = cfg.output_floor
    out = add(relu(add(z, -floor)), floor) if floor else relu(z)
    return reshape(out, (B, N, N))


@dataclass
class Batch:
    """Model inputs in normalized units."""

    window: np.ndarray  # (B, P, N, N)
    odt: np.ndarray  # (B, P, N, N)
    si: np.ndarray  # (B, N, N)
    so: np.ndarray  # (B, N, N)
    geo: np.ndarray  # (N, N)
    label: Optional[np.ndarray] = None  # (B, N, N)

    def __len__(self) -> int:
        return self.window.shape[0]

    def subset(self, idx) -> "Batch":
        return Batch(
            self.window[idx],
            self.odt[idx],
            self.si[idx],
            self.so[idx],
            self.geo,
            None if self.label is None else self.label[idx],
        )


def ahgcsp_forward(batch: Batch, params: ModelParams, config: Optional[ModelConfig] = None) -> Tensor:
    """Full predictor: per-slot relations and GCN, then the temporal head."""
    cfg = config or params.config
    B, P, N, _ = batch.window.shape
    if P != cfg.window:
        raise WrongSequenceLength(f"expected {cfg.window} slots, got {P}")
    M = Tensor(batch.window)
    if cfg.use_gcn:
        dyn = dynamic_scores(M, Tensor(batch.odt), params) if cfg.use_dynamic else None
        H = fuse_adjacency(dyn, batch.si[:, None], batch.so[:, None], batch.geo, params, cfg)
        feats = gcn_forward(H, M, params)
    else:
        feats = M
    return temporal_head(feats, params)


def predict_counts(batch: Batch, params: ModelParams, normalizer: Normalizer) -> np.ndarray:
    """Forward pass mapped back to the count scale and clamped at zero."""
    z = ahgcsp_forward(batch, params).data
    return np.maximum(normalizer.invert(z), 0.0)


def adjacency_for(batch: Batch, params: ModelParams) -> np.ndarray:
    """Fused H_t for every (sample, slot); (B, P, N, N)."""
    cfg = params.config
    M = Tensor(batch.window)
    dyn = dynamic_scores(M, Tensor(batch.odt), params) if cfg.use_dynamic else None
    H = fuse_adjacency(dyn, batch.si[:, None], batch.so[:, None], batch.geo, params, cfg).data
    # without the dynamic term H is the same for every slot of a sample
    return np.broadcast_to(H, batch.window.shape).copy()


def save_checkpoint(path, params: ModelParams, normalizer: Normalizer, kind: str, extra: Optional[dict] = None) -> None:
    meta = {
        "format": "odflow-checkpoint",
        "kind": kind,
        "config": params.config.to_json(),
        "normalizer": normalizer.to_json(),
    }
    if extra:
        meta["extra"] = extra
    write_checkpoint(path, {f"{kind}/{k}": v.data for k, v in params.tensors.items()}, meta)


def load_checkpoint(path) -> tuple[ModelParams, Normalizer, dict]:
    arrays, meta = read_checkpoint(path)
    config = ModelConfig.from_json(meta["config"])
    params = ModelParams.init(config, 0)
    prefix = meta["kind"] + "/"
    params.load_arrays({k[len(prefix):]: v for k, v in arrays.items()})
    return params, Normalizer.from_json(meta["normalizer"]), meta
