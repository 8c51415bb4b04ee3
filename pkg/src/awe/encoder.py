"""Recurrent encoder: variable-length feature sequences to fixed vectors.

A stack of unidirectional recurrent layers (GRU by default, vanilla tanh as
an option) followed by a linear projection of the final hidden state. The
GRU follows the gate convention in which the reset gate multiplies the
hidden-side candidate term after the matmul:

    r_t = sigmoid(W_ir x_t + b_ir + W_hr h_{t-1} + b_hr)
    z_t = sigmoid(W_iz x_t + b_iz + W_hz h_{t-1} + b_hz)
    n_t = tanh  (W_in x_t + b_in + r_t * (W_hn h_{t-1} + b_hn))
    h_t = (1 - z_t) * n_t + z_t * h_{t-1}

backward() gives exact analytic gradients through time for both cells.
Compute dtype follows the parameter dtype: float32 for production training
and inference, float64 for the gradient-check harness. Checkpoints store
float32 per the AWEC format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

CELL_TYPES = ("gru", "vanilla-tanh")

CHECKPOINT_MAGIC = b"AWEC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 13
    hidden_dim: int = 400
    n_layers: int = 3
    embed_dim: int = 130
    cell: str = "gru"
    max_frames: int = 120

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "n_layers", "embed_dim", "max_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.cell not in CELL_TYPES:
            raise ValueError(f"cell must be one of {CELL_TYPES}")

    @property
    def n_gates(self) -> int:
        return 3 if self.cell == "gru" else 1


class EncoderParams:
    """Named parameter tensors, iterated in a fixed order."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def allclose(self, other: "EncoderParams", **kw) -> bool:
        return self.names() == other.names() and all(
            np.allclose(self.tensors[k], other.tensors[k], **kw) for k in self.tensors
        )


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    g, h = cfg.n_gates, cfg.hidden_dim
    for layer in range(cfg.n_layers):
        d_in = cfg.input_dim if layer == 0 else h
        shapes[f"layer{layer}.w_ih"] = (g * h, d_in)
        shapes[f"layer{layer}.w_hh"] = (g * h, h)
        shapes[f"layer{layer}.b_ih"] = (g * h,)
        shapes[f"layer{layer}.b_hh"] = (g * h,)
    shapes["proj.w"] = (cfg.embed_dim, h)
    shapes["proj.b"] = (cfg.embed_dim,)
    return shapes


def init_params(cfg: EncoderConfig, seed: int, dtype=np.float32) -> EncoderParams:
    """Uniform init in [-1/sqrt(hidden_dim), +1/sqrt(hidden_dim)], all tensors.

    float32 is the production dtype; the finite-difference harness passes
    float64 and all internal compute follows the parameter dtype.
    """
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(cfg.hidden_dim)
    tensors = {name: rng.uniform(-bound, bound, size=shape).astype(dtype)
               for name, shape in param_shapes(cfg).items()}
    return EncoderParams(tensors)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _pad_batch(cfg: EncoderConfig, seqs: list[np.ndarray], dtype
               ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack sequences into (T, B, D) with head truncation at max_frames."""
    if not seqs:
        raise ValueError("empty batch")
    lengths = np.empty(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        if s.ndim != 2 or s.shape[1] != cfg.input_dim:
            raise ValueError(
                f"sequence {i}: expected (T, {cfg.input_dim}) input, got {s.shape}"
            )
        if s.shape[0] < 1:
            raise ValueError(f"sequence {i} is empty")
        lengths[i] = min(s.shape[0], cfg.max_frames)
    t_max = int(lengths.max())
    x = np.zeros((t_max, len(seqs), cfg.input_dim), dtype=dtype)
    for i, s in enumerate(seqs):
        x[: lengths[i], i] = s[: lengths[i]]
    mask = np.arange(t_max)[:, None] < lengths[None, :]
    return x, mask, lengths


def _layer_forward(params: EncoderParams, cfg: EncoderConfig, layer: int,
                   x: np.ndarray, mask: np.ndarray, need_cache: bool):
    """One recurrent layer over (T, B, d_in); returns (T, B, H) and a cache."""
    w_ih = params[f"layer{layer}.w_ih"]
    w_hh = params[f"layer{layer}.w_hh"]
    b_ih = params[f"layer{layer}.b_ih"]
    b_hh = params[f"layer{layer}.b_hh"]
    t_max, batch, _ = x.shape
    h_dim = cfg.hidden_dim
    dtype = x.dtype
    gi = x @ w_ih.T + b_ih  # input-side gate terms for all steps at once
    h = np.zeros((batch, h_dim), dtype=dtype)
    h_seq = np.empty((t_max, batch, h_dim), dtype=dtype)
    cache = None
    if need_cache:
        cache = {
            "x": x,
            "r": np.empty((t_max, batch, h_dim), dtype=dtype),
            "z": np.empty((t_max, batch, h_dim), dtype=dtype),
            "n": np.empty((t_max, batch, h_dim), dtype=dtype),
            "ghn": np.empty((t_max, batch, h_dim), dtype=dtype),
        }
    if cfg.cell == "gru":
        for t in range(t_max):
            gh = h @ w_hh.T + b_hh
            r = _sigmoid(gi[t, :, :h_dim] + gh[:, :h_dim])
            zg = _sigmoid(gi[t, :, h_dim:2 * h_dim] + gh[:, h_dim:2 * h_dim])
            ghn = gh[:, 2 * h_dim:]
            n = np.tanh(gi[t, :, 2 * h_dim:] + r * ghn)
            h_new = (1.0 - zg) * n + zg * h
            m = mask[t][:, None]
            h = np.where(m, h_new, h)
            h_seq[t] = h
            if need_cache:
                cache["r"][t] = r
                cache["z"][t] = zg
                cache["n"][t] = n
                cache["ghn"][t] = ghn
    else:
        for t in range(t_max):
            a = np.tanh(gi[t] + h @ w_hh.T + b_hh)
            m = mask[t][:, None]
            h = np.where(m, a, h)
            h_seq[t] = h
            if need_cache:
                cache["n"][t] = a
    if need_cache:
        cache["h_seq"] = h_seq
    return h_seq, cache


def _forward(params: EncoderParams, cfg: EncoderConfig, seqs: list[np.ndarray],
             need_cache: bool = False):
    x, mask, lengths = _pad_batch(cfg, seqs, params.dtype)
    inputs = x
    caches = []
    for layer in range(cfg.n_layers):
        inputs, cache = _layer_forward(params, cfg, layer, inputs, mask, need_cache)
        caches.append(cache)
    h_last = inputs[-1]  # masking freezes h at each sequence's own end
    z = h_last @ params["proj.w"].T + params["proj.b"]
    ctx = {"caches": caches, "mask": mask, "lengths": lengths,
           "h_last": h_last} if need_cache else None
    return z, ctx


def encode(params: EncoderParams, cfg: EncoderConfig, frames: np.ndarray) -> np.ndarray:
    """Embed one (T, D) sequence; inputs longer than max_frames are truncated."""
    z, _ = _forward(params, cfg, [np.asarray(frames)])
    return z[0]


def encode_batch(params: EncoderParams, cfg: EncoderConfig,
                 seqs: list[np.ndarray]) -> np.ndarray:
    """Embed a list of (T_i, D) sequences; returns (B, M), order preserved."""
    z, _ = _forward(params, cfg, [np.asarray(s) for s in seqs])
    return z


def _layer_backward(params: EncoderParams, cfg: EncoderConfig, layer: int,
                    cache: dict, mask: np.ndarray, d_hseq: np.ndarray,
                    grads: dict[str, np.ndarray]) -> np.ndarray:
    """BPTT through one layer; returns the gradient w.r.t. its input sequence."""
    w_ih = params[f"layer{layer}.w_ih"]
    w_hh = params[f"layer{layer}.w_hh"]
    t_max, batch, h_dim = cache["h_seq"].shape
    dtype = cache["h_seq"].dtype
    h_prev_seq = np.concatenate(
        [np.zeros((1, batch, h_dim), dtype=dtype), cache["h_seq"][:-1]], axis=0)
    gates = cfg.n_gates
    da_i_seq = np.empty((t_max, batch, gates * h_dim), dtype=dtype)
    da_h_seq = np.empty((t_max, batch, gates * h_dim), dtype=dtype)
    dh = np.zeros((batch, h_dim), dtype=dtype)
    if cfg.cell == "gru":
        for t in range(t_max - 1, -1, -1):
            dh = dh + d_hseq[t]
            m = mask[t][:, None]
            dh_act = np.where(m, dh, 0.0)
            r, zg, n, ghn = (cache["r"][t], cache["z"][t],
                             cache["n"][t], cache["ghn"][t])
            h_prev = h_prev_seq[t]
            dn = dh_act * (1.0 - zg)
            dz = dh_act * (h_prev - n)
            dan = dn * (1.0 - n * n)
            dr = dan * ghn
            dgn_h = dan * r
            daz = dz * zg * (1.0 - zg)
            dar = dr * r * (1.0 - r)
            da_i = np.concatenate([dar, daz, dan], axis=1)
            da_h = np.concatenate([dar, daz, dgn_h], axis=1)
            da_i_seq[t] = da_i
            da_h_seq[t] = da_h
            dh = dh_act * zg + np.where(m, 0.0, dh) + da_h @ w_hh
    else:
        for t in range(t_max - 1, -1, -1):
            dh = dh + d_hseq[t]
            m = mask[t][:, None]
            dh_act = np.where(m, dh, 0.0)
            a = cache["n"][t]
            da = dh_act * (1.0 - a * a)
            da_i_seq[t] = da
            da_h_seq[t] = da
            dh = np.where(m, 0.0, dh) + da @ w_hh

    flat_i = da_i_seq.reshape(-1, gates * h_dim)
    flat_h = da_h_seq.reshape(-1, gates * h_dim)
    grads[f"layer{layer}.w_ih"] += flat_i.T @ cache["x"].reshape(-1, cache["x"].shape[2])
    grads[f"layer{layer}.w_hh"] += flat_h.T @ h_prev_seq.reshape(-1, h_dim)
    grads[f"layer{layer}.b_ih"] += flat_i.sum(axis=0)
    grads[f"layer{layer}.b_hh"] += flat_h.sum(axis=0)
    return da_i_seq @ w_ih


def zero_grads(cfg: EncoderConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape, dtype=dtype)
            for name, shape in param_shapes(cfg).items()}


def _backward_from_ctx(params: EncoderParams, cfg: EncoderConfig, ctx: dict,
                       d_embeddings: np.ndarray) -> dict[str, np.ndarray]:
    d_emb = np.asarray(d_embeddings, dtype=params.dtype)
    h_last = ctx["h_last"]
    if d_emb.shape != (h_last.shape[0], cfg.embed_dim):
        raise ValueError(
            f"upstream gradients must be (batch, {cfg.embed_dim}), got {d_emb.shape}"
        )
    grads = zero_grads(cfg, params.dtype)
    grads["proj.w"] += d_emb.T @ h_last
    grads["proj.b"] += d_emb.sum(axis=0)
    mask = ctx["mask"]
    t_max, batch = mask.shape
    d_hseq = np.zeros((t_max, batch, cfg.hidden_dim), dtype=params.dtype)
    d_hseq[-1] = d_emb @ params["proj.w"]
    for layer in range(cfg.n_layers - 1, -1, -1):
        d_hseq = _layer_backward(params, cfg, layer, ctx["caches"][layer],
                                 mask, d_hseq, grads)
    return grads


def backward(params: EncoderParams, cfg: EncoderConfig, seqs: list[np.ndarray],
             upstream_grads: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of sum_i <upstream_i, z_i> w.r.t. every parameter."""
    _, ctx = _forward(params, cfg, [np.asarray(s) for s in seqs], need_cache=True)
    return _backward_from_ctx(params, cfg, ctx, upstream_grads)


def forward_with_cache(params: EncoderParams, cfg: EncoderConfig,
                       seqs: list[np.ndarray]):
    """(embeddings, opaque context) for a later backward_from_cache call."""
    return _forward(params, cfg, [np.asarray(s) for s in seqs], need_cache=True)


def backward_from_cache(params: EncoderParams, cfg: EncoderConfig, ctx,
                        d_embeddings: np.ndarray) -> dict[str, np.ndarray]:
    return _backward_from_ctx(params, cfg, ctx, d_embeddings)


def top_layer_states(params: EncoderParams, cfg: EncoderConfig,
                     x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(T, B, H) top-layer hidden states for a pre-padded batch.

    Low-level entry point for window indexing, where embeddings are tapped
    at several prefix lengths of the same padded batch.
    """
    inputs = x
    for layer in range(cfg.n_layers):
        inputs, _ = _layer_forward(params, cfg, layer, inputs, mask, False)
    return inputs


def project_states(params: EncoderParams, h: np.ndarray) -> np.ndarray:
    return h @ params["proj.w"].T + params["proj.b"]


# ---------------------------------------------------------------------------
# Checkpoint format ("AWEC"): magic, version u32, length-prefixed UTF-8 JSON
# metadata block, then named float32 tensors (name, rank, dims, payload).

def save_checkpoint(params: EncoderParams, cfg: EncoderConfig,
                    metadata: dict, path) -> None:
    head = {"encoder": asdict(cfg), "meta": metadata}
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as out:
        out.write(CHECKPOINT_MAGIC)
        out.write(struct.pack("<I", CHECKPOINT_VERSION))
        out.write(struct.pack("<I", len(blob)))
        out.write(blob)
        out.write(struct.pack("<I", len(params.tensors)))
        for name, tensor in params.tensors.items():
            data = np.ascontiguousarray(tensor, dtype="<f4")
            enc = name.encode("utf-8")
            out.write(struct.pack("<I", len(enc)))
            out.write(enc)
            out.write(struct.pack("<I", data.ndim))
            out.write(struct.pack(f"<{data.ndim}I", *data.shape))
            out.write(data.tobytes())


class CheckpointError(ValueError):
    pass


def _read_exact(handle, n: int, what: str) -> bytes:
    data = handle.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path) -> tuple[EncoderParams, EncoderConfig, dict]:
    with open(path, "rb") as inp:
        magic = _read_exact(inp, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(inp, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(inp, 4, "metadata length"))
        head = json.loads(_read_exact(inp, blob_len, "metadata").decode("utf-8"))
        cfg = EncoderConfig(**head["encoder"])
        (n_tensors,) = struct.unpack("<I", _read_exact(inp, 4, "tensor count"))
        tensors = {}
        for k in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(inp, 4, f"tensor {k} name length"))
            name = _read_exact(inp, name_len, f"tensor {k} name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(inp, 4, f"tensor {k} rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(inp, 4 * rank, f"tensor {k} dims"))
            count = int(np.prod(dims)) if rank else 1
            payload = _read_exact(inp, 4 * count, f"tensor {k} payload")
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        params = EncoderParams(tensors)
    expected = param_shapes(cfg)
    if {n: tuple(t.shape) for n, t in params.tensors.items()} != expected:
        raise CheckpointError("tensor shapes do not match the stored encoder config")
    return params, cfg, head["meta"]
