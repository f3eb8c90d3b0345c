"""Recurrent dueling Q-network over selected pyramid levels.

Architecture: one conv(3x3)-ReLU-global-avg-pool encoder per pyramid level
(source and target encoded separately and concatenated), a bidirectional
LSTM over the selected levels in ascending layer order, a shared dueling
decoder applied at every step, and element-wise aggregation of the per-step
Q vectors. The empty-selection observation feeds the global descriptor pair
through a dedicated affine adapter as a length-1 sequence.

All math is float64 with hand-written backprop; gradients are validated
against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable

import numpy as np

from .errors import FormatError, ShapeError, TruncationError, ValidationError
from .pyramid import FeatureMap

QNET_MAGIC = b"QNET"
QNET_VERSION = 1
AGGREGATIONS = ("product", "sum", "mean")


@dataclass(frozen=True)
class NetConfig:
    """Network shape; the conv kernel is fixed at 3x3/stride 1/pad 1 and the
    LSTM hidden size equals ``embed_dim``."""

    num_levels: int
    channels: tuple[int, ...]
    embed_dim: int = 16
    global_dim: int = 8
    aggregation: str = "product"

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ValidationError("embed_dim must be >= 2")
        channels = tuple(int(c) for c in self.channels)
        if len(channels) != self.num_levels or any(c < 1 for c in channels):
            raise ValidationError("channels must list a positive value per level")
        if self.global_dim < 1:
            raise ValidationError("global_dim must be >= 1")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"aggregation must be one of {AGGREGATIONS}")
        object.__setattr__(self, "channels", channels)

    @property
    def action_count(self) -> int:
        return self.num_levels + 1


def param_shapes(config: NetConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Canonical (name, shape, fan_in) order; checkpoints flatten in this order."""
    d, dg, a = config.embed_dim, config.global_dim, config.action_count
    shapes: list[tuple[str, tuple[int, ...], int]] = [
        ("adapter.W", (2 * d, 2 * dg), 2 * dg),
        ("adapter.b", (2 * d,), 0),
    ]
    for i, c in enumerate(config.channels):
        shapes.append((f"enc{i}.W", (d, c, 3, 3), 9 * c))
        shapes.append((f"enc{i}.b", (d,), 0))
    for direction in ("fwd", "bwd"):
        shapes.append((f"lstm_{direction}.Wx", (4 * d, 2 * d), 2 * d))
        shapes.append((f"lstm_{direction}.Wh", (4 * d, d), d))
        shapes.append((f"lstm_{direction}.b", (4 * d,), 0))
    shapes.append(("value.W", (1, 2 * d), 2 * d))
    shapes.append(("value.b", (1,), 0))
    shapes.append(("adv.W", (a, 2 * d), 2 * d))
    shapes.append(("adv.b", (a,), 0))
    return shapes


def param_count(config: NetConfig) -> int:
    return int(sum(np.prod(shape) for _, shape, _ in param_shapes(config)))


class QNetwork:
    """Float64 parameter container keyed by the canonical names.

    ``version`` increments on every mutation so callers may cache forward
    results keyed on (version, observation).
    """

    def __init__(self, config: NetConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.version = 0

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, _, _ in param_shapes(self.config)])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != param_count(self.config):
            raise ShapeError(
                f"flat vector has {flat.size} entries, expected {param_count(self.config)}"
            )
        pos = 0
        for name, shape, _ in param_shapes(self.config):
            n = int(np.prod(shape))
            self.params[name] = flat[pos : pos + n].reshape(shape).copy()
            pos += n
        self.version += 1

    def copy(self) -> "QNetwork":
        return QNetwork(self.config, {k: v.copy() for k, v in self.params.items()})

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros(shape) for name, shape, _ in param_shapes(self.config)}

    def param_count(self) -> int:
        return param_count(self.config)


def init_network(config: NetConfig, seed: int) -> QNetwork:
    """Weights uniform in +-1/sqrt(fan_in), biases zero; deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape, fan_in in param_shapes(config):
        if fan_in == 0:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return QNetwork(config, params)


@dataclass(frozen=True, eq=False)
class Observation:
    """Input to :func:`forward`.

    Either ``selected`` is empty and the global descriptors form the step-0
    observation, or ``selected`` lists level indices with the matching source
    and target feature maps. ``cache_key`` (if set) identifies the underlying
    pair for callers that memoize forward passes.
    """

    selected: tuple[int, ...]
    src_feats: tuple[FeatureMap, ...]
    tgt_feats: tuple[FeatureMap, ...]
    src_global: np.ndarray
    tgt_global: np.ndarray
    valid_mask: np.ndarray
    cache_key: Hashable | None = None


@dataclass(frozen=True, eq=False)
class QOutput:
    """Aggregated q_values (masked entries are -inf) plus per-step V and A."""

    q_values: np.ndarray  # (N+1,)
    state_values: np.ndarray  # (T,)
    advantages: np.ndarray  # (T, N+1)
    step_q: np.ndarray  # (T, N+1) per-step dueling outputs


def dueling_combine(v: float, advantages: np.ndarray) -> np.ndarray:
    """Q(s, a) = V(s) + A(s, a) - mean_a' A(s, a')."""
    a = np.asarray(advantages, dtype=np.float64)
    return v + a - a.mean()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _im2col(x: np.ndarray) -> np.ndarray:
    """3x3/stride-1 patches with replicate padding: (c*9, h*w).

    Replicate (edge) padding keeps constant maps constant under the conv, so
    the pooled encoding of a constant input is independent of spatial size.
    """
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    cols = np.empty((c, 9, h, w))
    k = 0
    for u in range(3):
        for v in range(3):
            cols[:, k] = xp[:, u : u + h, v : v + w]
            k += 1
    return cols.reshape(c * 9, h * w)


def _encode_tape(net: QNetwork, level: int, fmap: FeatureMap) -> tuple[np.ndarray, dict]:
    cfg = net.config
    if not 0 <= level < cfg.num_levels:
        raise ValidationError(f"level {level} outside 0..{cfg.num_levels - 1}")
    if fmap.channels != cfg.channels[level]:
        raise ShapeError(
            f"level {level} expects {cfg.channels[level]} channels, got {fmap.channels}"
        )
    w = net.params[f"enc{level}.W"].reshape(cfg.embed_dim, -1)
    b = net.params[f"enc{level}.b"]
    cols = _im2col(fmap.data.astype(np.float64))
    pre = w @ cols + b[:, None]
    vec = np.maximum(pre, 0.0).mean(axis=1)
    return vec, {"cols": cols, "pre": pre, "level": level}


def encode(net: QNetwork, level: int, fmap: FeatureMap) -> np.ndarray:
    """Per-level encoder: conv(3x3) -> ReLU -> global average pool -> (d,)."""
    vec, _ = _encode_tape(net, level, fmap)
    return vec


def _encode_backward(net: QNetwork, tape: dict, dvec: np.ndarray, grads: dict) -> None:
    pre, cols, level = tape["pre"], tape["cols"], tape["level"]
    positions = pre.shape[1]
    dpre = (pre > 0.0) * (dvec[:, None] / positions)  # ReLU subgradient at 0 is 0
    grads[f"enc{level}.W"] += (dpre @ cols.T).reshape(grads[f"enc{level}.W"].shape)
    grads[f"enc{level}.b"] += dpre.sum(axis=1)


def _lstm_forward(net: QNetwork, direction: str, xs: np.ndarray) -> dict:
    wx = net.params[f"lstm_{direction}.Wx"]
    wh = net.params[f"lstm_{direction}.Wh"]
    b = net.params[f"lstm_{direction}.b"]
    steps, d = xs.shape[0], net.config.embed_dim
    hs = np.zeros((steps + 1, d))
    cs = np.zeros((steps + 1, d))
    gates = np.empty((steps, 4, d))
    for t in range(steps):
        z = wx @ xs[t] + wh @ hs[t] + b
        zi, zf, zg, zo = z.reshape(4, d)
        i, f = _sigmoid(zi), _sigmoid(zf)
        g, o = np.tanh(zg), _sigmoid(zo)
        cs[t + 1] = f * cs[t] + i * g
        hs[t + 1] = o * np.tanh(cs[t + 1])
        gates[t] = (i, f, g, o)
    return {"xs": xs, "hs": hs, "cs": cs, "gates": gates, "direction": direction}


def _lstm_backward(net: QNetwork, tape: dict, dh_direct: np.ndarray, grads: dict) -> np.ndarray:
    direction = tape["direction"]
    wx = net.params[f"lstm_{direction}.Wx"]
    wh = net.params[f"lstm_{direction}.Wh"]
    xs, hs, cs, gates = tape["xs"], tape["hs"], tape["cs"], tape["gates"]
    steps, d = xs.shape[0], net.config.embed_dim
    dxs = np.zeros_like(xs)
    dh_next = np.zeros(d)
    dc_next = np.zeros(d)
    for t in reversed(range(steps)):
        i, f, g, o = gates[t]
        tanh_c = np.tanh(cs[t + 1])
        dh = dh_direct[t] + dh_next
        do = dh * tanh_c
        dc = dc_next + dh * o * (1.0 - tanh_c * tanh_c)
        da = np.concatenate(
            [
                dc * g * i * (1.0 - i),
                dc * cs[t] * f * (1.0 - f),
                dc * i * (1.0 - g * g),
                do * o * (1.0 - o),
            ]
        )
        grads[f"lstm_{direction}.Wx"] += np.outer(da, xs[t])
        grads[f"lstm_{direction}.Wh"] += np.outer(da, hs[t])
        grads[f"lstm_{direction}.b"] += da
        dxs[t] = wx.T @ da
        dh_next = wh.T @ da
        dc_next = dc * f
    return dxs


def _canonical_observation(obs: Observation) -> tuple[tuple[int, ...], tuple, tuple]:
    sel = obs.selected
    if len(set(sel)) != len(sel):
        raise ValidationError(f"duplicate levels in observation: {sel}")
    if len(sel) != len(obs.src_feats) or len(sel) != len(obs.tgt_feats):
        raise ValidationError("selected levels and feature tuples must align")
    order = sorted(range(len(sel)), key=lambda j: sel[j])
    return (
        tuple(sel[j] for j in order),
        tuple(obs.src_feats[j] for j in order),
        tuple(obs.tgt_feats[j] for j in order),
    )


def forward_tape(net: QNetwork, obs: Observation) -> tuple[QOutput, dict]:
    """Forward pass returning the output and the activations needed by backprop."""
    cfg = net.config
    sel, src_feats, tgt_feats = _canonical_observation(obs)
    mask = np.asarray(obs.valid_mask, dtype=bool)
    if mask.shape != (cfg.action_count,):
        raise ShapeError(f"valid_mask must have length {cfg.action_count}")

    enc_tapes: list[tuple[dict, dict]] = []
    if sel:
        xs = np.empty((len(sel), 2 * cfg.embed_dim))
        for t, (level, fs, ft) in enumerate(zip(sel, src_feats, tgt_feats)):
            vs, tape_s = _encode_tape(net, level, fs)
            vt, tape_t = _encode_tape(net, level, ft)
            xs[t, : cfg.embed_dim] = vs
            xs[t, cfg.embed_dim :] = vt
            enc_tapes.append((tape_s, tape_t))
        globals_in = None
    else:
        globals_in = np.concatenate(
            [
                np.asarray(obs.src_global, dtype=np.float64),
                np.asarray(obs.tgt_global, dtype=np.float64),
            ]
        )
        if globals_in.size != 2 * cfg.global_dim:
            raise ShapeError(
                f"global descriptors span {globals_in.size}, expected {2 * cfg.global_dim}"
            )
        xs = (net.params["adapter.W"] @ globals_in + net.params["adapter.b"])[None, :]

    fwd = _lstm_forward(net, "fwd", xs)
    bwd = _lstm_forward(net, "bwd", xs[::-1])
    latent = np.concatenate([fwd["hs"][1:], bwd["hs"][1:][::-1]], axis=1)  # (T, 2d)

    v = latent @ net.params["value.W"].T + net.params["value.b"]  # (T, 1)
    a = latent @ net.params["adv.W"].T + net.params["adv.b"]  # (T, N+1)
    step_q = v + a - a.mean(axis=1, keepdims=True)

    if cfg.aggregation == "product":
        q_raw = np.prod(step_q, axis=0)
    elif cfg.aggregation == "sum":
        q_raw = step_q.sum(axis=0)
    else:
        q_raw = step_q.mean(axis=0)
    q = np.where(mask, q_raw, -np.inf)

    out = QOutput(q, v[:, 0].copy(), a.copy(), step_q.copy())
    tape = {
        "sel": sel,
        "enc_tapes": enc_tapes,
        "globals_in": globals_in,
        "xs": xs,
        "fwd": fwd,
        "bwd": bwd,
        "latent": latent,
        "step_q": step_q,
        "mask": mask,
    }
    return out, tape


def forward(net: QNetwork, obs: Observation) -> QOutput:
    out, _ = forward_tape(net, obs)
    return out


def accumulate_backward(net: QNetwork, tape: dict, dq: np.ndarray, grads: dict) -> None:
    """Accumulate d(sum(dq * q_values))/d(params) into ``grads``.

    Gradient entries at masked actions are ignored; only parameters on the
    active path (selected levels' encoders, or the adapter at step 0) are
    touched.
    """
    cfg = net.config
    dq = np.where(tape["mask"], np.asarray(dq, dtype=np.float64), 0.0)
    step_q = tape["step_q"]
    steps = step_q.shape[0]

    if cfg.aggregation == "product":
        prefix = np.ones_like(step_q)
        suffix = np.ones_like(step_q)
        for t in range(1, steps):
            prefix[t] = prefix[t - 1] * step_q[t - 1]
        for t in range(steps - 2, -1, -1):
            suffix[t] = suffix[t + 1] * step_q[t + 1]
        d_step_q = dq[None, :] * prefix * suffix
    elif cfg.aggregation == "sum":
        d_step_q = np.broadcast_to(dq, step_q.shape).copy()
    else:
        d_step_q = np.broadcast_to(dq / steps, step_q.shape).copy()

    dv = d_step_q.sum(axis=1)  # (T,)
    da = d_step_q - d_step_q.mean(axis=1, keepdims=True)  # (T, N+1)

    latent = tape["latent"]
    grads["value.W"] += dv[None, :] @ latent
    grads["value.b"] += dv.sum(keepdims=True)
    grads["adv.W"] += da.T @ latent
    grads["adv.b"] += da.sum(axis=0)

    dlatent = dv[:, None] * net.params["value.W"] + da @ net.params["adv.W"]  # (T, 2d)
    d = cfg.embed_dim
    dxs = _lstm_backward(net, tape["fwd"], dlatent[:, :d], grads)
    dxs += _lstm_backward(net, tape["bwd"], dlatent[:, d:][::-1], grads)[::-1]

    if tape["sel"]:
        for t, (tape_s, tape_t) in enumerate(tape["enc_tapes"]):
            _encode_backward(net, tape_s, dxs[t, :d], grads)
            _encode_backward(net, tape_t, dxs[t, d:], grads)
    else:
        grads["adapter.W"] += np.outer(dxs[0], tape["globals_in"])
        grads["adapter.b"] += dxs[0]


def backward(net: QNetwork, obs: Observation, dq: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients of sum(dq * q_values) for one observation."""
    _, tape = forward_tape(net, obs)
    grads = net.zero_grads()
    accumulate_backward(net, tape, dq, grads)
    return grads


def soft_update(target: QNetwork, evaluation: QNetwork, rho: float) -> QNetwork:
    """In-place blend: target := (1 - rho) * target + rho * evaluation."""
    if target.config != evaluation.config:
        raise ShapeError("target and evaluation networks have different configs")
    if not 0.0 < rho <= 1.0:
        raise ValidationError(f"rho must be in (0, 1], got {rho}")
    for name in target.params:
        target.params[name] = (1.0 - rho) * target.params[name] + rho * evaluation.params[name]
    target.version += 1
    return target


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(net: QNetwork, path, metadata: dict | None = None) -> None:
    """Binary checkpoint (magic QNET) plus a JSON sidecar at <path>.json."""
    cfg = net.config
    buf = bytearray()
    buf += QNET_MAGIC
    buf += struct.pack(
        "<IIIII",
        QNET_VERSION,
        cfg.num_levels,
        cfg.embed_dim,
        cfg.global_dim,
        AGGREGATIONS.index(cfg.aggregation),
    )
    buf += struct.pack(f"<{cfg.num_levels}I", *cfg.channels)
    flat = net.get_flat().astype("<f4")
    buf += struct.pack("<Q", flat.size)
    buf += flat.tobytes()
    Path(path).write_bytes(bytes(buf))
    sidecar = {
        "net_config": {
            "num_levels": cfg.num_levels,
            "channels": list(cfg.channels),
            "embed_dim": cfg.embed_dim,
            "global_dim": cfg.global_dim,
            "aggregation": cfg.aggregation,
        },
        "param_count": int(flat.size),
    }
    sidecar.update(metadata or {})
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")


def load_checkpoint(path) -> QNetwork:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != QNET_MAGIC:
        raise FormatError(f"{path}: not a QNET checkpoint (bad magic)")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncationError(f"{path}: needs {pos + n} bytes, file has {len(raw)}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    version, num_levels, embed_dim, global_dim, agg_idx = struct.unpack("<IIIII", take(20))
    if version != QNET_VERSION:
        raise FormatError(f"{path}: unsupported QNET version {version}")
    if agg_idx >= len(AGGREGATIONS):
        raise FormatError(f"{path}: unknown aggregation code {agg_idx}")
    channels = struct.unpack(f"<{num_levels}I", take(4 * num_levels))
    config = NetConfig(
        num_levels=num_levels,
        channels=channels,
        embed_dim=embed_dim,
        global_dim=global_dim,
        aggregation=AGGREGATIONS[agg_idx],
    )
    (count,) = struct.unpack("<Q", take(8))
    if count != param_count(config):
        raise FormatError(
            f"{path}: declares {count} parameters, config implies {param_count(config)}"
        )
    flat = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float64)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} unexpected trailing bytes")
    net = QNetwork(config, {})
    net.set_flat(flat)
    return net
