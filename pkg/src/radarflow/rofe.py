"""Radar-oriented flow estimation network.

Layout (fixed, checked at construction)::

    encoder   set conv  r=2/4/8/16 m  samples 4/8/16/32  mlp [32, 32, 64]
    cost vol  8 target neighbors, 8 source neighbors     mlp [512, 512, 512]
    decoder   set conv  r=2/4/8/16 m  samples 4/8/16/32  mlp [512, 256, 64]
    output    mlp [256, 128, 64, 3]

The first layer of every per-neighbor MLP acts on a concatenation
``[feature_j, displacement_ij]``; it is evaluated as a per-point projection
that is gathered afterwards, which is algebraically identical and much
cheaper than projecting every neighbor row.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .core import FEATURE_NAMES, N_CHANNELS, ConfigInvalidError, FramePair, HyperParams, RadarFrame
from .geometry import knn, pairwise_sq_dists

ENCODER_SAMPLES = (4, 8, 16, 32)
ENCODER_WIDTHS = (32, 32, 64)
COST_SAMPLES = 8
COST_WIDTHS = (512, 512, 512)
COST_AGG_HIDDEN = 64
DECODER_WIDTHS = (512, 256, 64)
OUTPUT_WIDTHS = (256, 128, 64, 3)
TABLE_RADII = (2.0, 4.0, 8.0, 16.0)

# fixed input normalization for x, y, z, rrv, rcs, power
INPUT_SCALE = np.array([20.0, 20.0, 20.0, 10.0, 20.0, 20.0])
COST_DISP_SCALE = 4.0

CHECKPOINT_MAGIC = b"RFCK"
CHECKPOINT_VERSION = 1


def ball_query(center_frame, query_frame, radius: float, k: int) -> np.ndarray:
    """Indices into ``center_frame`` of up to ``k`` points within ``radius`` of each query.

    Neighbors are the nearest ones inside the ball (ties to the lowest index).
    Short rows are padded with the nearest neighbor found; a query with an
    empty ball uses its overall nearest point, which is itself when both
    frames are the same.
    """
    c = center_frame.positions if isinstance(center_frame, RadarFrame) else np.asarray(center_frame)
    q = query_frame.positions if isinstance(query_frame, RadarFrame) else np.asarray(query_frame)
    d2 = pairwise_sq_dists(q, c)
    order = np.argsort(d2, axis=1, kind="stable")
    kk = min(k, c.shape[0])
    nearest = order[:, :kk]
    inside = np.take_along_axis(d2, nearest, axis=1) <= radius * radius
    inside[:, 0] = True
    out = np.where(inside, nearest, nearest[:, :1])
    if kk < k:
        out = np.concatenate([out, np.repeat(out[:, :1], k - kk, axis=1)], axis=1)
    return out


def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


@dataclass
class SetConvLayer:
    radius: float
    sample_count: int
    mlp_widths: tuple
    in_channels: int
    weights: dict = field(default_factory=dict)

    def init(self, rng):
        w0, w1, w2 = self.mlp_widths
        fan = self.in_channels + 3
        self.weights = {
            "w_feat": T.tensor(_glorot(rng, fan, w0, (self.in_channels, w0)), True),
            "w_disp": T.tensor(_glorot(rng, fan, w0, (3, w0)), True),
            "b0": T.tensor(np.zeros(w0), True),
            "w1": T.tensor(_glorot(rng, w0, w1, (w0, w1)), True),
            "b1": T.tensor(np.zeros(w1), True),
            "w2": T.tensor(_glorot(rng, w1, w2, (w1, w2)), True),
            "b2": T.tensor(np.zeros(w2), True),
        }
        return self

    def __call__(self, positions: np.ndarray, feats: T.Tensor, nbr: np.ndarray) -> T.Tensor:
        """Per-neighbor MLP on [feature, displacement / radius], max-pooled over neighbors."""
        w = self.weights
        # padded neighbor rows repeat an entry; the max is unchanged if each
        # distinct (center, neighbor) pair goes through the MLP only once
        n, k = nbr.shape
        keys, inverse = np.unique(np.arange(n)[:, None] * len(positions) + nbr, return_inverse=True)
        ci, nj = np.divmod(keys, len(positions))
        disp = (positions[nj] - positions[ci]) / self.radius
        proj = T.linear(feats, w["w_feat"], w["b0"])
        h = T.relu(T.add(T.gather(proj, nj), T.linear(T.tensor(disp), w["w_disp"])))
        h = T.relu(T.linear(h, w["w1"], w["b1"]))
        h = T.relu(T.linear(h, w["w2"], w["b2"]))
        return T.tmax(T.gather(h, inverse.reshape(n, k)), axis=1)


class RofeModel:
    """Coarse scene-flow network; encoder weights are shared by both frames."""

    def __init__(self, hp: HyperParams = HyperParams(), seed: int = 0,
                 feature_mask=(True, True, True), zero_output: bool = True):
        if hp.n_scales != len(TABLE_RADII) or tuple(hp.radii) != TABLE_RADII:
            raise ConfigInvalidError(f"radii must be {TABLE_RADII}, got {hp.radii}")
        if hp.c_local != ENCODER_WIDTHS[-1] or hp.c_local != DECODER_WIDTHS[-1]:
            raise ConfigInvalidError(f"c_local must be {ENCODER_WIDTHS[-1]}, got {hp.c_local}")
        if hp.c_cor != COST_WIDTHS[-1]:
            raise ConfigInvalidError(f"c_cor must be {COST_WIDTHS[-1]}, got {hp.c_cor}")
        self.hp = hp
        self.seed = int(seed)
        self.feature_mask = tuple(bool(f) for f in feature_mask)
        rng = np.random.default_rng(self.seed)
        enc_out = 2 * hp.n_scales * hp.c_local
        self.encoder_layers = [
            SetConvLayer(r, k, ENCODER_WIDTHS, N_CHANNELS).init(rng)
            for r, k in zip(hp.radii, ENCODER_SAMPLES)]
        c0, c1, c2 = COST_WIDTHS
        self.cost_weights = {
            "w_src": T.tensor(_glorot(rng, 2 * enc_out + 3, c0, (enc_out, c0)), True),
            "w_dst": T.tensor(_glorot(rng, 2 * enc_out + 3, c0, (enc_out, c0)), True),
            "w_disp": T.tensor(_glorot(rng, 2 * enc_out + 3, c0, (3, c0)), True),
            "b0": T.tensor(np.zeros(c0), True),
            "w1": T.tensor(_glorot(rng, c0, c1, (c0, c1)), True),
            "b1": T.tensor(np.zeros(c1), True),
            "w2": T.tensor(_glorot(rng, c1, c2, (c1, c2)), True),
            "b2": T.tensor(np.zeros(c2), True),
            "w_head": T.tensor(_glorot(rng, c2, 1, (c2, 1)), True),
            "b_head": T.tensor(np.zeros(1), True),
            "agg_w_cost": T.tensor(_glorot(rng, c2 + 3, COST_AGG_HIDDEN, (c2, COST_AGG_HIDDEN)), True),
            "agg_w_disp": T.tensor(_glorot(rng, c2 + 3, COST_AGG_HIDDEN, (3, COST_AGG_HIDDEN)), True),
            "agg_b0": T.tensor(np.zeros(COST_AGG_HIDDEN), True),
            "agg_w1": T.tensor(_glorot(rng, COST_AGG_HIDDEN, 1, (COST_AGG_HIDDEN, 1)), True),
            "agg_b1": T.tensor(np.zeros(1), True),
        }
        emb = hp.c_cor + enc_out + N_CHANNELS
        self.decoder_layers = [
            SetConvLayer(r, k, DECODER_WIDTHS, emb).init(rng)
            for r, k in zip(hp.radii, ENCODER_SAMPLES)]
        dec_out = 2 * hp.n_scales * hp.c_local
        widths = (dec_out,) + OUTPUT_WIDTHS
        self.output_weights = {}
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(OUTPUT_WIDTHS) - 1
            w = np.zeros((a, b)) if (last and zero_output) else _glorot(rng, a, b, (a, b))
            self.output_weights[f"w{i}"] = T.tensor(w, True)
            self.output_weights[f"b{i}"] = T.tensor(np.zeros(b), True)
        self._check_shapes()

    def _check_shapes(self):
        for layer in self.encoder_layers + self.decoder_layers:
            w = layer.weights
            got = (w["w_feat"].shape[1], w["w1"].shape[1], w["w2"].shape[1])
            if got != tuple(layer.mlp_widths):
                raise ConfigInvalidError(f"set conv widths {got} != {layer.mlp_widths}")
        for layer in self.encoder_layers:
            if layer.mlp_widths != ENCODER_WIDTHS:
                raise ConfigInvalidError("encoder widths differ from the fixed layout")
        for layer in self.decoder_layers:
            if layer.mlp_widths != DECODER_WIDTHS:
                raise ConfigInvalidError("decoder widths differ from the fixed layout")
        cw = self.cost_weights
        if (cw["w_src"].shape[1], cw["w1"].shape[1], cw["w2"].shape[1]) != COST_WIDTHS:
            raise ConfigInvalidError("cost volume widths differ from the fixed layout")
        out = tuple(self.output_weights[f"w{i}"].shape[1] for i in range(len(OUTPUT_WIDTHS)))
        if out != OUTPUT_WIDTHS:
            raise ConfigInvalidError("output widths differ from the fixed layout")

    # --- parameters ----------------------------------------------------------

    def named_parameters(self) -> dict:
        params = {}
        for i, layer in enumerate(self.encoder_layers):
            params.update({f"encoder.{i}.{k}": v for k, v in layer.weights.items()})
        params.update({f"cost.{k}": v for k, v in self.cost_weights.items()})
        for i, layer in enumerate(self.decoder_layers):
            params.update({f"decoder.{i}.{k}": v for k, v in layer.weights.items()})
        params.update({f"output.{k}": v for k, v in self.output_weights.items()})
        return params

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # --- forward ---------------------------------------------------------------

    def input_features(self, frame: RadarFrame) -> np.ndarray:
        """Normalized 6-channel input with disabled radar features zeroed."""
        x = frame.as_array() / INPUT_SCALE
        for j, on in enumerate(self.feature_mask):
            if not on:
                x[:, 3 + j] = 0.0
        return x

    def encode(self, frame: RadarFrame) -> T.Tensor:
        """Multi-scale local features plus the max-pooled global vector, (N, 512)."""
        pos = frame.positions
        feats = T.tensor(self.input_features(frame))
        local = [layer(pos, feats, ball_query(pos, pos, layer.radius, layer.sample_count))
                 for layer in self.encoder_layers]
        return _local_global(T.concat(local, axis=1))

    def cost_volume(self, src_frame, src_feats: T.Tensor, dst_frame, dst_feats: T.Tensor) -> T.Tensor:
        """Point-to-patch costs against the target, aggregated patch-to-patch over the source."""
        w = self.cost_weights
        x = src_frame.positions
        y = dst_frame.positions
        n = len(x)
        nbr_t, _ = knn(x, y, COST_SAMPLES)
        k = nbr_t.shape[1]
        center = np.repeat(np.arange(n)[:, None], k, axis=1)
        disp = (y[nbr_t] - x[:, None, :]) / COST_DISP_SCALE
        h = T.add(T.gather(T.linear(src_feats, w["w_src"], w["b0"]), center),
                  T.gather(T.linear(dst_feats, w["w_dst"]), nbr_t))
        h = T.leaky_relu(T.add(h, T.linear(T.tensor(disp), w["w_disp"])))
        h = T.leaky_relu(T.linear(h, w["w1"], w["b1"]))
        m = T.leaky_relu(T.linear(h, w["w2"], w["b2"]))  # (n, k, C)
        logits = T.reshape(T.linear(m, w["w_head"], w["b_head"]), (n, k))
        cost = _weighted_sum(m, T.softmax(logits, axis=1))

        nbr_s, _ = knn(x, x, COST_SAMPLES)
        ks = nbr_s.shape[1]
        disp_s = (x[nbr_s] - x[:, None, :]) / COST_DISP_SCALE
        a = T.add(T.gather(T.linear(cost, w["agg_w_cost"], w["agg_b0"]), nbr_s),
                  T.linear(T.tensor(disp_s), w["agg_w_disp"]))
        a = T.leaky_relu(a)
        logits_s = T.reshape(T.linear(a, w["agg_w1"], w["agg_b1"]), (n, ks))
        return _weighted_sum(T.gather(cost, nbr_s), T.softmax(logits_s, axis=1))

    def decode(self, src_frame: RadarFrame, H: T.Tensor, G_P: T.Tensor) -> T.Tensor:
        """Flow embedding -> multi-scale set conv -> output MLP, (N, 3)."""
        pos = src_frame.positions
        emb = T.concat([H, G_P, T.tensor(self.input_features(src_frame))], axis=1)
        local = [layer(pos, emb, ball_query(pos, pos, layer.radius, layer.sample_count))
                 for layer in self.decoder_layers]
        h = _local_global(T.concat(local, axis=1))
        w = self.output_weights
        last = len(OUTPUT_WIDTHS) - 1
        for i in range(last):
            h = T.relu(T.linear(h, w[f"w{i}"], w[f"b{i}"]))
        return T.linear(h, w[f"w{last}"], w[f"b{last}"])

    def __call__(self, pair: FramePair) -> T.Tensor:
        g_p = self.encode(pair.source)
        g_q = self.encode(pair.target)
        H = self.cost_volume(pair.source, g_p, pair.target, g_q)
        return self.decode(pair.source, H, g_p)

    forward = __call__

    # --- state -------------------------------------------------------------------

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        if set(state) != set(params):
            raise ConfigInvalidError("checkpoint parameter names do not match the model")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigInvalidError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def _local_global(local: T.Tensor) -> T.Tensor:
    n = local.shape[0]
    glob = T.reshape(T.tmax(local, axis=0), (1, local.shape[1]))
    return T.concat([local, T.gather(glob, np.zeros(n, dtype=int))], axis=1)


def _weighted_sum(values: T.Tensor, weights: T.Tensor) -> T.Tensor:
    """sum_k weights[n, k] * values[n, k, :]."""
    return T.tsum(T.mul(values, T.expand(weights, values.shape[2])), axis=1)


# --- checkpoint file -------------------------------------------------------------

def save_checkpoint(model: RofeModel, path, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, JSON header, then named float64 blobs (little endian)."""
    header = {
        "hyperparams": model.hp.to_dict(),
        "feature_mask": dict(zip(FEATURE_NAMES, model.feature_mask)),
        "seed": model.seed,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    params = model.named_parameters()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hb)), hb,
              struct.pack("<I", len(params))]
    for name, p in params.items():
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path):
    """Return ``(header, state)`` from a checkpoint file."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    header = json.loads(buf[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return header, state


def load_checkpoint(path) -> RofeModel:
    header, state = read_checkpoint(path)
    hp = HyperParams.from_dict(header["hyperparams"])
    mask = tuple(header["feature_mask"][n] for n in FEATURE_NAMES)
    model = RofeModel(hp, seed=header.get("seed", 0), feature_mask=mask)
    model.load_state_dict(state)
    return model
