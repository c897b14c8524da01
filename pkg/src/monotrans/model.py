"""Tiny transducer network with exact hand-written reverse-mode gradients.

The encoder is a stack of windowed affine + tanh layers (a 1-D convolution
written out explicitly) with stride-based subsampling on the first layer.
The prediction network embeds the last k labels and maps them through one
affine + tanh. The additive joint adds encoder and prediction vectors and
applies linear-tanh-linear-softmax.

Forward methods return (output, cache); `backward_and_accumulate` consumes
the caches and adds exact gradients into the ParamStore. Everything is
float64 and deterministic given parameters, inputs, and dropout seed.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

MAGIC = b"MTCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    V: int
    feat_dim: int
    context_k: int = 1
    enc_layers: int = 2
    enc_dim: int = 16
    enc_window: int = 3
    pred_dim: int = 8
    joint_dim: int = 16
    subsample: int = 1
    dropout: float = 0.1
    aux_middle_layer: int = 0
    aux_heads: bool = True

    def __post_init__(self):
        if min(self.V, self.feat_dim, self.enc_layers, self.enc_dim, self.pred_dim, self.joint_dim) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.context_k < 1:
            raise ValueError("context_k must be >= 1 (full-context history is out of scope)")
        if self.subsample < 1:
            raise ValueError("subsample must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0 <= self.aux_middle_layer < self.enc_layers:
            raise ValueError("aux_middle_layer out of range")

    @property
    def blank(self) -> int:
        return self.V

    @property
    def bos(self) -> int:
        # dedicated begin-of-sequence row in the history embedding table
        return self.V


@dataclass
class EncoderOutput:
    h: np.ndarray       # (T', enc_dim), last layer
    middle: np.ndarray  # (T', enc_dim), designated middle layer


class ParamStore:
    """Named dense float64 parameter tensors with matching gradient buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name}")
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self):
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.grads.values())))

    def scale_grads(self, factor: float):
        for g in self.grads.values():
            g *= factor

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def flat_grads(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])

    def set_flat_params(self, vec: np.ndarray):
        pos = 0
        for p in self.params.values():
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != vec.size:
            raise ValueError("flat vector size mismatch")

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name, p in self.params.items():
            other.add(name, p.copy())
        return other


def log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_backward(logp: np.ndarray, d_logp: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the logits of logp = logits - logsumexp(logits)."""
    return d_logp - np.exp(logp) * d_logp.sum(axis=-1, keepdims=True)


def frame_window(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Stack a window of frames around positions 0, stride, 2*stride, ...

    Zero padding of window//2 on both sides; output row t' flattens
    x[t'*stride - pad : t'*stride - pad + window]. T_out = ceil(T/stride).
    """
    T, D = x.shape
    pad = window // 2
    xp = np.zeros((T + 2 * pad, D))
    xp[pad : pad + T] = x
    T_out = -(-T // stride)
    out = np.empty((T_out, window * D))
    for j in range(T_out):
        out[j] = xp[j * stride : j * stride + window].ravel()
    return out


def frame_window_backward(d_framed: np.ndarray, T: int, D: int, window: int, stride: int) -> np.ndarray:
    pad = window // 2
    dxp = np.zeros((T + 2 * pad, D))
    for j in range(d_framed.shape[0]):
        dxp[j * stride : j * stride + window] += d_framed[j].reshape(window, D)
    return dxp[pad : pad + T]


@dataclass
class EncCache:
    T_in: int
    feat_dim: int
    framed: list          # per layer: framed input (T_l, window*D_in)
    tanh_out: list        # per layer: tanh output before dropout
    masks: list           # per layer: dropout mask or None
    outputs: list         # per layer: output actually fed forward


@dataclass
class PredCache:
    hist: tuple
    u: np.ndarray
    g: np.ndarray


@dataclass
class LatticeCache:
    pred: list            # PredCache per history slot
    G: np.ndarray         # (S+1, enc_dim)
    h: np.ndarray         # (T', enc_dim)
    HJ: np.ndarray        # (T', S+1, joint_dim)
    logp: np.ndarray      # (T', S+1, V+1)


@dataclass
class RowsCache:
    pred: list
    G: np.ndarray
    h: np.ndarray
    s_of_t: np.ndarray    # (T',) history slot used at each frame
    HJ: np.ndarray        # (T', joint_dim)
    logp: np.ndarray      # (T', V+1)


@dataclass
class AuxCache:
    head: str             # "final" or "middle"
    inp: np.ndarray
    logp: np.ndarray


class TransducerModel:
    def __init__(self, cfg: ModelConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0) -> "TransducerModel":
        rng = np.random.default_rng(seed)
        store = ParamStore()

        def dense(name, fan_in, shape):
            store.add(name, rng.normal(scale=1.0 / np.sqrt(fan_in), size=shape))

        d_in = cfg.feat_dim
        for i in range(cfg.enc_layers):
            dense(f"enc{i}_W", cfg.enc_window * d_in, (cfg.enc_window * d_in, cfg.enc_dim))
            store.add(f"enc{i}_b", np.zeros(cfg.enc_dim))
            d_in = cfg.enc_dim
        # rows 0..V-1 are label embeddings, row V is the begin-of-sequence embedding
        dense("emb", cfg.pred_dim, (cfg.V + 1, cfg.pred_dim))
        dense("pred_W", cfg.context_k * cfg.pred_dim, (cfg.context_k * cfg.pred_dim, cfg.enc_dim))
        store.add("pred_b", np.zeros(cfg.enc_dim))
        dense("joint_W1", cfg.enc_dim, (cfg.enc_dim, cfg.joint_dim))
        store.add("joint_b1", np.zeros(cfg.joint_dim))
        dense("joint_W2", cfg.joint_dim, (cfg.joint_dim, cfg.V + 1))
        store.add("joint_b2", np.zeros(cfg.V + 1))
        if cfg.aux_heads:
            for head in ("final", "middle"):
                dense(f"aux_{head}_W", cfg.enc_dim, (cfg.enc_dim, cfg.V + 1))
                store.add(f"aux_{head}_b", np.zeros(cfg.V + 1))
        return cls(cfg, store)

    # ------------------------------------------------------------------ encoder

    def encode(self, features: np.ndarray, train_mode: bool = False, dropout_seed: int = 0):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ValueError("features must be a non-empty (T, feat_dim) array")
        cfg = self.cfg
        rng = np.random.default_rng(dropout_seed) if train_mode and cfg.dropout > 0 else None
        framed, tanh_out, masks, outputs = [], [], [], []
        x = features
        for i in range(cfg.enc_layers):
            stride = cfg.subsample if i == 0 else 1
            F = frame_window(x, cfg.enc_window, stride)
            H = np.tanh(F @ self.store[f"enc{i}_W"] + self.store[f"enc{i}_b"])
            if rng is not None:
                mask = (rng.random(H.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
                out = H * mask
            else:
                mask, out = None, H
            framed.append(F)
            tanh_out.append(H)
            masks.append(mask)
            outputs.append(out)
            x = out
        cache = EncCache(features.shape[0], cfg.feat_dim, framed, tanh_out, masks, outputs)
        return EncoderOutput(h=outputs[-1], middle=outputs[cfg.aux_middle_layer]), cache

    def _encoder_backward(self, cache: EncCache, d_last: np.ndarray, d_middle: np.ndarray | None):
        cfg = self.cfg
        d_out = [np.zeros_like(o) for o in cache.outputs]
        d_out[-1] += d_last
        if d_middle is not None:
            d_out[cfg.aux_middle_layer] += d_middle
        for i in range(cfg.enc_layers - 1, -1, -1):
            d = d_out[i]
            if cache.masks[i] is not None:
                d = d * cache.masks[i]
            dA = d * (1.0 - cache.tanh_out[i] ** 2)
            self.store.grads[f"enc{i}_W"] += cache.framed[i].T @ dA
            self.store.grads[f"enc{i}_b"] += dA.sum(axis=0)
            if i > 0:
                dF = dA @ self.store[f"enc{i}_W"].T
                T_prev, D_prev = cache.outputs[i - 1].shape
                d_out[i - 1] += frame_window_backward(dF, T_prev, D_prev, cfg.enc_window, 1)

    # --------------------------------------------------------------- prediction

    def history_for(self, prefix, seed_history=()) -> tuple[int, ...]:
        """Last k labels of seed_history + prefix, left-padded with BOS."""
        k = self.cfg.context_k
        full = tuple(seed_history) + tuple(prefix)
        hist = full[-k:] if k <= len(full) else full
        return (self.cfg.bos,) * (k - len(hist)) + tuple(hist)

    def pred_g(self, hist: tuple[int, ...]):
        if len(hist) != self.cfg.context_k:
            raise ValueError("history must have exactly context_k entries (use history_for)")
        u = self.store["emb"][list(hist)].ravel()
        g = np.tanh(u @ self.store["pred_W"] + self.store["pred_b"])
        return g, PredCache(hist=tuple(hist), u=u, g=g)

    def _pred_backward(self, cache: PredCache, dg: np.ndarray):
        da = dg * (1.0 - cache.g**2)
        self.store.grads["pred_W"] += np.outer(cache.u, da)
        self.store.grads["pred_b"] += da
        du = self.store["pred_W"] @ da
        P = self.cfg.pred_dim
        for j, hid in enumerate(cache.hist):
            self.store.grads["emb"][hid] += du[j * P : (j + 1) * P]

    # -------------------------------------------------------------------- joint

    def _joint(self, Z: np.ndarray):
        HJ = np.tanh(Z @ self.store["joint_W1"] + self.store["joint_b1"])
        logp = log_softmax(HJ @ self.store["joint_W2"] + self.store["joint_b2"])
        return HJ, logp

    def _joint_backward(self, Z: np.ndarray, HJ: np.ndarray, logp: np.ndarray, d_logp: np.ndarray):
        """Returns dZ; accumulates joint parameter gradients."""
        cfg = self.cfg
        d_logits = log_softmax_backward(logp, d_logp)
        flat_logits = d_logits.reshape(-1, cfg.V + 1)
        flat_HJ = HJ.reshape(-1, cfg.joint_dim)
        self.store.grads["joint_W2"] += flat_HJ.T @ flat_logits
        self.store.grads["joint_b2"] += flat_logits.sum(axis=0)
        dHJ = d_logits @ self.store["joint_W2"].T
        dA1 = dHJ * (1.0 - HJ**2)
        flat_A1 = dA1.reshape(-1, cfg.joint_dim)
        self.store.grads["joint_W1"] += Z.reshape(-1, cfg.enc_dim).T @ flat_A1
        self.store.grads["joint_b1"] += flat_A1.sum(axis=0)
        return dA1 @ self.store["joint_W1"].T

    def joint_lattice(self, enc: EncoderOutput, target):
        """Dense (T', S+1, V+1) table of log P(output | history slot, frame)."""
        target = tuple(target)
        pred_caches, G_rows = [], []
        for s in range(len(target) + 1):
            g, pc = self.pred_g(self.history_for(target[:s]))
            pred_caches.append(pc)
            G_rows.append(g)
        G = np.stack(G_rows)
        Z = enc.h[:, None, :] + G[None, :, :]
        HJ, logp = self._joint(Z)
        return logp, LatticeCache(pred=pred_caches, G=G, h=enc.h, HJ=HJ, logp=logp)

    def _lattice_backward(self, cache: LatticeCache, d_logp: np.ndarray) -> np.ndarray:
        Z = cache.h[:, None, :] + cache.G[None, :, :]
        dZ = self._joint_backward(Z, cache.HJ, cache.logp, d_logp)
        dG = dZ.sum(axis=0)
        for s, pc in enumerate(cache.pred):
            self._pred_backward(pc, dG[s])
        return dZ.sum(axis=1)

    def alignment_rows(self, enc: EncoderOutput, align_frames, seed_history=()):
        """Per-frame output distributions along a fixed alignment.

        Row t conditions on the labels the alignment emits before frame t
        (seed_history supplies the labels preceding a chunk).
        """
        align_frames = tuple(align_frames)
        if len(align_frames) != enc.h.shape[0]:
            raise ValueError(f"alignment length {len(align_frames)} != encoder frames {enc.h.shape[0]}")
        blank = self.cfg.blank
        labels = tuple(f for f in align_frames if f != blank)
        pred_caches, G_rows = [], []
        for s in range(len(labels) + 1):
            g, pc = self.pred_g(self.history_for(labels[:s], seed_history))
            pred_caches.append(pc)
            G_rows.append(g)
        G = np.stack(G_rows)
        s_of_t = np.zeros(len(align_frames), dtype=int)
        s = 0
        for t, f in enumerate(align_frames):
            s_of_t[t] = s
            if f != blank:
                s += 1
        Z = enc.h + G[s_of_t]
        HJ, logp = self._joint(Z)
        return logp, RowsCache(pred=pred_caches, G=G, h=enc.h, s_of_t=s_of_t, HJ=HJ, logp=logp)

    def _rows_backward(self, cache: RowsCache, d_logp: np.ndarray) -> np.ndarray:
        Z = cache.h + cache.G[cache.s_of_t]
        dZ = self._joint_backward(Z, cache.HJ, cache.logp, d_logp)
        dG = np.zeros_like(cache.G)
        np.add.at(dG, cache.s_of_t, dZ)
        for s, pc in enumerate(cache.pred):
            self._pred_backward(pc, dG[s])
        return dZ

    # ---------------------------------------------------------------- aux heads

    def aux_logprobs(self, enc: EncoderOutput, head: str):
        if f"aux_{head}_W" not in self.store.params:
            raise KeyError(f"auxiliary head {head!r} not present in this model")
        inp = enc.h if head == "final" else enc.middle
        logp = log_softmax(inp @ self.store[f"aux_{head}_W"] + self.store[f"aux_{head}_b"])
        return logp, AuxCache(head=head, inp=inp, logp=logp)

    def _aux_backward(self, cache: AuxCache, d_logp: np.ndarray) -> np.ndarray:
        d_logits = log_softmax_backward(cache.logp, d_logp)
        self.store.grads[f"aux_{cache.head}_W"] += cache.inp.T @ d_logits
        self.store.grads[f"aux_{cache.head}_b"] += d_logits.sum(axis=0)
        return d_logits @ self.store[f"aux_{cache.head}_W"].T

    # ------------------------------------------------------------ ILM / decode

    def ilm_label_logprobs(self, hist) -> np.ndarray:
        """Label prior with the encoder contribution zeroed out.

        The joint is evaluated with h = 0, the blank entry dropped, and the
        remaining V entries renormalized in log space. Depends only on the
        label history, never on acoustic input.
        """
        g, _ = self.pred_g(self.history_for(hist))
        _, logp = self._joint(g[None, :])
        labels_only = logp[0, : self.cfg.V]
        return labels_only - np.logaddexp.reduce(labels_only)

    def step_logprobs(self, h_t: np.ndarray, hist) -> np.ndarray:
        """Decode-time output distribution for one frame and one history."""
        g, _ = self.pred_g(self.history_for(hist))
        _, logp = self._joint((h_t + g)[None, :])
        return logp[0]

    # ----------------------------------------------------------------- backward

    def backward_and_accumulate(
        self,
        enc_cache: EncCache,
        lattice=None,
        rows=None,
        aux_final=None,
        aux_middle=None,
    ):
        """Accumulate exact gradients for any combination of consumers.

        Each argument is a (cache, upstream_gradient) pair from the matching
        forward call, or a list of such pairs sharing this encoding.
        """
        if enc_cache is None:
            raise ValueError("missing forward cache")

        def as_pairs(arg):
            if arg is None:
                return []
            return arg if isinstance(arg, list) else [arg]

        dh = np.zeros_like(enc_cache.outputs[-1])
        d_middle = np.zeros_like(enc_cache.outputs[self.cfg.aux_middle_layer])
        for cache, grad in as_pairs(lattice):
            dh += self._lattice_backward(cache, grad)
        for cache, grad in as_pairs(rows):
            dh += self._rows_backward(cache, grad)
        for cache, grad in as_pairs(aux_final):
            dh += self._aux_backward(cache, grad)
        for cache, grad in as_pairs(aux_middle):
            d_middle += self._aux_backward(cache, grad)
        self._encoder_backward(enc_cache, dh, d_middle)

    # -------------------------------------------------------------- checkpoints

    def save(self, path):
        save_checkpoint(path, "transducer", asdict(self.cfg), self.store)

    @classmethod
    def load(cls, path) -> "TransducerModel":
        kind, cfg_dict, store = load_checkpoint(path)
        if kind != "transducer":
            raise ValueError(f"checkpoint holds a {kind!r} model, not a transducer")
        return cls(ModelConfig(**cfg_dict), store)


def save_checkpoint(path, kind: str, cfg_dict: dict, store: ParamStore):
    """Versioned binary container: header (magic, version, config JSON), then
    named tensors as (name length, name, rank, dims, little-endian float64)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = json.dumps({"kind": kind, "config": cfg_dict}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(store.params)))
    for name, tensor in store.params.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", tensor.ndim))
        for d in tensor.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    view = io.BytesIO(data)
    if view.read(4) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", view.read(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", view.read(4))
    header = json.loads(view.read(hlen).decode())
    (count,) = struct.unpack("<I", view.read(4))
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", view.read(4))
        name = view.read(nlen).decode()
        (rank,) = struct.unpack("<I", view.read(4))
        dims = struct.unpack(f"<{rank}I", view.read(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        tensor = np.frombuffer(view.read(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
        store.add(name, tensor)
    return header["kind"], header["config"], store
