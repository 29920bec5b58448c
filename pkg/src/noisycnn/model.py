"""Kim-style text CNN with a stacked softmax noise layer.

The base network maps a sentence to class probabilities p. The noise layer
turns those into noisy-label probabilities softmax(psi @ p); psi multiplies
the probability vector itself, not the logits. At test time the noise layer
is dropped and predictions come from p alone.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .ndcore import GradTape, Var, softmax
from .noisegen import TransitionMatrix

INIT_MODES = ("identity_gain", "true_distribution", "random")
LOG_FLOOR = 1e-12


@dataclass
class ModelConfig:
    k: int
    vocab_size: int
    t_fixed: int
    d: int = 32
    windows: tuple[int, ...] = (3, 4, 5)
    feature_maps: int = 16
    dropout_keep: float = 0.5
    lam: float = 0.01
    noise_layer: bool = True
    init_mode: str = "identity_gain"
    gain: float | None = None  # None means gain = k

    def __post_init__(self):
        self.windows = tuple(int(w) for w in self.windows)
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must lie in (0, 1]")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.gain is not None and self.init_mode == "identity_gain" and self.gain <= 0:
            raise ValueError("gain must be positive")
        if not self.windows or max(self.windows) > self.t_fixed:
            raise ValueError("every window must fit inside t_fixed")

    @property
    def n_features(self) -> int:
        return self.feature_maps * len(self.windows)

    @property
    def effective_gain(self) -> float:
        return float(self.k if self.gain is None else self.gain)


def glorot(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def init_base_params(cfg: ModelConfig, embedding: np.ndarray, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if embedding.shape != (cfg.vocab_size, cfg.d):
        raise ValueError(f"embedding shape {embedding.shape} != ({cfg.vocab_size}, {cfg.d})")
    params = {"embed": np.array(embedding, dtype=np.float64)}
    for w in cfg.windows:
        params[f"conv{w}.W"] = glorot(rng, (cfg.feature_maps, cfg.d, w), cfg.d * w, cfg.feature_maps)
        params[f"conv{w}.b"] = np.zeros(cfg.feature_maps)
    params["dense.W"] = glorot(rng, (cfg.k, cfg.n_features), cfg.n_features, cfg.k)
    params["dense.b"] = np.zeros(cfg.k)
    return params


def init_noise_layer(k, mode="identity_gain", gain=None, phi: TransitionMatrix | None = None, rng=None) -> np.ndarray:
    """Initial psi for the noise layer.

    identity_gain: gain * I (gain defaults to k).
    true_distribution: elementwise log(phi + 1e-12), so softmax(psi @ e_j) = phi[:, j].
    random: Uniform(-1/k, 1/k).
    """
    if mode == "identity_gain":
        g = float(k if gain is None else gain)
        if g <= 0:
            raise ValueError("gain must be positive")
        return g * np.eye(k)
    if mode == "true_distribution":
        if phi is None:
            raise ValueError("true_distribution init needs the injected transition matrix")
        if phi.k != k:
            raise ValueError(f"transition matrix has {phi.k} classes, expected {k}")
        return np.log(phi.phi + LOG_FLOOR)
    if mode == "random":
        if rng is None:
            raise ValueError("random init needs an rng")
        return rng.uniform(-1.0 / k, 1.0 / k, size=(k, k))
    raise ValueError(f"unknown init mode {mode!r}")


# --------------------------------------------------------------- forward

@dataclass
class Graph:
    tape: GradTape
    leaves: dict[str, Var]
    pooled: Var
    logits: Var
    base: Var
    noisy: Var | None = None
    loss: Var | None = None


def _as_batch(tokens, cfg):
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] != cfg.t_fixed:
        raise ValueError(f"sentence length {tokens.shape[-1]} != t_fixed {cfg.t_fixed}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError("token index outside the vocabulary")
    return tokens, single


def build_graph(tokens, params, cfg: ModelConfig, train=False, rng=None, record=False,
                targets=None, psi=None, lam=None) -> Graph:
    """Run the network on a (B, T) batch through a tape.

    With `targets`, appends the mean cross-entropy (through the noise layer
    if `psi` is given) and, for psi, the (lam/2) ||psi||_F^2 penalty.
    """
    tape = GradTape(record=record)
    leaves = {name: tape.leaf(v) for name, v in params.items()}
    X = tape.transpose_last(tape.gather(leaves["embed"], tokens))  # (B, d, T)
    pooled = []
    for w in cfg.windows:
        fm = tape.conv(X, leaves[f"conv{w}.W"], leaves[f"conv{w}.b"])
        pooled.append(tape.max_over_time(tape.relu(fm)))
    h = tape.concat(pooled)
    hd = tape.dropout(h, cfg.dropout_keep, rng, train)
    logits = tape.affine(hd, leaves["dense.W"], leaves["dense.b"])
    base = tape.softmax(logits)
    g = Graph(tape, leaves, h, logits, base)
    out = base
    if psi is not None:
        leaves["noise.psi"] = tape.leaf(psi)
        g.noisy = out = tape.softmax(tape.matvec(leaves["noise.psi"], base))
    if targets is not None:
        g.loss = tape.cross_entropy(out, targets)
        if psi is not None and lam:
            g.loss = tape.add(g.loss, tape.half_sq_norm(leaves["noise.psi"], lam))
    return g


def forward_base(tokens, params, cfg, train=False, rng=None) -> np.ndarray:
    batch, single = _as_batch(tokens, cfg)
    p = build_graph(batch, params, cfg, train, rng).base.value
    return p[0] if single else p


def forward_noisy(tokens, params, psi, cfg, train=False, rng=None) -> np.ndarray:
    batch, single = _as_batch(tokens, cfg)
    p = build_graph(batch, params, cfg, train, rng, psi=psi).noisy.value
    return p[0] if single else p


def noisy_from_base(psi, base_probs) -> np.ndarray:
    """softmax(psi @ p) for a probability vector p (or rows of a batch)."""
    return softmax(np.asarray(base_probs, dtype=np.float64) @ np.asarray(psi, dtype=np.float64).T)


def loss_and_grads(tokens, targets, params, cfg, psi=None, lam=0.0, rng=None, train=True):
    """Mean noisy-label cross-entropy plus (lam/2)||psi||_F^2, with gradients.

    `psi=None` trains the base network directly on `targets`. Returns
    (loss, grads) where grads has one entry per parameter (and "noise.psi").
    """
    batch, _ = _as_batch(tokens, cfg)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if len(batch) == 0:
        raise ValueError("empty batch")
    if targets.shape[0] != len(batch):
        raise ValueError("targets misaligned with batch (missing noisy labels?)")
    g = build_graph(batch, params, cfg, train, rng, record=True, targets=targets, psi=psi, lam=lam)
    g.tape.backward(g.loss)
    grads = {}
    for name, leaf in g.leaves.items():
        grads[name] = np.zeros_like(leaf.value) if leaf.grad is None else leaf.grad
    return float(g.loss.value), grads


def predict_clean(tokens, params, cfg) -> np.ndarray:
    """Argmax of the base network in evaluation mode (ties to the lowest class)."""
    p = forward_base(tokens, params, cfg, train=False)
    return np.argmax(p, axis=-1)


def marginalize_reference(phi: TransitionMatrix, base_probs) -> np.ndarray:
    """Exact class-conditional marginal phi @ p of the noisy label."""
    p = np.asarray(base_probs, dtype=np.float64)
    if p.shape[-1] != phi.k:
        raise ValueError(f"probability vector has {p.shape[-1]} entries, expected {phi.k}")
    return p @ phi.phi.T


def response_matrix(psi) -> np.ndarray:
    """Column j is softmax(psi @ e_j): the noisy distribution for a confident class-j base output."""
    psi = np.asarray(psi, dtype=np.float64)
    return softmax(psi.T).T


# ------------------------------------------------------------ checkpoint

MAGIC = b"NOISYCNN-CKPT\x00v1\n"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    psi: np.ndarray | None = None
    vocab: dict[str, int] = field(default_factory=dict)
    label_names: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "config": asdict(ckpt.config),
        "vocab": ckpt.vocab,
        "label_names": ckpt.label_names,
        "meta": ckpt.meta,
    }
    blocks = dict(ckpt.params)
    if ckpt.psi is not None:
        blocks["noise.psi"] = ckpt.psi
    buf = io.BytesIO()
    buf.write(MAGIC)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(hb)))
    buf.write(hb)
    buf.write(struct.pack("<I", len(blocks)))
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f8")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (hlen,) = take("<Q")
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (nblocks,) = take("<I")
    blocks = {}
    for _ in range(nblocks):
        (nlen,) = take("<H")
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}Q")
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
        blocks[name] = arr
    cfg = ModelConfig(**header["config"])
    psi = blocks.pop("noise.psi", None)
    return Checkpoint(cfg, blocks, psi, header["vocab"], header["label_names"], header.get("meta", {}))
