"""Token-level reliability heads: a logistic probe and an attention head.

Both map one logit vector to the probability that its sentence is truthful.
Training minimizes mean binary cross-entropy plus ``weight_decay * ||theta||^2``
with hand-written gradients, so runs are bit-reproducible on a given platform.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from ._rng import substream
from .dataset import TokenExample, stack_examples
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger(__name__)

PCLAMP = 1e-6
LN_EPS = 1e-5
HEAD_MAGIC = b"MTREHEAD"
HEAD_VERSION = 1
OPTIMIZERS = ("sgd", "adam")
KINDS = ("probe", "attention")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 200
    batch_size: int = 32
    weight_decay: float = 1e-4
    dropout_rate: float = 0.1
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass(frozen=True)
class AttentionConfig:
    """Architecture of the attention head.

    ``seq_len`` splits the input vector into that many equal chunks which form
    the token axis seen by self-attention; 1 means the whole logit vector is a
    single position.
    """

    embed_dim: int = 512
    num_heads: int = 8
    num_layers: int = 3
    seq_len: int = 1

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1 or self.num_layers < 0 or self.seq_len < 1:
            raise ConfigError(f"invalid attention architecture {self}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")


def _clamp(p):
    return np.clip(p, PCLAMP, 1.0 - PCLAMP)


def _bce(p, y):
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


class _Head:
    kind = ""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.history: list[float] = []
        self.seed: int | None = None

    @property
    def vocab_size(self) -> int:
        raise NotImplementedError

    def hyperparameters(self) -> dict:
        return {}

    def copy(self):
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.history = list(self.history)
        return other

    def sq_norm(self) -> float:
        return float(sum(np.sum(v * v) for v in self.params.values()))

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.vocab_size:
            raise DataError(f"feature dimension {x.shape[-1]} does not match head input {self.vocab_size}")
        return x

    def logit(self, x, train=False, rng=None):
        raise NotImplementedError

    def predict_proba(self, x) -> np.ndarray:
        """Clamped probabilities for a batch (or single row) of logit vectors."""
        z, _ = self.logit(self._check_input(x))
        return _clamp(expit(z))

    def loss(self, x, y, lam: float) -> float:
        z, _ = self.logit(self._check_input(x))
        return _bce(_clamp(expit(z)), np.asarray(y, dtype=np.float64)) + lam * self.sq_norm()

    def loss_and_grad(self, x, y, lam: float, rng=None):
        """Loss and its exact gradient. Dropout is active iff ``rng`` is given."""
        x = self._check_input(x)
        y = np.asarray(y, dtype=np.float64)
        z, cache = self.logit(x, train=rng is not None, rng=rng)
        raw = expit(z)
        p = _clamp(raw)
        loss = _bce(p, y) + lam * self.sq_norm()
        # the clamp is flat outside [PCLAMP, 1 - PCLAMP]
        inside = (raw > PCLAMP) & (raw < 1.0 - PCLAMP)
        dz = np.where(inside, raw - y, 0.0) / x.shape[0]
        grads = self._backward(dz, cache)
        if lam:
            for k, v in self.params.items():
                grads[k] = grads[k] + 2.0 * lam * v
        return loss, grads


class LinearProbe(_Head):
    """Logistic regression on the raw logit vector."""

    kind = "probe"

    def __init__(self, weights, bias=0.0):
        super().__init__({"weights": np.asarray(weights, dtype=np.float64).reshape(-1),
                          "bias": np.asarray(bias, dtype=np.float64).reshape(())})

    @classmethod
    def zeros(cls, vocab_size: int) -> "LinearProbe":
        return cls(np.zeros(vocab_size), 0.0)

    @property
    def weights(self):
        return self.params["weights"]

    @property
    def bias(self) -> float:
        return float(self.params["bias"])

    @property
    def vocab_size(self) -> int:
        return self.params["weights"].shape[0]

    def logit(self, x, train=False, rng=None):
        return x @ self.params["weights"] + self.params["bias"], x

    def _backward(self, dz, x):
        return {"weights": x.T @ dz, "bias": np.asarray(dz.sum())}


def _layer_norm(r, g, b):
    mu = r.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(r.var(axis=-1, keepdims=True) + LN_EPS)
    xhat = (r - mu) * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dr = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dr, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def _dropout_mask(shape, rate, rng):
    if rng is None or rate == 0:
        return None
    return (rng.random(shape) >= rate) / (1.0 - rate)


class AttentionHead(_Head):
    """Input projection, stacked post-norm multi-head self-attention, mean pooling,
    two ReLU layers with dropout, and a linear output to one logit."""

    kind = "attention"

    def __init__(self, params, vocab_size: int, arch: AttentionConfig, dropout_rate: float = 0.0):
        super().__init__(params)
        self._vocab_size = int(vocab_size)
        self.arch = arch
        self.dropout_rate = float(dropout_rate)
        if vocab_size % arch.seq_len:
            raise ConfigError(f"vocab_size {vocab_size} not divisible by seq_len {arch.seq_len}")

    @property
    def vocab_size(self) -> int:
        return self._vocab_size

    def hyperparameters(self) -> dict:
        return {**asdict(self.arch), "dropout_rate": self.dropout_rate}

    @staticmethod
    def shapes(vocab_size: int, arch: AttentionConfig) -> dict[str, tuple]:
        e = arch.embed_dim
        shapes = {"w_in": (vocab_size // arch.seq_len, e), "b_in": (e,)}
        for l in range(arch.num_layers):
            for n in ("q", "k", "v", "o"):
                shapes[f"l{l}.w{n}"] = (e, e)
                shapes[f"l{l}.b{n}"] = (e,)
            shapes[f"l{l}.ln_g"] = (e,)
            shapes[f"l{l}.ln_b"] = (e,)
        shapes.update({"w1": (e, e), "b1": (e,), "w2": (e, e), "b2": (e,), "w_out": (e,), "b_out": ()})
        return shapes

    @classmethod
    def init(cls, vocab_size: int, arch: AttentionConfig, dropout_rate: float, rng) -> "AttentionHead":
        shapes = cls.shapes(vocab_size, arch)
        fan_in = {"w_in": vocab_size // arch.seq_len, "b_in": vocab_size // arch.seq_len}
        params = {}
        for name, shape in shapes.items():
            base = name.split(".")[-1]
            if base == "ln_g":
                params[name] = np.ones(shape)
            elif base == "ln_b":
                params[name] = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(fan_in.get(name, arch.embed_dim))
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(params, vocab_size, arch, dropout_rate)

    def _split(self, t):
        b, s, e = t.shape
        nh = self.arch.num_heads
        return t.reshape(b, s, nh, e // nh).transpose(0, 2, 1, 3)

    @staticmethod
    def _merge(t):
        b, nh, s, dh = t.shape
        return t.transpose(0, 2, 1, 3).reshape(b, s, nh * dh)

    def logit(self, x, train=False, rng=None):
        P = self.params
        rate = self.dropout_rate if train else 0.0
        b = x.shape[0]
        s = self.arch.seq_len
        dh = self.arch.embed_dim // self.arch.num_heads
        xs = x.reshape(b, s, -1)
        h = xs @ P["w_in"] + P["b_in"]
        layers = []
        for l in range(self.arch.num_layers):
            pre = f"l{l}."
            hin = h
            q = self._split(hin @ P[pre + "wq"] + P[pre + "bq"])
            k = self._split(hin @ P[pre + "wk"] + P[pre + "bk"])
            v = self._split(hin @ P[pre + "wv"] + P[pre + "bv"])
            scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
            scores -= scores.max(axis=-1, keepdims=True)
            a = np.exp(scores)
            a /= a.sum(axis=-1, keepdims=True)
            o = self._merge(a @ v)
            m = o @ P[pre + "wo"] + P[pre + "bo"]
            mask = _dropout_mask(m.shape, rate, rng)
            if mask is not None:
                m = m * mask
            h, ln_cache = _layer_norm(hin + m, P[pre + "ln_g"], P[pre + "ln_b"])
            layers.append((hin, q, k, v, a, o, mask, ln_cache))
        pooled = h.mean(axis=1)
        z1 = pooled @ P["w1"] + P["b1"]
        a1 = np.maximum(z1, 0.0)
        m1 = _dropout_mask(a1.shape, rate, rng)
        d1 = a1 if m1 is None else a1 * m1
        z2 = d1 @ P["w2"] + P["b2"]
        a2 = np.maximum(z2, 0.0)
        m2 = _dropout_mask(a2.shape, rate, rng)
        d2 = a2 if m2 is None else a2 * m2
        out = d2 @ P["w_out"] + P["b_out"]
        return out, (xs, layers, pooled, z1, m1, d1, z2, m2, d2)

    def _backward(self, dz, cache):
        P = self.params
        xs, layers, pooled, z1, m1, d1, z2, m2, d2 = cache
        dh_ = self.arch.embed_dim // self.arch.num_heads
        g = {"w_out": d2.T @ dz, "b_out": np.asarray(dz.sum())}
        dd2 = np.outer(dz, P["w_out"])
        dz2 = (dd2 if m2 is None else dd2 * m2) * (z2 > 0)
        g["w2"] = d1.T @ dz2
        g["b2"] = dz2.sum(axis=0)
        dd1 = dz2 @ P["w2"].T
        dz1 = (dd1 if m1 is None else dd1 * m1) * (z1 > 0)
        g["w1"] = pooled.T @ dz1
        g["b1"] = dz1.sum(axis=0)
        dpooled = dz1 @ P["w1"].T
        s = xs.shape[1]
        dh = np.repeat(dpooled[:, None, :] / s, s, axis=1)
        e = self.arch.embed_dim
        for l in reversed(range(self.arch.num_layers)):
            pre = f"l{l}."
            hin, q, k, v, a, o, mask, ln_cache = layers[l]
            dr, g[pre + "ln_g"], g[pre + "ln_b"] = _layer_norm_backward(dh, P[pre + "ln_g"], ln_cache)
            dm = dr if mask is None else dr * mask
            g[pre + "wo"] = o.reshape(-1, e).T @ dm.reshape(-1, e)
            g[pre + "bo"] = dm.reshape(-1, e).sum(axis=0)
            do = self._split(dm @ P[pre + "wo"].T)
            da = do @ v.transpose(0, 1, 3, 2)
            dv = a.transpose(0, 1, 3, 2) @ do
            ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) / np.sqrt(dh_)
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            dhin = dr.copy()
            flat_in = hin.reshape(-1, e)
            for n, dt in (("q", dq), ("k", dk), ("v", dv)):
                dt = self._merge(dt)
                g[pre + "w" + n] = flat_in.T @ dt.reshape(-1, e)
                g[pre + "b" + n] = dt.reshape(-1, e).sum(axis=0)
                dhin += dt @ P[pre + "w" + n].T
            dh = dhin
        g["w_in"] = xs.reshape(-1, xs.shape[2]).T @ dh.reshape(-1, e)
        g["b_in"] = dh.reshape(-1, e).sum(axis=0)
        return g


def init_head(kind: str, vocab_size: int, config: TrainConfig, arch: AttentionConfig | None = None):
    """Seeded initial parameters: zeros for the probe, uniform fan-in scaling for attention."""
    if kind == "probe":
        return LinearProbe.zeros(vocab_size)
    if kind == "attention":
        return AttentionHead.init(vocab_size, arch or AttentionConfig(), config.dropout_rate,
                                  substream(config.seed, "init"))
    raise ConfigError(f"unknown head kind {kind!r}; expected one of {KINDS}")


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class _SGD:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] = params[k] - self.lr * g


def train_reliability_head(
    examples: Sequence[TokenExample],
    config: TrainConfig = TrainConfig(),
    kind: str = "attention",
    arch: AttentionConfig | None = None,
):
    """Train a head for exactly ``config.epochs`` passes over ``examples``.

    Returns the head; its ``history`` holds the mean training loss of each epoch.
    """
    if not len(examples):
        raise DataError("cannot train on an empty example sequence")
    x, y = stack_examples(examples)
    head = init_head(kind, x.shape[1], config, arch)
    head.seed = config.seed
    opt = (_Adam if config.optimizer == "adam" else _SGD)(head.params, config.learning_rate)
    order_rng = substream(config.seed, "batches")
    drop_rng = substream(config.seed, "dropout") if kind == "attention" and config.dropout_rate > 0 else None
    n = x.shape[0]
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        losses = []
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            loss, grads = head.loss_and_grad(x[idx], y[idx], config.weight_decay, rng=drop_rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}")
            opt.step(head.params, grads)
            if not all(np.isfinite(v).all() for v in head.params.values()):
                raise NumericError(f"non-finite parameters at epoch {epoch + 1}, batch {bi + 1}")
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        head.history.append(mean_loss)
        log.debug("epoch %d/%d loss %.6f", epoch + 1, config.epochs, mean_loss)
    return head


def predict_token(head, features) -> float:
    """Reliability probability of one logit vector, strictly inside (0, 1)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1:
        raise DataError("predict_token expects a single feature vector")
    if not np.isfinite(features).all():
        raise DataError("features must be finite")
    return float(head.predict_proba(features)[0])


def loss(head, batch: Sequence[TokenExample], lam: float) -> float:
    """Mean clamped BCE over ``batch`` plus ``lam`` times the squared parameter norm."""
    if not len(batch):
        raise DataError("loss of an empty batch")
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    x, y = stack_examples(batch)
    return head.loss(x, y, lam)


def save_head(head, path) -> None:
    """Binary head file: magic, version, JSON header length, JSON header, float32 LE blocks."""
    header = {
        "kind": head.kind,
        "vocab_size": head.vocab_size,
        "hyperparameters": head.hyperparameters(),
        "seed": getattr(head, "seed", None),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in head.params.items()],
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(HEAD_MAGIC)
        fh.write(struct.pack("<II", HEAD_VERSION, len(raw)))
        fh.write(raw)
        for v in head.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_head(path, vocab_size: int | None = None):
    data = Path(path).read_bytes()
    if data[:8] != HEAD_MAGIC:
        raise DataError(f"{path}: not a head file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != HEAD_VERSION:
        raise DataError(f"{path}: unsupported head version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if vocab_size is not None and header["vocab_size"] != vocab_size:
        raise DataError(f"{path}: head input dimension {header['vocab_size']} != dataset vocab_size {vocab_size}")
    offset = 16 + hlen
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        block = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        params[entry["name"]] = block.astype(np.float64).reshape(entry["shape"])
        offset += 4 * count
    if offset != len(data):
        raise DataError(f"{path}: {len(data) - offset} trailing bytes after parameter blocks")
    if header["kind"] == "probe":
        head = LinearProbe(params["weights"], params["bias"])
    elif header["kind"] == "attention":
        hp = dict(header["hyperparameters"])
        rate = hp.pop("dropout_rate", 0.0)
        arch = AttentionConfig(**hp)
        expected = AttentionHead.shapes(header["vocab_size"], arch)
        if {k: tuple(v.shape) for k, v in params.items()} != expected:
            raise DataError(f"{path}: parameter shapes do not match the declared architecture")
        head = AttentionHead(params, header["vocab_size"], arch, rate)
    else:
        raise DataError(f"{path}: unknown head kind {header['kind']!r}")
    head.seed = header.get("seed")
    return head
