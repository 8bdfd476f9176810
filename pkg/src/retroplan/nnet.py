"""Two-layer ELU MLP with hand-written gradients, Adam, and checkpoints.

Inputs may be dense arrays or scipy CSR matrices; fingerprints are ~2%
dense so the sparse path is what planning and training use.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEADS = ("logits", "sigmoid", "softplus")
LOSSES = ("ce", "masked-ce", "bce", "mse")
PARAM_NAMES = ("W1", "b1", "W2", "b2")

_MAGIC = b"RPMLP\x00\x01\x00"
_HEADER = struct.Struct("<IIIIdQ")  # in_dim, hidden, out_dim, head index, dropout, seed


class CheckpointError(ValueError):
    pass


def elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_softmax(z: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise log-softmax; entries outside ``mask`` become ``-inf``."""
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    lse = zmax + np.log(np.sum(np.exp(z - zmax), axis=-1, keepdims=True))
    return z - lse


class Mlp:
    """``in_dim -> hidden (ELU, dropout) -> out_dim (head)``."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, head: str = "logits",
                 dropout: float = 0.1, seed: int = 0, init: bool = True):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.head = head
        self.dropout = dropout
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        if init:
            # uniform He-style fan-in scaling
            init_rng = np.random.default_rng([seed, 0x5EED])
            lim1 = np.sqrt(6.0 / in_dim)
            lim2 = np.sqrt(6.0 / hidden)
            self.params = {
                "W1": init_rng.uniform(-lim1, lim1, size=(in_dim, hidden)),
                "b1": np.zeros(hidden),
                "W2": init_rng.uniform(-lim2, lim2, size=(hidden, out_dim)),
                "b2": np.zeros(out_dim),
            }

    def copy(self) -> "Mlp":
        other = Mlp(self.in_dim, self.hidden, self.out_dim, self.head, self.dropout, self.seed, init=False)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.rng = copy.deepcopy(self.rng)
        return other

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def _check_input(self, x) -> None:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (n, {self.in_dim}), got {x.shape}")
        if x.shape[0] == 0:
            raise ValueError("empty batch")

    def _forward(self, x, train_mode: bool):
        p = self.params
        z1 = np.asarray(x @ p["W1"]) + p["b1"]
        h = elu(z1)
        keep = None
        if train_mode and self.dropout > 0:
            keep = (self.rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
            h = h * keep
        z2 = h @ p["W2"] + p["b2"]
        return z1, h, keep, z2

    def activate(self, z2: np.ndarray) -> np.ndarray:
        if self.head == "sigmoid":
            return sigmoid(z2)
        if self.head == "softplus":
            return softplus(z2)
        return z2

    def forward(self, x, train_mode: bool = False) -> np.ndarray:
        """Head outputs (raw logits for the softmax head), shape ``(n, out_dim)``."""
        self._check_input(x)
        return self.activate(self._forward(x, train_mode)[3])

    def __call__(self, x) -> np.ndarray:
        return self.forward(x, train_mode=False)

    def backward(self, x, targets, loss: str, mask: np.ndarray | None = None,
                 train_mode: bool = True) -> tuple[float, dict[str, np.ndarray]]:
        """Mean loss over the batch and its gradient for every parameter.

        ``ce``/``masked-ce`` take integer class targets (the latter with a
        boolean ``mask`` of allowed classes per row); ``bce`` takes targets in
        [0, 1] against a sigmoid head; ``mse`` compares the head output.
        """
        self._check_input(x)
        n = x.shape[0]
        z1, h, keep, z2 = self._forward(x, train_mode)
        if loss in ("ce", "masked-ce"):
            if self.head != "logits":
                raise ValueError(f"{loss} needs a logits head")
            t = np.asarray(targets, dtype=np.int64)
            if loss == "masked-ce":
                if mask is None or mask.shape != z2.shape:
                    raise ValueError("masked-ce needs a boolean mask shaped like the output")
                if not np.all(mask[np.arange(n), t]):
                    raise ValueError("masked-ce target outside its mask")
            logp = log_softmax(z2, mask if loss == "masked-ce" else None)
            value = -float(np.mean(logp[np.arange(n), t]))
            dz2 = np.exp(logp)
            dz2[np.arange(n), t] -= 1.0
            dz2 /= n
        elif loss == "bce":
            if self.head != "sigmoid":
                raise ValueError("bce needs a sigmoid head")
            t = np.asarray(targets, dtype=np.float64).reshape(z2.shape)
            if np.any(t < 0) or np.any(t > 1):
                raise ValueError("bce targets must lie in [0, 1]")
            value = float(np.mean(softplus(z2) - t * z2))
            dz2 = (sigmoid(z2) - t) / z2.size
        elif loss == "mse":
            t = np.asarray(targets, dtype=np.float64).reshape(z2.shape)
            y = self.activate(z2)
            diff = y - t
            value = float(np.mean(diff * diff))
            dy = 2.0 * diff / diff.size
            if self.head == "sigmoid":
                dz2 = dy * y * (1.0 - y)
            elif self.head == "softplus":
                dz2 = dy * sigmoid(z2)
            else:
                dz2 = dy
        else:
            raise ValueError(f"unknown loss {loss!r}")

        p = self.params
        grads = {"W2": h.T @ dz2, "b2": dz2.sum(axis=0)}
        dh = dz2 @ p["W2"].T
        if keep is not None:
            dh = dh * keep
        dz1 = dh * elu_grad(z1)
        grads["W1"] = np.asarray(x.T @ dz1)
        grads["b1"] = dz1.sum(axis=0)
        return value, grads

    def loss(self, x, targets, loss: str, mask: np.ndarray | None = None) -> float:
        return self.backward(x, targets, loss, mask, train_mode=False)[0]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_net(cls, net: Mlp, lr: float = 1e-3) -> "AdamState":
        return cls(lr=lr, m={k: np.zeros_like(v) for k, v in net.params.items()},
                   v={k: np.zeros_like(v) for k, v in net.params.items()})


def adam_step(net: Mlp, state: AdamState, grads: dict[str, np.ndarray]) -> None:
    """In-place bias-corrected Adam update of ``net.params``."""
    for k, g in grads.items():
        if g.shape != net.params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        tmp = np.empty_like(g)
        m *= state.beta1
        np.multiply(g, 1.0 - state.beta1, out=tmp)
        m += tmp
        v *= state.beta2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - state.beta2
        v += tmp
        # p -= lr/bc1 * m / (sqrt(v/bc2) + eps), without temporaries per term
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(bc2)
        tmp += state.eps
        np.divide(m, tmp, out=tmp)
        tmp *= state.lr / bc1
        net.params[k] -= tmp


def grad_check(net: Mlp, x, targets, loss: str, trials: int = 100, mask=None,
               h: float = 1e-5, seed: int = 0, grads: dict[str, np.ndarray] | None = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Runs in eval mode (no dropout).  ``grads`` overrides the analytic
    gradient, which is how the checker is itself tested.
    """
    if trials < 1 or net.n_params == 0:
        raise ValueError("grad_check needs at least one trial and one parameter")
    if grads is None:
        _, grads = net.backward(x, targets, loss, mask, train_mode=False)
    rng = np.random.default_rng(seed)
    names = [k for k in PARAM_NAMES if k in net.params]
    sizes = np.array([net.params[k].size for k in names], dtype=float)
    worst = 0.0
    for _ in range(trials):
        k = names[rng.choice(len(names), p=sizes / sizes.sum())]
        flat = net.params[k].reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + h
        up = net.loss(x, targets, loss, mask)
        flat[i] = orig - h
        down = net.loss(x, targets, loss, mask)
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        analytic = grads[k].reshape(-1)[i]
        denom = max(abs(analytic), abs(numeric))
        if denom > 1e-10:
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# ---- checkpoints ------------------------------------------------------------


def dumps(net: Mlp) -> bytes:
    body = bytearray(_MAGIC)
    body += _HEADER.pack(net.in_dim, net.hidden, net.out_dim, HEADS.index(net.head), net.dropout, net.seed)
    for k in PARAM_NAMES:
        body += np.ascontiguousarray(net.params[k], dtype="<f8").tobytes()
    return bytes(body) + hashlib.sha256(body).digest()


def loads(blob: bytes) -> Mlp:
    if len(blob) < len(_MAGIC) + _HEADER.size + 32 or not blob.startswith(_MAGIC):
        raise CheckpointError("not a network checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    in_dim, hidden, out_dim, head, dropout, seed = _HEADER.unpack_from(body, len(_MAGIC))
    net = Mlp(in_dim, hidden, out_dim, HEADS[head], dropout, seed, init=False)
    shapes = {"W1": (in_dim, hidden), "b1": (hidden,), "W2": (hidden, out_dim), "b2": (out_dim,)}
    off = len(_MAGIC) + _HEADER.size
    for k in PARAM_NAMES:
        count = int(np.prod(shapes[k]))
        net.params[k] = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shapes[k]).astype(np.float64)
        off += 8 * count
    if off != len(body):
        raise CheckpointError("checkpoint size does not match its header")
    return net


def save(net: Mlp, path) -> None:
    Path(path).write_bytes(dumps(net))


def load(path) -> Mlp:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)


BUNDLE_FILES = {"reference": "reference.mlp", "learnable": "learnable.mlp",
                "vsyn": "vsyn.mlp", "vcost": "vcost.mlp", "vsingle": "vsingle.mlp"}


def save_bundle(nets: dict[str, Mlp], directory, meta: dict | None = None) -> None:
    """Write each network plus ``manifest.json`` (file names and sha256 digests)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "retroplan-bundle-v1", "networks": {}, "meta": meta or {}}
    for name, net in sorted(nets.items()):
        blob = dumps(net)
        fname = BUNDLE_FILES.get(name, f"{name}.mlp")
        (d / fname).write_bytes(blob)
        manifest["networks"][name] = {"file": fname, "sha256": hashlib.sha256(blob).hexdigest()}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_bundle(directory) -> tuple[dict[str, Mlp], dict]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"missing or unreadable manifest in {d}: {exc}") from exc
    nets = {}
    for name, entry in manifest["networks"].items():
        blob = (d / entry["file"]).read_bytes() if (d / entry["file"]).exists() else b""
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"checksum failure for {name} in {d}")
        nets[name] = loads(blob)
    return nets, manifest.get("meta", {})
