"""Dense-tensor reverse-mode automatic differentiation.

Design notes:

* Storage is dense row-major numpy arrays, no views or strides. Tensors are
  immutable after creation and safe to share read-only.
* A ``Tape`` records operation nodes in creation order, so the record is
  already topologically sorted; ``Tape.backward`` walks it once in reverse
  with a deterministic accumulation order.
* Precision is a global mode: float64 (default, required for finite-difference
  checks) or float32 (permitted for training speed). Switch with
  :func:`set_dtype` between runs, never mid-graph.
* All randomness goes through :func:`make_rng`, a Philox (counter-based,
  4x64) generator keyed by an explicit integer tuple, so parameter
  initialisation replays bit-identically for a given seed.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_DTYPE = np.float64


def set_dtype(name: str) -> None:
    """Select the global precision mode: 'float64' (test) or 'float32' (train)."""
    global _DTYPE
    if name not in ("float64", "float32"):
        raise ValueError(f"unsupported dtype mode {name!r}")
    _DTYPE = np.float64 if name == "float64" else np.float32


def get_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


def make_rng(*key: int) -> np.random.Generator:
    """Deterministic Philox generator keyed by an integer tuple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


# ---------------------------------------------------------------------------
# Graph machinery


class Tape:
    """Append-only record of operations for one backward pass.

    Node ids are indices into the record; every input of a node was recorded
    before the node itself, so reverse iteration is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], backward_fn: Callable) -> None:
        out.node_id = len(self.nodes)
        out.tape = self
        self.nodes.append((out, parents, backward_fn))

    def backward(self, loss: "Tensor") -> dict[int, "Tensor"]:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

        Returns a map from leaf id() to the gradient tensor. Raises
        ContractError if ``loss`` is not a scalar recorded on this tape.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaf_grads: dict[int, Tensor] = {}
        for idx in range(len(self.nodes) - 1, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            out, parents, backward_fn = self.nodes[idx]
            pgrads = backward_fn(g)
            for parent, pg in zip(parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.tape is self and parent.node_id >= 0:
                    pid = parent.node_id
                    if pid in grads:
                        grads[pid] = grads[pid] + pg
                    else:
                        grads[pid] = pg
                else:  # leaf (parameter or input created outside this tape)
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                    leaf_grads[id(parent)] = Tensor(parent.grad, requires_grad=False)
        # free saved activations promptly (reference cycles otherwise wait on GC)
        self.nodes.clear()
        return leaf_grads


_TAPE_STACK: list[Tape | None] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class no_grad:
    """Context manager that suspends graph recording (pure numpy forward)."""

    def __enter__(self):
        _TAPE_STACK.append(None)

    def __exit__(self, *exc):
        _TAPE_STACK.pop()


class Tensor:
    """Immutable dense tensor, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = -1
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Leaf copy that blocks gradient flow (used at TBPTT boundaries)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    needs = any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if tape is not None and needs:
        tape.record(out, parents, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with reverse-mode support."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        return (g @ bd.T if na else None, ad.T @ g if nb else None)

    return _record(ad @ bd, (a, b), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: [B,m,k] x [B,k,n] -> [B,m,n]."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        return (g @ bd.transpose(0, 2, 1) if na else None,
                ad.transpose(0, 2, 1) @ g if nb else None)

    return _record(ad @ bd, (a, b), backward)


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes (dense copy)."""
    if a.data.ndim < 2:
        raise DimensionError(f"transpose_last needs >=2 dims, got {a.shape}")
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]

    def backward(g):
        return (g.transpose(axes),)

    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _record(a.data.reshape(shape), (a,), backward)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis (dense copy, scatter on backward)."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _record(np.ascontiguousarray(a.data[idx]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    datas = [t.data for t in tensors]
    nd = datas[0].ndim
    for d in datas[1:]:
        if d.ndim != nd:
            raise DimensionError(f"concat rank mismatch: {[t.shape for t in tensors]}")
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for i in range(len(datas)):
            idx = [slice(None)] * nd
            idx[axis] = slice(offsets[i], offsets[i + 1])
            out.append(g[tuple(idx)])
        return tuple(out)

    return _record(np.concatenate(datas, axis=axis), tuple(tensors), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a trailing-shape bias of ``a``."""
    if a.shape != b.shape and a.shape[a.data.ndim - b.data.ndim:] != b.shape:
        raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}")
    lead = a.data.ndim - b.data.ndim
    lead_axes = tuple(range(lead)) if lead else None

    def backward(g):
        gb = g if lead_axes is None else g.sum(axis=lead_axes)
        return g, gb

    return _record(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes incompatible: {a.shape} - {b.shape}")

    def backward(g):
        return g, -g

    return _record(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes incompatible: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, g * ad

    return _record(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _record(a.data * c, (a,), backward)


def add_const(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g,)

    return _record(a.data + float(c), (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (out > 0),)

    return _record(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _record(np.log(ad), (a,), backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    mask = a.data > floor

    def backward(g):
        return (g * mask,)

    return _record(np.maximum(a.data, floor), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    d = a.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs last dim >= 2, got {a.shape}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def backward(g):
        gx = g * gd
        # d/dx of xhat with mean/var coupling, standard layer-norm backward
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(a.data.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(xhat * gd + bias.data, (a, gain, bias), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.data.size
        shape = a.shape

        def backward(g):
            return (np.full(shape, g / n, dtype=a.data.dtype),)

        return _record(np.asarray(a.data.mean()), (a,), backward)
    n = a.shape[axis]
    shape = a.shape

    def backward_axis(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), shape),)

    return _record(a.data.mean(axis=axis), (a,), backward_axis)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = a.shape

        def backward(g):
            return (np.full(shape, g, dtype=a.data.dtype),)

        return _record(np.asarray(a.data.sum()), (a,), backward)

    def backward_axis(g):
        return (np.repeat(np.expand_dims(g, axis), a.shape[axis], axis=axis),)

    return _record(a.data.sum(axis=axis), (a,), backward_axis)


def mean_pool_spatial(a: Tensor) -> Tensor:
    """Collapse every leading (spatial) axis by averaging: [..., C] -> [C]."""
    if a.data.ndim < 2:
        raise DimensionError(f"mean_pool_spatial needs >=2 dims, got {a.shape}")
    c = a.shape[-1]
    n = a.data.size // c
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record(a.data.reshape(n, c).mean(axis=0), (a,), backward)


def embed_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row gather from an embedding table; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"embed_lookup ids must be 1-D, got {idx.shape}")
    tshape = table.shape

    def backward(g):
        gt = np.zeros(tshape, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(table.data[idx], (table,), backward)


def tile_batch(a: Tensor, n: int) -> Tensor:
    """Repeat a tensor along a new leading batch axis; backward sums it away."""

    def backward(g):
        return (g.sum(axis=0),)

    return _record(np.broadcast_to(a.data, (n,) + a.shape).copy(), (a,), backward)


# ---------------------------------------------------------------------------
# Verification oracle


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|). ``f``
    must map a tensor to a scalar tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    probe = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    if y.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    tape.backward(y)
    analytic = probe.grad.reshape(-1).copy() if probe.grad is not None else np.zeros(x.data.size)

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + eps
            hi = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] = flat[i] - eps
            lo = f(Tensor(bumped.reshape(x.shape))).item()
            numeric[i] = (hi - lo) / (2.0 * eps)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


# ---------------------------------------------------------------------------
# Checkpoint serialisation (flat binary, versioned header)

CHECKPOINT_MAGIC = b"LNAVCKPT"
CHECKPOINT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays as a flat binary file with a JSON header."""
    entries = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        blob = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "entries": entries,
        "meta": meta or {},
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<QI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint written by :func:`save_tensors`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise OSError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<QI", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise OSError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode())
        body = fh.read()
    out = {}
    for e in header["entries"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return out, header.get("meta", {})
