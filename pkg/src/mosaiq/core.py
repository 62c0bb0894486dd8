"""Dense-array substrate: checked ops, tape/backward, Adam with warmup, seeded RNG.

Arrays are ``torch.Tensor`` objects (float32 unless a test promotes to float64).
Every op validates shapes up front and rejects non-finite results, so a bad
value is caught at the op that produced it rather than three stages later.
"""

from __future__ import annotations

import contextvars
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32
NEG_LARGE = -1e30  # finite stand-in for -inf in log space and masking


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _shapes(*xs) -> str:
    return ", ".join(str(tuple(x.shape)) for x in xs)


def _reject(op: str, msg: str, *xs):
    raise ShapeError(f"{op}: {msg} (shapes {_shapes(*xs)})")


_CHECKS: contextvars.ContextVar[bool] = contextvars.ContextVar("checks", default=True)


class per_op_checks:
    """Scope inside which per-op finiteness checks are on (default) or off.

    Training loops switch them off and check the loss instead; a NaN or Inf
    anywhere upstream still surfaces there.
    """

    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        self._token = _CHECKS.set(self.enabled)
        return self

    def __exit__(self, *exc):
        _CHECKS.reset(self._token)
        return False


def check_finite(op: str, out: torch.Tensor, force: bool = False) -> torch.Tensor:
    if not (force or _CHECKS.get()):
        return out
    if out.is_floating_point() and not bool(torch.isfinite(out).all()):
        raise NonFiniteError(f"{op}: non-finite output (shape {tuple(out.shape)})")
    return out


# --------------------------------------------------------------------------- #
# tape

@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    output: torch.Tensor


class Graph:
    """Op tape plus named leaves.

    Ops executed inside ``with graph:`` are appended to ``nodes``; leaves are
    registered with :meth:`parameter` and carry a trainable flag.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, torch.Tensor] = {}
        self.trainable: dict[str, bool] = {}
        self._ids: dict[int, int] = {}
        self._token = None

    def parameter(self, name: str, value, trainable: bool = True) -> torch.Tensor:
        t = torch.as_tensor(value, dtype=DTYPE if not torch.is_tensor(value) else value.dtype)
        t = t.detach().clone().requires_grad_(trainable)
        self.parameters[name] = t
        self.trainable[name] = trainable
        return t

    def _node_id(self, t: torch.Tensor) -> int:
        return self._ids.get(id(t), -1)

    def record(self, kind: str, inputs: Sequence, out: torch.Tensor):
        ids = tuple(self._node_id(x) for x in inputs if torch.is_tensor(x))
        self._ids[id(out)] = len(self.nodes)
        self.nodes.append(Node(kind, ids, out))

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        return False


_ACTIVE: contextvars.ContextVar[Graph | None] = contextvars.ContextVar("graph", default=None)


def _done(kind: str, inputs: Sequence, out: torch.Tensor) -> torch.Tensor:
    check_finite(kind, out)
    g = _ACTIVE.get()
    if g is not None:
        g.record(kind, inputs, out)
    return out


# --------------------------------------------------------------------------- #
# ops

def matmul(a, b):
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        _reject("matmul", "inner dimensions differ", a, b)
    return _done("matmul", (a, b), a @ b)


def _broadcast(op, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _reject(op, "not broadcastable", a, b)


def add(a, b):
    _broadcast("add", a, b)
    return _done("add", (a, b), a + b)


def multiply(a, b):
    _broadcast("multiply", a, b)
    return _done("multiply", (a, b), a * b)


def transpose(x, dim0: int = -2, dim1: int = -1):
    if x.dim() < 2:
        _reject("transpose", "needs rank >= 2", x)
    return _done("transpose", (x,), x.transpose(dim0, dim1))


def concat(xs: Sequence[torch.Tensor], axis: int = 0):
    ref = xs[0]
    for x in xs[1:]:
        if x.dim() != ref.dim() or any(
            s != r for k, (s, r) in enumerate(zip(x.shape, ref.shape)) if k != axis % ref.dim()
        ):
            _reject("concat", f"extents differ off axis {axis}", *xs)
    return _done("concat", tuple(xs), torch.cat(tuple(xs), dim=axis))


def slice_(x, axis: int, start: int, stop: int):
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        _reject("slice", f"range [{start}, {stop}) outside extent {n}", x)
    return _done("slice", (x,), x.narrow(axis, start, stop - start))


def conv1d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    """Time-major 1-d convolution: ``x`` is [..., T, C_in], weight [C_out, C_in, K]."""
    if weight.dim() != 3 or x.shape[-1] != weight.shape[1]:
        _reject("conv1d", "channel mismatch", x, weight)
    lead = x.shape[:-2]
    xt = x.reshape(-1, *x.shape[-2:]).transpose(1, 2)
    y = F.conv1d(xt, weight, bias, stride=stride, padding=padding).transpose(1, 2)
    return _done("conv1d", (x, weight), y.reshape(*lead, *y.shape[-2:]))


def softmax(x, axis: int = -1):
    return _done("softmax", (x,), torch.softmax(x, dim=axis))


def log_softmax(x, axis: int = -1):
    return _done("log_softmax", (x,), torch.log_softmax(x, dim=axis))


def layer_norm(x, weight, bias, eps: float = 1e-5):
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        _reject("layer_norm", "scale/shift must match last axis", x, weight, bias)
    return _done("layer_norm", (x, weight, bias), F.layer_norm(x, x.shape[-1:], weight, bias, eps))


def embedding(table, ids):
    if table.dim() != 2:
        _reject("embedding", "table must be 2-d", table)
    if ids.numel() and (int(ids.max()) >= table.shape[0] or int(ids.min()) < 0):
        raise ShapeError(f"embedding: id out of range for table of {table.shape[0]} rows")
    return _done("embedding", (table,), F.embedding(ids, table))


def mse(a, b):
    if a.shape != b.shape:
        _reject("mse", "operands differ", a, b)
    return _done("mse", (a, b), ((a - b) ** 2).mean())


def label_smoothed_ce(logits, target, smoothing: float = 0.1, mask=None):
    """Mean cross-entropy against (1-eps) on gold and eps/(V-1) on every other class.

    ``logits`` [N, V], ``target`` [N]; ``mask`` [N] bool selects the counted rows.
    """
    if logits.dim() != 2 or target.shape != logits.shape[:1]:
        _reject("label_smoothed_ce", "expects [N, V] logits and [N] targets", logits, target)
    v = logits.shape[-1]
    logp = torch.log_softmax(logits, dim=-1)
    gold = logp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    if v > 1:
        rest = logp.sum(-1) - gold
        nll = -(1.0 - smoothing) * gold - smoothing / (v - 1) * rest
    else:
        nll = -gold
    if mask is not None:
        nll = nll[mask]
    return _done("label_smoothed_ce", (logits,), nll.mean())


def logsumexp(x, axis: int = -1):
    return _done("logsumexp", (x,), torch.logsumexp(x, dim=axis))


def row_normalize(x):
    """Scale each row (last axis) to unit Euclidean norm; all-zero rows stay zero."""
    sq = (x * x).sum(-1, keepdim=True)
    nz = sq > 0
    safe = torch.where(nz, sq, torch.ones_like(sq))
    out = torch.where(nz, x / torch.sqrt(safe), torch.zeros_like(x))
    return _done("row_normalize", (x,), out)


def masked_fill(x, mask, value: float):
    try:
        torch.broadcast_shapes(mask.shape, x.shape)
    except RuntimeError:
        _reject("masked_fill", "mask not broadcastable", x, mask)
    return _done("masked_fill", (x,), x.masked_fill(mask, value))


def relu(x):
    return _done("relu", (x,), torch.relu(x))


def gelu(x):
    return _done("gelu", (x,), F.gelu(x))


def total(x):
    return _done("sum", (x,), x.sum())


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "multiply": multiply,
    "transpose": transpose,
    "concat": concat,
    "slice": slice_,
    "conv1d": conv1d,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "embedding": embedding,
    "mse": mse,
    "label_smoothed_ce": label_smoothed_ce,
    "logsumexp": logsumexp,
    "row_normalize": row_normalize,
    "masked_fill": masked_fill,
    "relu": relu,
    "gelu": gelu,
    "sum": total,
}


def forward(kind: str, *inputs, **attrs) -> torch.Tensor:
    try:
        op = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return op(*inputs, **attrs)


def backward(graph: Graph | Mapping[str, torch.Tensor], loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every trainable leaf.

    ``graph`` may be a :class:`Graph` or any name -> tensor mapping, in which
    case ``requires_grad`` decides trainability. Frozen leaves are absent from
    the result; trainable leaves the loss does not touch get zeros.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    params = graph.parameters if isinstance(graph, Graph) else graph
    names = [n for n, p in params.items() if p.requires_grad]
    if not names:
        return {}
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        out[n] = torch.zeros_like(params[n]) if g is None else g
    return out


# --------------------------------------------------------------------------- #
# optimizer

def noam_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, inverse-sqrt decay after."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


@dataclass
class OptimizerState:
    peak_lr: float
    warmup_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return noam_lr(max(self.step, 1), self.peak_lr, self.warmup_steps)


@torch.no_grad()
def adam_step(state: OptimizerState, params: Mapping[str, torch.Tensor],
              grads: Mapping[str, torch.Tensor]) -> Mapping[str, torch.Tensor]:
    """One bias-corrected Adam update, in place. Only names present in ``grads`` move."""
    state.step += 1
    lr = noam_lr(state.step, state.peak_lr, state.warmup_steps)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {tuple(g.shape)} vs parameter {tuple(p.shape)} for {name}")
        if not p.requires_grad:
            continue
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = torch.zeros_like(p)
            state.second_moment[name] = torch.zeros_like(p)
        v = state.second_moment[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.epsilon))
    return params


# --------------------------------------------------------------------------- #
# randomness

class Rng:
    """Seedable, splittable counter-based generator (Philox).

    ``Rng(7).split("data").split("train")`` always yields the same stream,
    independent of how many other streams were drawn before it.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)

    def split(self, name) -> "Rng":
        return Rng(self.seed, self.path + (str(name),))

    def _seed_sequence(self) -> np.random.SeedSequence:
        key = tuple(zlib.crc32(p.encode()) for p in self.path)
        return np.random.SeedSequence(self.seed, spawn_key=key)

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(self._seed_sequence()))

    def integer(self) -> int:
        return int(self._seed_sequence().generate_state(1, np.uint32)[0])

    def torch_generator(self) -> torch.Generator:
        return torch.Generator().manual_seed(self.integer())

    def __repr__(self):
        return f"Rng({self.seed}, {'/'.join(self.path) or '-'})"


def set_threads(n: int | None = None):
    """Cap torch intra-op threads (``MOSAIQ_THREADS`` or ``n``)."""
    import os

    n = n or int(os.environ.get("MOSAIQ_THREADS", "1"))
    torch.set_num_threads(max(1, n))


def numeric_gradient(fn: Callable[[], torch.Tensor], params: Iterable[torch.Tensor], h: float = 1e-3):
    """Central finite differences of scalar ``fn()`` with respect to each tensor in ``params``."""
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = fn().item()
                flat[i] = old - h
                down = fn().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            out.append(g)
    return out


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-12)
    return num / den
