"""Hand-differentiated float64 building blocks for the actor-critic agents.

Every layer optionally carries a leading *group* axis on its parameters, so
that ``n`` independent per-region networks evaluate as one batched matmul.
Grouped inputs have shape ``(batch, groups, features)``; ungrouped inputs
``(batch, features)``.

Forward calls return ``(output, cache)`` and never mutate the layer;
backward calls take the upstream gradient plus that cache and return the
input gradient(s) together with a dict of parameter gradients.
"""

from __future__ import annotations

import copy
import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping

import numpy as np

CHECKPOINT_MAGIC = b"RBNN"
CHECKPOINT_VERSION = 1


class ParamBlock(OrderedDict):
    """Named float64 arrays. Updates must be in place to keep layer references valid."""

    def copy_from(self, other: Mapping[str, np.ndarray]) -> None:
        self._check_match(other)
        for k, v in self.items():
            v[...] = other[k]

    def clone(self) -> "ParamBlock":
        return ParamBlock((k, v.copy()) for k, v in self.items())

    def n_params(self) -> int:
        return sum(v.size for v in self.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values()]) if self else np.empty(0)

    def _check_match(self, other: Mapping[str, np.ndarray]) -> None:
        if list(self) != list(other):
            raise ValueError("parameter names differ")
        for k, v in self.items():
            if np.shape(other[k]) != v.shape:
                raise ValueError(f"shape mismatch for {k}: {np.shape(other[k])} vs {v.shape}")

    def save(self, fh: str | Path | BinaryIO) -> None:
        """Write the versioned checkpoint layout (see README, "Checkpoint format")."""
        if isinstance(fh, (str, Path)):
            with open(fh, "wb") as f:
                self.save(f)
            return
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(self)))
        for name, arr in self.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in self.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, fh: str | Path | BinaryIO) -> "ParamBlock":
        if isinstance(fh, (str, Path)):
            with open(fh, "rb") as f:
                return cls.load(f)
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a parameter checkpoint")
        version, count = struct.unpack("<HI", fh.read(6))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        table = []
        for _ in range(count):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            table.append((name, shape))
        block = cls()
        for name, shape in table:
            size = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * size)
            if len(buf) != 8 * size:
                raise ValueError("truncated checkpoint")
            block[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        return block


# -- activations ---------------------------------------------------------

def _sigmoid(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    # 0.5 * (1 + tanh(x / 2)): stable for any x and several times faster than expit
    out = np.multiply(x, 0.5, out=out)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


ACTIVATIONS = {
    "identity": (lambda z: z, lambda z, y: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, y: (z > 0).astype(z.dtype)),
    "tanh": (np.tanh, lambda z, y: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda z, y: y * (1.0 - y)),
}


# -- grouped matmul helpers -------------------------------------------------

def _mm(x: np.ndarray, W: np.ndarray) -> np.ndarray:
    if W.ndim == 2:
        return x @ W
    return np.matmul(x.swapaxes(0, 1), W).swapaxes(0, 1)


def _grad_w(x: np.ndarray, dz: np.ndarray, W: np.ndarray) -> np.ndarray:
    if W.ndim == 2:
        return x.T @ dz
    return np.matmul(x.swapaxes(0, 1).swapaxes(1, 2), dz.swapaxes(0, 1))


def _grad_x(dz: np.ndarray, W: np.ndarray) -> np.ndarray:
    if W.ndim == 2:
        return dz @ W.T
    return np.matmul(dz.swapaxes(0, 1), W.swapaxes(1, 2)).swapaxes(0, 1)


def _init_matrix(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """``activation(x @ W + b)``."""

    def __init__(
        self,
        n_in: int,
        n_out: int,
        activation: str = "identity",
        rng: np.random.Generator | None = None,
        groups: int | None = None,
    ):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng()
        lead = () if groups is None else (groups,)
        self.n_in, self.n_out, self.groups = n_in, n_out, groups
        self.activation = activation
        self.params = ParamBlock(
            W=_init_matrix(rng, n_in, lead + (n_in, n_out)), b=np.zeros(lead + (n_out,))
        )

    def _check(self, x: np.ndarray) -> None:
        want = (self.n_in,) if self.groups is None else (self.groups, self.n_in)
        if x.shape[1:] != want:
            raise ValueError(f"Dense expected input (*, {', '.join(map(str, want))}), got {x.shape}")

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        self._check(x)
        W = self.params["W"]
        z = _mm(x, W)
        z += self.params["b"]
        y = ACTIVATIONS[self.activation][0](z)
        return y, (x, z, y)

    def backward(self, dy: np.ndarray, cache: tuple) -> tuple[np.ndarray, dict]:
        x, z, y = cache
        W = self.params["W"]
        dz = dy * ACTIVATIONS[self.activation][1](z, y)
        grads = {"W": _grad_w(x, dz, W), "b": dz.sum(axis=0)}
        return _grad_x(dz, W), grads


class GRUCell:
    """Standard GRU step.

    Parameters: ``W`` ``(n_in, 3H)`` and ``b`` ``(3H,)`` laid out as
    [update z | reset r | candidate c]; ``Uzr`` ``(H, 2H)`` and ``Uc`` ``(H, H)``.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    c = tanh(x Wc + (r * h) Uc + bc), h' = (1 - z) * h + z * c.

    Grouped cells compute internally in ``(groups, batch, k)`` layout so every
    product is one contiguous batched matmul.
    """

    def __init__(
        self,
        n_in: int,
        hidden: int,
        rng: np.random.Generator | None = None,
        groups: int | None = None,
    ):
        rng = rng if rng is not None else np.random.default_rng()
        lead = () if groups is None else (groups,)
        self.n_in, self.hidden, self.groups = n_in, hidden, groups
        self.params = ParamBlock(
            W=_init_matrix(rng, n_in, lead + (n_in, 3 * hidden)),
            Uzr=_init_matrix(rng, hidden, lead + (hidden, 2 * hidden)),
            Uc=_init_matrix(rng, hidden, lead + (hidden, hidden)),
            b=np.zeros(lead + (3 * hidden,)),
        )

    def _check(self, x: np.ndarray, h: np.ndarray) -> None:
        want = (self.n_in,) if self.groups is None else (self.groups, self.n_in)
        if x.shape[1:] != want or h.shape[1:] != want[:-1] + (self.hidden,):
            raise ValueError(f"GRU shape mismatch: x {x.shape}, h {h.shape}")

    # external (B, G, k) <-> internal (G, B, k)
    def _to_inner(self, a: np.ndarray) -> np.ndarray:
        return a if self.groups is None else np.ascontiguousarray(a.swapaxes(0, 1))

    def _to_outer(self, a: np.ndarray) -> np.ndarray:
        return a if self.groups is None else a.swapaxes(0, 1)

    def _bias(self) -> np.ndarray:
        b = self.params["b"]
        return b if self.groups is None else b[:, None, :]

    def _step(self, xw: np.ndarray, h: np.ndarray, out: tuple | None = None) -> tuple[np.ndarray, tuple]:
        """One step from pre-projected input ``xw``; ``out`` optionally supplies (h_new, zr, rh, c) buffers."""
        H = self.hidden
        if out is None:
            out = (None, None, None, None)
        h_new, zr, rh, c = out
        zr = np.matmul(h, self.params["Uzr"], out=zr)
        zr += xw[..., : 2 * H]
        _sigmoid(zr, out=zr)
        z = zr[..., :H]
        rh = np.multiply(zr[..., H:], h, out=rh)
        c = np.matmul(rh, self.params["Uc"], out=c)
        c += xw[..., 2 * H :]
        np.tanh(c, out=c)
        h_new = np.subtract(c, h, out=h_new)
        h_new *= z
        h_new += h
        return h_new, (h, zr, rh, c)

    def _step_back(self, dh_new: np.ndarray, cache: tuple, da: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Returns (d pre-activations (..., 3H), d h_prev), internal layout."""
        h, zr, rh, c = cache
        H = self.hidden
        z = zr[..., :H]
        r = zr[..., H:]
        if da is None:
            da = np.empty(dh_new.shape[:-1] + (3 * H,))
        dz, dr, dc = da[..., :H], da[..., H : 2 * H], da[..., 2 * H :]
        # candidate: dc = dh * z * (1 - c^2)
        np.multiply(c, c, out=dc)
        np.subtract(1.0, dc, out=dc)
        dc *= z
        dc *= dh_new
        drh = dc @ self.params["Uc"].swapaxes(-1, -2)
        # update gate: dz = dh * (c - h) * z (1 - z)
        np.subtract(c, h, out=dz)
        dz *= dh_new
        dz *= z
        dz *= 1.0 - z
        # reset gate: dr = drh * h * r (1 - r)
        np.multiply(drh, h, out=dr)
        dr *= r
        dr *= 1.0 - r
        dh = drh * r
        dh += dh_new
        dh -= dh_new * z
        dh += da[..., : 2 * H] @ self.params["Uzr"].swapaxes(-1, -2)
        return da, dh

    def _weight_grads(self, x: np.ndarray, hp: np.ndarray, rh: np.ndarray, da: np.ndarray) -> dict:
        H = self.hidden
        t = lambda a: a.swapaxes(-1, -2)  # noqa: E731
        return {
            "W": t(x) @ da,
            "Uzr": t(hp) @ da[..., : 2 * H],
            "Uc": t(rh) @ da[..., 2 * H :],
            "b": da.sum(axis=-2),
        }

    def forward(self, x: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, tuple]:
        self._check(x, h)
        xi = self._to_inner(x)
        h_new, cache = self._step(xi @ self.params["W"] + self._bias(), self._to_inner(h))
        return self._to_outer(h_new), (xi, cache)

    def backward(self, dh_new: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, dict]:
        xi, step_cache = cache
        da, dh = self._step_back(self._to_inner(dh_new), step_cache)
        grads = self._weight_grads(xi, step_cache[0], step_cache[2], da)
        dx = da @ self.params["W"].swapaxes(-1, -2)
        return self._to_outer(dx), self._to_outer(dh), grads

    def _seq_inner(self, xs: np.ndarray) -> np.ndarray:
        # (B, [G,] S, k) -> (S, [G,] B, k)
        if self.groups is None:
            return np.ascontiguousarray(xs.swapaxes(0, 1))
        return np.ascontiguousarray(xs.transpose(2, 1, 0, 3))

    def _seq_outer(self, a: np.ndarray) -> np.ndarray:
        if self.groups is None:
            return a.swapaxes(0, 1)
        return a.transpose(2, 1, 0, 3)

    def sequence_forward(self, xs: np.ndarray, h0: np.ndarray | None = None) -> tuple[np.ndarray, tuple]:
        """Run over ``xs`` of shape ``(batch, [groups,] steps, n_in)``; returns the last hidden state."""
        step_axis = 1 if self.groups is None else 2
        lead = xs.shape[:step_axis]
        if h0 is None:
            h0 = np.zeros(lead + (self.hidden,))
        self._check(np.take(xs, 0, axis=step_axis), h0)
        xi = self._seq_inner(xs)
        S = xi.shape[0]
        W = self.params["W"]
        inner = xi.shape[1:-1]
        H = self.hidden
        # hs[k] is the hidden state entering step k; hs[S] is the final state
        hs = np.empty((S + 1,) + inner + (H,))
        hs[0] = self._to_inner(h0)
        zr = np.empty((S,) + inner + (2 * H,))
        rh = np.empty((S,) + inner + (H,))
        c = np.empty((S,) + inner + (H,))
        # one step's input projection at a time keeps the working set in cache
        xw = np.empty(inner + (3 * H,))
        bias = self._bias()
        for k in range(S):
            np.matmul(xi[k], W, out=xw)
            xw += bias
            self._step(xw, hs[k], out=(hs[k + 1], zr[k], rh[k], c[k]))
        return self._to_outer(hs[S]), (xi, hs, zr, rh, c)

    def sequence_backward(self, dh_last: np.ndarray, seq_cache: tuple) -> tuple[np.ndarray, np.ndarray, dict]:
        """Backprop through time; returns ``(dxs, dh0, grads)``."""
        xi, hs, zr, rh, c = seq_cache
        S = xi.shape[0]
        dh = self._to_inner(dh_last)
        H = self.hidden
        t = lambda a: a.swapaxes(-1, -2)  # noqa: E731
        W = self.params["W"]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dxs = np.empty(xi.shape)
        # gradients accumulate step by step so the per-step buffer stays small
        da = np.empty(zr.shape[1:-1] + (3 * H,))
        for k in range(S - 1, -1, -1):
            _, dh = self._step_back(dh, (hs[k], zr[k], rh[k], c[k]), da=da)
            grads["W"] += t(xi[k]) @ da
            grads["Uzr"] += t(hs[k]) @ da[..., : 2 * H]
            grads["Uc"] += t(rh[k]) @ da[..., 2 * H :]
            grads["b"] += da.sum(axis=-2)
            np.matmul(da, t(W), out=dxs[k])
        return self._seq_outer(dxs), self._to_outer(dh), grads


class MLP:
    """Stack of :class:`Dense` layers."""

    def __init__(
        self,
        sizes: Iterable[int],
        activations: Iterable[str],
        rng: np.random.Generator | None = None,
        groups: int | None = None,
    ):
        sizes = list(sizes)
        activations = list(activations)
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        rng = rng if rng is not None else np.random.default_rng()
        self.layers = [
            Dense(a, b, act, rng, groups) for a, b, act in zip(sizes[:-1], sizes[1:], activations)
        ]
        self.params = ParamBlock()
        for k, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                self.params[f"{k}.{name}"] = arr

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list]:
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, dy: np.ndarray, caches: list) -> tuple[np.ndarray, dict]:
        grads = {}
        for k in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[k].backward(dy, caches[k])
            for name, v in g.items():
                grads[f"{k}.{name}"] = v
        return dy, grads


def prefixed(block: Mapping[str, np.ndarray], prefix: str) -> dict:
    return {f"{prefix}{k}": v for k, v in block.items()}


def clip_by_global_norm(grads: dict, max_norm: float | None) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class Adam:
    """Adam with bias correction; optional global-norm gradient clipping."""

    def __init__(
        self,
        params: ParamBlock,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float | None = 10.0,
    ):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> float:
        """Apply one update in place; returns the pre-clipping gradient norm."""
        if set(grads) != set(self.params):
            raise ValueError("gradient names do not match parameters")
        for k, g in grads.items():
            if np.shape(g) != self.params[k].shape:
                raise ValueError(f"gradient shape mismatch for {k}")
        grads, norm = clip_by_global_norm(dict(grads), self.clip_norm)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def adam_step(params: ParamBlock, grads: Mapping[str, np.ndarray], state: Adam | None, lr: float, **kw) -> Adam:
    """Functional wrapper: create optimizer state on first use, then step."""
    if state is None:
        state = Adam(params, lr=lr, **kw)
    state.lr = lr
    state.step(grads)
    return state


def soft_update(target: ParamBlock, online: Mapping[str, np.ndarray], tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target`` elementwise, in place."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    target._check_match(online)
    for k, t in target.items():
        t *= 1.0 - tau
        t += tau * online[k]


def deep_copy(net):
    return copy.deepcopy(net)
