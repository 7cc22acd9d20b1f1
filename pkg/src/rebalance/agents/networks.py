"""Actor and critic architectures built on :mod:`rebalance.nn`.

All networks consume *scaled* observations and actions: observation
features divided by fitted scales, prices divided by the price ceiling.
"""

from __future__ import annotations

import numpy as np

from ..core import BASE_REGION_FEATURES, ObservationLayout, RegionGrid, neighbors
from ..nn import MLP, GRUCell, ParamBlock, prefixed

MAX_NEIGHBORS = 8


class Actor:
    """Deterministic policy: scaled observation -> per-region price fraction in (0, 1)."""

    def __init__(self, obs_dim: int, n: int, hidden=(64, 64), rng=None):
        sizes = [obs_dim, *hidden, n]
        self.mlp = MLP(sizes, ["relu"] * len(hidden) + ["sigmoid"], rng)
        self.params = self.mlp.params

    def forward(self, s: np.ndarray):
        return self.mlp.forward(s)

    def backward(self, da: np.ndarray, cache) -> tuple[np.ndarray, dict]:
        return self.mlp.backward(da, cache)


class MLPCritic:
    """Monolithic critic ``Q(s, a)`` on the concatenated state and action."""

    def __init__(self, obs_dim: int, n: int, hidden=(64, 64), rng=None):
        self.obs_dim, self.n = obs_dim, n
        sizes = [obs_dim + n, *hidden, 1]
        self.mlp = MLP(sizes, ["relu"] * len(hidden) + ["identity"], rng)
        self.params = self.mlp.params

    def encode(self, s: np.ndarray):
        return None

    def forward(self, s: np.ndarray, a: np.ndarray, encoding=None):
        q, cache = self.mlp.forward(np.concatenate([s, a], axis=1))
        return q[:, 0], cache

    def backward(self, dq: np.ndarray, cache) -> tuple[dict, np.ndarray, np.ndarray]:
        """Returns ``(param_grads, dQ/ds, dQ/da)`` for upstream ``dq`` of shape ``(batch,)``."""
        dx, grads = self.mlp.backward(dq[:, None], cache)
        return grads, dx[:, : self.obs_dim], dx[:, self.obs_dim :]

    def action_gradient(self, dq: np.ndarray, cache) -> np.ndarray:
        return self.backward(dq, cache)[2]


def neighbor_index(grid: RegionGrid) -> np.ndarray:
    """``(n, 8)`` table of neighbor ids in row-major order, padded with ``n`` (a zero slot)."""
    table = np.full((grid.n, MAX_NEIGHBORS), grid.n, dtype=np.int64)
    for i in range(grid.n):
        nb = neighbors(i, grid)
        table[i, : len(nb)] = nb
    return table


def sub_states(layout: ObservationLayout, s: np.ndarray) -> np.ndarray:
    """Per-region sub-state: the region's own block plus the remaining budget, ``(batch, n, w + 1)``."""
    blocks = layout.regions(s)
    rb = np.broadcast_to(layout.budget(s)[:, None, None], blocks.shape[:2] + (1,))
    return np.concatenate([blocks, rb], axis=2)


def neighbor_states(layout: ObservationLayout, s: np.ndarray, nbr_index: np.ndarray) -> np.ndarray:
    """Neighbor blocks of every region, zero-padded to 8 slots, flattened to ``(batch, n, 8 * w)``."""
    blocks = layout.regions(s)
    padded = np.concatenate([blocks, np.zeros(blocks.shape[:1] + (1, blocks.shape[2]))], axis=1)
    gathered = padded[:, nbr_index, :]  # (batch, n, 8, w)
    return gathered.reshape(gathered.shape[0], gathered.shape[1], -1)


class DecomposedCritic:
    """Sum of per-region sub-critics, optionally plus a localized correction.

    Sub-critic ``j``: a GRU reads region ``j``'s un-service window (oldest
    first); its final hidden state is joined with the region's other
    features, the remaining budget and the region's price, then passed
    through a two-layer head. The localized module ``f_j`` is a two-layer
    network on the sub-state, the neighbor sub-states and the price.
    Parameters are separate per region (grouped along axis 0).
    """

    def __init__(
        self,
        grid: RegionGrid,
        window: int,
        gru_hidden: int = 32,
        head_hidden: int = 64,
        local_hidden: int = 32,
        localized: bool = True,
        rng=None,
    ):
        rng = rng if rng is not None else np.random.default_rng()
        self.layout = ObservationLayout(grid.n, window)
        self.n = grid.n
        self.window = window
        self.localized = localized
        self.nbr_index = neighbor_index(grid)
        w = self.layout.region_width
        self.gru = GRUCell(1, gru_hidden, rng, groups=self.n)
        head_in = gru_hidden + BASE_REGION_FEATURES + 2
        self.head = MLP([head_in, head_hidden, 1], ["relu", "identity"], rng, groups=self.n)
        self.params = ParamBlock()
        self.params.update(prefixed(self.gru.params, "gru."))
        self.params.update(prefixed(self.head.params, "head."))
        if localized:
            local_in = (w + 1) + MAX_NEIGHBORS * w + 1
            self.local = MLP([local_in, local_hidden, 1], ["relu", "identity"], rng, groups=self.n)
            self.params.update(prefixed(self.local.params, "local."))

    def zero_localized(self) -> None:
        if self.localized:
            for v in self.local.params.values():
                v[...] = 0.0

    def encode(self, s: np.ndarray):
        """Run the recurrent front end, which depends on the state only; reusable across actions."""
        blocks = self.layout.regions(s)
        u = blocks[:, :, BASE_REGION_FEATURES:][:, :, ::-1, None]  # oldest first
        return self.gru.sequence_forward(u)

    def forward(self, s: np.ndarray, a: np.ndarray, encoding=None):
        """Returns ``(Q, sub_q, correction, cache)``; ``Q`` sums ``sub_q + correction`` over regions.

        ``encoding`` is an optional result of :meth:`encode` on the same ``s``
        under the current parameters.
        """
        B = s.shape[0]
        blocks = self.layout.regions(s)  # (B, n, w)
        rb = self.layout.budget(s)
        h, gru_cache = self.encode(s) if encoding is None else encoding
        head_x = np.concatenate(
            [h, blocks[:, :, :BASE_REGION_FEATURES], np.broadcast_to(rb[:, None, None], (B, self.n, 1)), a[:, :, None]],
            axis=2,
        )
        q, head_cache = self.head.forward(head_x)
        sub_q = q[:, :, 0]
        if self.localized:
            local_x = np.concatenate(
                [sub_states(self.layout, s), neighbor_states(self.layout, s, self.nbr_index), a[:, :, None]], axis=2
            )
            f, local_cache = self.local.forward(local_x)
            corr = f[:, :, 0]
        else:
            local_cache = None
            corr = np.zeros_like(sub_q)
        total = np.sum(sub_q + corr, axis=1)
        return total, sub_q, corr, (gru_cache, head_cache, local_cache, s.shape)

    def action_gradient(self, dq: np.ndarray, cache) -> np.ndarray:
        """``dQ/da`` only; skips the recurrent and parameter gradients."""
        _, head_cache, local_cache, _ = cache
        d = dq[:, None, None] * np.ones((1, self.n, 1))
        da = self.head.backward(d, head_cache)[0][:, :, -1].copy()
        if self.localized:
            da += self.local.backward(d, local_cache)[0][:, :, -1]
        return da

    def backward_components(self, d_sub: np.ndarray, d_corr: np.ndarray, cache) -> tuple[dict, np.ndarray, np.ndarray]:
        """Backprop separate upstream gradients for ``sub_q`` and ``correction`` (each ``(batch, n)``).

        Returns ``(param_grads, dQ/ds, dQ/da)``.
        """
        gru_cache, head_cache, local_cache, s_shape = cache
        B = s_shape[0]
        w = self.layout.region_width
        F = BASE_REGION_FEATURES
        ds_blocks = np.zeros((B, self.n, w))
        ds_rb = np.zeros(B)
        dhead_x, head_grads = self.head.backward(d_sub[:, :, None], head_cache)
        H = self.gru.hidden
        dh = dhead_x[:, :, :H]
        ds_blocks[:, :, :F] += dhead_x[:, :, H : H + F]
        ds_rb += dhead_x[:, :, H + F].sum(axis=1)
        da = dhead_x[:, :, H + F + 1].copy()
        du, _, gru_grads = self.gru.sequence_backward(dh, gru_cache)
        ds_blocks[:, :, F:] += du[:, :, ::-1, 0]
        grads = {}
        grads.update(prefixed(gru_grads, "gru."))
        grads.update(prefixed(head_grads, "head."))
        if self.localized:
            dlocal_x, local_grads = self.local.backward(d_corr[:, :, None], local_cache)
            grads.update(prefixed(local_grads, "local."))
            ds_blocks += dlocal_x[:, :, :w]
            ds_rb += dlocal_x[:, :, w].sum(axis=1)
            dns = dlocal_x[:, :, w + 1 : w + 1 + MAX_NEIGHBORS * w].reshape(B, self.n, MAX_NEIGHBORS, w)
            padded = np.zeros((B, self.n + 1, w))
            for k in range(MAX_NEIGHBORS):
                np.add.at(padded, (slice(None), self.nbr_index[:, k]), dns[:, :, k, :])
            ds_blocks += padded[:, : self.n]
            da += dlocal_x[:, :, -1]
        ds = np.concatenate([ds_blocks.reshape(B, -1), ds_rb[:, None]], axis=1)
        return grads, ds, da

    def backward(self, dq: np.ndarray, cache) -> tuple[dict, np.ndarray, np.ndarray]:
        """Gradients of ``Q`` for upstream ``dq`` of shape ``(batch,)``."""
        d = np.broadcast_to(dq[:, None], (dq.shape[0], self.n))
        return self.backward_components(d, d, cache)
