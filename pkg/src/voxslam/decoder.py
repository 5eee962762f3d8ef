"""Feature decoder MLP, its reverse-mode gradients, and Adam.

The decoder maps an interpolated corner feature to a signed distance
(meters) and an RGB radiance in (0,1): a ReLU trunk of 128-wide layers,
an SDF head emitting the scalar plus a 128-D intermediate feature, and
a color head (two layers, 256 hidden) fed only by that intermediate,
closed by a sigmoid.  Gradients are computed by an explicit tape; no
autodiff framework is involved anywhere in this package.
"""

from __future__ import annotations

import numpy as np

from .errors import TapeReplayed


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Decoder:
    """MLP parameters plus forward/backward machinery."""

    def __init__(self, embedding_dim=16, hidden=128, trunk_layers=2,
                 color_hidden=256, rng=None):
        if not 2 <= trunk_layers <= 4:
            raise ValueError(f"trunk_layers must be in [2, 4], got {trunk_layers}")
        self.embedding_dim = int(embedding_dim)
        self.hidden = int(hidden)
        self.trunk_layers = int(trunk_layers)
        self.color_hidden = int(color_hidden)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, np.ndarray] = {}
        d_in = self.embedding_dim
        for i in range(self.trunk_layers):
            self.params[f"trunk_w{i}"] = rng.normal(
                0.0, np.sqrt(2.0 / d_in), (d_in, self.hidden)
            )
            self.params[f"trunk_b{i}"] = np.zeros(self.hidden)
            d_in = self.hidden
        self.params["sdf_w"] = rng.normal(
            0.0, np.sqrt(2.0 / self.hidden), (self.hidden, 1 + self.hidden)
        )
        self.params["sdf_b"] = np.zeros(1 + self.hidden)
        self.params["color_w0"] = rng.normal(
            0.0, np.sqrt(2.0 / self.hidden), (self.hidden, self.color_hidden)
        )
        self.params["color_b0"] = np.zeros(self.color_hidden)
        self.params["color_w1"] = rng.normal(
            0.0, np.sqrt(2.0 / self.color_hidden), (self.color_hidden, 3)
        )
        self.params["color_b1"] = np.zeros(3)
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def clone(self) -> "Decoder":
        """Deep parameter copy (for read-only snapshots)."""
        other = Decoder.__new__(Decoder)
        other.embedding_dim = self.embedding_dim
        other.hidden = self.hidden
        other.trunk_layers = self.trunk_layers
        other.color_hidden = self.color_hidden
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        return other

    def decode(self, feats: np.ndarray):
        """(sdf (N,), color (N,3)) without recording a tape."""
        a = np.asarray(feats, dtype=np.float64).reshape(-1, self.embedding_dim)
        for i in range(self.trunk_layers):
            a = np.maximum(a @ self.params[f"trunk_w{i}"] + self.params[f"trunk_b{i}"], 0.0)
        y = a @ self.params["sdf_w"] + self.params["sdf_b"]
        s = y[:, 0]
        h = y[:, 1:]
        u = np.maximum(h @ self.params["color_w0"] + self.params["color_b0"], 0.0)
        c = sigmoid(u @ self.params["color_w1"] + self.params["color_b1"])
        return s, c

    def decode_sdf(self, feats: np.ndarray) -> np.ndarray:
        """SDF head only; cheaper than decode when color is not needed."""
        a = np.asarray(feats, dtype=np.float64).reshape(-1, self.embedding_dim)
        for i in range(self.trunk_layers):
            a = np.maximum(a @ self.params[f"trunk_w{i}"] + self.params[f"trunk_b{i}"], 0.0)
        # only column 0 of the sdf layer matters here
        return a @ self.params["sdf_w"][:, 0] + self.params["sdf_b"][0]

    def forward_tape(self, feats: np.ndarray):
        """Forward pass recording intermediates: (sdf, color, tape)."""
        a = np.asarray(feats, dtype=np.float64).reshape(-1, self.embedding_dim)
        acts = [a]
        for i in range(self.trunk_layers):
            a = np.maximum(a @ self.params[f"trunk_w{i}"] + self.params[f"trunk_b{i}"], 0.0)
            acts.append(a)
        y = acts[-1] @ self.params["sdf_w"] + self.params["sdf_b"]
        s = y[:, 0]
        h = y[:, 1:]
        u = np.maximum(h @ self.params["color_w0"] + self.params["color_b0"], 0.0)
        c = sigmoid(u @ self.params["color_w1"] + self.params["color_b1"])
        return s, c, Tape(self, acts, h, u, c)


class Tape:
    """Recorded forward pass; backward() spends it exactly once."""

    def __init__(self, decoder: Decoder, acts, h, u, c):
        self._decoder = decoder
        self._acts = acts
        self._h = h
        self._u = u
        self._c = c
        self._spent = False

    def backward(self, dsdf: np.ndarray, dcolor: np.ndarray,
                 params: bool = True) -> np.ndarray:
        """Accumulate parameter grads; returns d(loss)/d(input feature).

        ``dsdf`` is (N,), ``dcolor`` (N, 3).  With ``params=False`` the
        parameter gradients are skipped (pose-only optimization), which
        roughly halves the cost.  Raises :class:`TapeReplayed` on a
        second call.
        """
        if self._spent:
            raise TapeReplayed("backward already ran on this tape")
        self._spent = True
        d = self._decoder
        p, g = d.params, d.grads
        du2 = np.asarray(dcolor) * self._c * (1.0 - self._c)
        if params:
            g["color_w1"] += self._u.T @ du2
            g["color_b1"] += du2.sum(axis=0)
        dr = du2 @ p["color_w1"].T
        du1 = dr * (self._u > 0)
        if params:
            g["color_w0"] += self._h.T @ du1
            g["color_b0"] += du1.sum(axis=0)
        dh = du1 @ p["color_w0"].T
        dy = np.concatenate([np.asarray(dsdf)[:, None], dh], axis=1)
        if params:
            g["sdf_w"] += self._acts[-1].T @ dy
            g["sdf_b"] += dy.sum(axis=0)
        da = dy @ p["sdf_w"].T
        for i in reversed(range(d.trunk_layers)):
            dz = da * (self._acts[i + 1] > 0)
            if params:
                g[f"trunk_w{i}"] += self._acts[i].T @ dz
                g[f"trunk_b{i}"] += dz.sum(axis=0)
            da = dz @ p[f"trunk_w{i}"].T
        return da


class Adam:
    """Adam with in-place updates and growable first-axis state.

    One instance per parameter group (embeddings, decoder, each pose
    increment); parameters are addressed by name so tables that grow
    between steps keep their moment history for existing rows.
    """

    def __init__(self, lr, beta1=0.9, beta2=0.99, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def _ensure(self, name: str, shape):
        if name not in self._m:
            self._m[name] = np.zeros(shape)
            self._v[name] = np.zeros(shape)
            self._t[name] = 0
        elif self._m[name].shape != tuple(shape):
            # table grew along axis 0; new rows start with zero moments
            old = self._m[name]
            grown_m = np.zeros(shape)
            grown_m[: old.shape[0]] = old
            self._m[name] = grown_m
            old_v = self._v[name]
            grown_v = np.zeros(shape)
            grown_v[: old_v.shape[0]] = old_v
            self._v[name] = grown_v

    def step(self, name: str, param: np.ndarray, grad: np.ndarray):
        """One Adam update of ``param`` in place."""
        self._ensure(name, param.shape)
        self._t[name] += 1
        t = self._t[name]
        m, v = self._m[name], self._v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step_params(self, params: dict, grads: dict):
        for name, p in params.items():
            self.step(name, p, grads[name])
