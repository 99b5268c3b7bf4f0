"""Observable encoders with hand-written forward/backward passes.

The trainer differentiates through the encoder, so each variant exposes a
functional pair: ``forward(params, X, train)`` returning ``(Y, cache)`` and
``backward(cache, dY)`` returning the flat parameter gradient. Parameters
live in a single flat vector to keep the optimizer generic.

Variants
--------
mlp
    Fully connected net with smooth activations on a fixed input scaling.
    Default choice: small, fast, and exactly differentiable.
resconv
    1-D convolutional stack (kernels 5/3/3) with a batch-normalized residual
    branch, temporal averaging, and three fully connected ReLU layers fed
    with the averaged features concatenated with the current sample.
passthrough
    Copies a fixed slice of the input; no parameters. Used for planted-model
    diagnostics where the observables are the data itself.
extractor
    Fixed physics observables (power gap, stored-energy estimate) plus a
    learned dense bottleneck, mixed with the current sample by a small head.
    The scenario features are exposed for correlation analysis.
"""

from __future__ import annotations

import numpy as np


def _xavier(rng, fan_in, fan_out, gain=1.0):
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


class MlpEncoder:
    """Dense net: input scaling, hidden tanh layers, linear output."""

    variant = "mlp"

    def __init__(self, input_len: int, hidden: tuple[int, ...], out_dim: int,
                 in_shift=None, in_scale=None, activation: str = "tanh"):
        if activation != "tanh":
            raise ValueError("only tanh hidden activations are supported")
        self.input_len = int(input_len)
        self.hidden = tuple(int(h) for h in hidden)
        self.out_dim = int(out_dim)
        self.widths = (self.input_len, *self.hidden, self.out_dim)
        self.in_shift = np.zeros(input_len) if in_shift is None \
            else np.asarray(in_shift, dtype=float)
        self.in_scale = np.ones(input_len) if in_scale is None \
            else np.asarray(in_scale, dtype=float)
        if self.in_shift.shape != (input_len,) or self.in_scale.shape != (input_len,):
            raise ValueError("in_shift/in_scale must match input_len")
        self._shapes = []
        for a, b in zip(self.widths[:-1], self.widths[1:]):
            self._shapes.append((b, a))
            self._shapes.append((b,))
        self.n_params = sum(int(np.prod(s)) for s in self._shapes)

    def set_normalization(self, shift, scale):
        self.in_shift = np.asarray(shift, dtype=float)
        self.in_scale = np.asarray(scale, dtype=float)

    def init_params(self, rng) -> np.ndarray:
        parts = []
        n_layers = len(self.widths) - 1
        for li, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            gain = 1.0 if li < n_layers - 1 else 0.1  # keep latents small at start
            parts.append(_xavier(rng, a, b, gain).ravel())
            parts.append(np.zeros(b))
        return np.concatenate(parts) if parts else np.zeros(0)

    def _unpack(self, params):
        out, pos = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(params[pos:pos + size].reshape(shape))
            pos += size
        if pos != params.size:
            raise ValueError(f"parameter vector has {params.size} entries, "
                             f"expected {self.n_params}")
        return out

    def forward(self, params, X, train: bool = False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_len:
            raise ValueError(f"encoder expects {self.input_len} inputs, "
                             f"got {X.shape[1]}")
        mats = self._unpack(params)
        h = (X - self.in_shift) / self.in_scale
        acts = [h]
        n_layers = len(self.widths) - 1
        for li in range(n_layers):
            W, b = mats[2 * li], mats[2 * li + 1]
            z = h @ W.T + b
            h = np.tanh(z) if li < n_layers - 1 else z
            acts.append(h)
        cache = {"acts": acts, "mats": mats}
        return h, cache

    def backward(self, cache, dY):
        acts, mats = cache["acts"], cache["mats"]
        n_layers = len(self.widths) - 1
        grads = [None] * (2 * n_layers)
        delta = np.asarray(dY, dtype=float)
        for li in range(n_layers - 1, -1, -1):
            if li < n_layers - 1:  # undo tanh
                delta = delta * (1.0 - acts[li + 1] ** 2)
            grads[2 * li] = delta.T @ acts[li]
            grads[2 * li + 1] = delta.sum(axis=0)
            if li > 0:
                delta = delta @ mats[2 * li]
        return np.concatenate([g.ravel() for g in grads]) if grads else np.zeros(0)

    def to_spec(self) -> dict:
        return {"variant": self.variant, "input_len": self.input_len,
                "hidden": list(self.hidden), "out_dim": self.out_dim,
                "in_shift": self.in_shift.tolist(),
                "in_scale": self.in_scale.tolist()}

    @classmethod
    def from_spec(cls, spec) -> "MlpEncoder":
        return cls(spec["input_len"], tuple(spec["hidden"]), spec["out_dim"],
                   in_shift=spec.get("in_shift"), in_scale=spec.get("in_scale"))


class PassthroughEncoder:
    """Copies input columns ``offset:offset+out_dim`` unchanged."""

    variant = "passthrough"
    n_params = 0

    def __init__(self, input_len: int, out_dim: int, offset: int = 1):
        if offset + out_dim > input_len:
            raise ValueError("slice exceeds input length")
        self.input_len = int(input_len)
        self.out_dim = int(out_dim)
        self.offset = int(offset)

    def init_params(self, rng) -> np.ndarray:
        return np.zeros(0)

    def forward(self, params, X, train: bool = False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X[:, self.offset:self.offset + self.out_dim], {}

    def backward(self, cache, dY):
        return np.zeros(0)

    def to_spec(self) -> dict:
        return {"variant": self.variant, "input_len": self.input_len,
                "out_dim": self.out_dim, "offset": self.offset}

    @classmethod
    def from_spec(cls, spec) -> "PassthroughEncoder":
        return cls(spec["input_len"], spec["out_dim"], spec.get("offset", 1))


# ---------------------------------------------------------------------------
# residual convolutional variant
# ---------------------------------------------------------------------------

def _conv1d_forward(X, W, b):
    # X (n, c_in, t), W (c_out, c_in, k) 'same' padding
    n, c_in, t = X.shape
    c_out, _, k = W.shape
    p = k // 2
    XP = np.zeros((n, c_in, t + 2 * p))
    XP[:, :, p:p + t] = X
    cols = np.lib.stride_tricks.sliding_window_view(XP, k, axis=2)  # (n,c,t,k)
    cols = cols.transpose(0, 2, 1, 3).reshape(n * t, c_in * k)
    Y = cols @ W.reshape(c_out, c_in * k).T + b
    return Y.reshape(n, t, c_out).transpose(0, 2, 1), cols


def _conv1d_backward(dY, cols, W):
    c_out, c_in, k = W.shape
    n, _, t = dY.shape
    p = k // 2
    dYr = dY.transpose(0, 2, 1).reshape(n * t, c_out)
    dW = (dYr.T @ cols).reshape(c_out, c_in, k)
    db = dYr.sum(axis=0)
    dcols = (dYr @ W.reshape(c_out, c_in * k)).reshape(n, t, c_in, k)
    dXP = np.zeros((n, c_in, t + 2 * p))
    for kk in range(k):
        dXP[:, :, kk:kk + t] += dcols[:, :, :, kk].transpose(0, 2, 1)
    return dW, db, dXP[:, :, p:p + t]


class ResConvEncoder:
    """Conv stack (5/3/3) + batch-normalized residual shortcut.

    The time-averaged convolutional features are concatenated with the
    current sample (last window column of every channel) and passed through
    three fully connected layers (ReLU, ReLU, linear).
    """

    variant = "resconv"
    BN_EPS = 1e-5

    def __init__(self, input_len: int, n_channels: int, out_dim: int,
                 conv_width: int = 16, fc_width: int = 64,
                 in_shift=None, in_scale=None):
        if input_len % n_channels != 0:
            raise ValueError("input_len must be n_channels * window length")
        self.input_len = int(input_len)
        self.n_channels = int(n_channels)
        self.t_len = input_len // n_channels
        self.out_dim = int(out_dim)
        self.cw = int(conv_width)
        self.fw = int(fc_width)
        self.in_shift = np.zeros(input_len) if in_shift is None \
            else np.asarray(in_shift, dtype=float)
        self.in_scale = np.ones(input_len) if in_scale is None \
            else np.asarray(in_scale, dtype=float)
        c, cw, fw = self.n_channels, self.cw, self.fw
        self._shapes = [
            (cw, c, 5), (cw,),          # conv1
            (cw, cw, 3), (cw,),         # conv2
            (cw, cw, 3), (cw,),         # conv3
            (cw, c, 1), (cw,),          # residual 1x1 conv
            (cw,), (cw,),               # batchnorm gamma, beta
            (fw, cw + c), (fw,),        # fc1 (features + current sample)
            (fw, fw), (fw,),            # fc2
            (self.out_dim, fw), (self.out_dim,),  # fc3
        ]
        self.n_params = sum(int(np.prod(s)) for s in self._shapes)
        self.bn_running_mean = np.zeros(cw)
        self.bn_running_var = np.ones(cw)

    def set_normalization(self, shift, scale):
        self.in_shift = np.asarray(shift, dtype=float)
        self.in_scale = np.asarray(scale, dtype=float)

    def init_params(self, rng) -> np.ndarray:
        parts = []
        for i, shape in enumerate(self._shapes):
            if len(shape) == 3:
                fan_in = shape[1] * shape[2]
                parts.append((rng.standard_normal(shape)
                              * np.sqrt(2.0 / fan_in)).ravel())
            elif i == 8:    # bn gamma
                parts.append(np.ones(shape))
            elif len(shape) == 2:
                gain = 0.1 if shape[0] == self.out_dim else 1.0
                parts.append(_xavier(rng, shape[1], shape[0], gain).ravel())
            else:
                parts.append(np.zeros(shape))
        return np.concatenate(parts)

    def _unpack(self, params):
        out, pos = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(params[pos:pos + size].reshape(shape))
            pos += size
        if pos != params.size:
            raise ValueError(f"parameter vector has {params.size} entries, "
                             f"expected {self.n_params}")
        return out

    def _split_input(self, X):
        n = X.shape[0]
        nw, c = self.t_len, self.n_channels
        om = X[:, :nw][:, None, :]                        # (n,1,t)
        rest = X[:, nw:].reshape(n, nw, c - 1).transpose(0, 2, 1)
        return np.concatenate([om, rest], axis=1)         # (n,c,t)

    def forward(self, params, X, train: bool = False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_len:
            raise ValueError(f"encoder expects {self.input_len} inputs, "
                             f"got {X.shape[1]}")
        (w1, b1, w2, b2, w3, b3, wr, br, gam, bet,
         f1, c1, f2, c2, f3, c3) = self._unpack(params)
        Xn = (X - self.in_shift) / self.in_scale
        Xc = self._split_input(Xn)                        # (n,c,t)

        z1, col1 = _conv1d_forward(Xc, w1, b1)
        a1 = np.maximum(z1, 0.0)
        z2, col2 = _conv1d_forward(a1, w2, b2)
        a2 = np.maximum(z2, 0.0)
        z3, col3 = _conv1d_forward(a2, w3, b3)
        zr, colr = _conv1d_forward(Xc, wr, br)
        if train:
            mu = zr.mean(axis=(0, 2))
            var = zr.var(axis=(0, 2))
        else:
            mu, var = self.bn_running_mean, self.bn_running_var
        inv = 1.0 / np.sqrt(var + self.BN_EPS)
        xhat = (zr - mu[None, :, None]) * inv[None, :, None]
        res = gam[None, :, None] * xhat + bet[None, :, None]

        zsum = z3 + res
        act = np.maximum(zsum, 0.0)
        feat = act.mean(axis=2)                           # temporal average
        cur = Xn[:, self._current_sample_idx()]
        h0 = np.concatenate([feat, cur], axis=1)
        h1 = np.maximum(h0 @ f1.T + c1, 0.0)
        h2 = np.maximum(h1 @ f2.T + c2, 0.0)
        out = h2 @ f3.T + c3
        cache = dict(Xc=Xc, col1=col1, col2=col2, col3=col3, colr=colr,
                     z1=z1, z2=z2, zsum=zsum, xhat=xhat, inv=inv, mu=mu,
                     var=var, train=train, h0=h0, h1=h1, h2=h2,
                     mats=(w1, b1, w2, b2, w3, b3, wr, br, gam, bet,
                           f1, c1, f2, c2, f3, c3))
        return out, cache

    def _current_sample_idx(self):
        nw, c = self.t_len, self.n_channels
        idx = [nw - 1]
        idx += [nw + (nw - 1) * (c - 1) + j for j in range(c - 1)]
        return np.array(idx)

    def backward(self, cache, dY):
        (w1, b1, w2, b2, w3, b3, wr, br, gam, bet,
         f1, c1, f2, c2, f3, c3) = cache["mats"]
        h0, h1, h2 = cache["h0"], cache["h1"], cache["h2"]
        dY = np.asarray(dY, dtype=float)
        df3 = dY.T @ h2
        dc3 = dY.sum(axis=0)
        dh2 = (dY @ f3) * (h2 > 0)
        df2 = dh2.T @ h1
        dc2 = dh2.sum(axis=0)
        dh1 = (dh2 @ f2) * (h1 > 0)
        df1 = dh1.T @ h0
        dc1 = dh1.sum(axis=0)
        dh0 = dh1 @ f1
        cw = self.cw
        dfeat, _ = dh0[:, :cw], dh0[:, cw:]

        zsum = cache["zsum"]
        n, _, t = zsum.shape
        dact = np.repeat(dfeat[:, :, None], t, axis=2) / t
        dzsum = dact * (zsum > 0)

        # residual branch: batchnorm backward
        xhat, inv = cache["xhat"], cache["inv"]
        dgam = (dzsum * xhat).sum(axis=(0, 2))
        dbet = dzsum.sum(axis=(0, 2))
        dxhat = dzsum * gam[None, :, None]
        if cache["train"]:
            m = n * t
            s1 = dxhat.sum(axis=(0, 2), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
            dzr = (dxhat - s1 / m - xhat * s2 / m) * inv[None, :, None]
        else:
            dzr = dxhat * inv[None, :, None]
        dwr, dbr, dXc_r = _conv1d_backward(dzr, cache["colr"], wr)

        dz3 = dzsum
        dw3, db3, da2 = _conv1d_backward(dz3, cache["col3"], w3)
        dz2 = da2 * (cache["z2"] > 0)
        dw2, db2, da1 = _conv1d_backward(dz2, cache["col2"], w2)
        dz1 = da1 * (cache["z1"] > 0)
        dw1, db1, _ = _conv1d_backward(dz1, cache["col1"], w1)
        _ = dXc_r  # input gradients are not propagated further
        grads = [dw1, db1, dw2, db2, dw3, db3, dwr, dbr, dgam, dbet,
                 df1, dc1, df2, dc2, df3, dc3]
        return np.concatenate([g.ravel() for g in grads])

    def commit_batchnorm(self, cache, momentum: float = 0.1) -> None:
        """Fold the cached batch statistics into the running estimates."""
        if not cache.get("train"):
            return
        self.bn_running_mean = ((1 - momentum) * self.bn_running_mean
                                + momentum * cache["mu"])
        self.bn_running_var = ((1 - momentum) * self.bn_running_var
                               + momentum * cache["var"])

    def to_spec(self) -> dict:
        return {"variant": self.variant, "input_len": self.input_len,
                "n_channels": self.n_channels, "out_dim": self.out_dim,
                "conv_width": self.cw, "fc_width": self.fw,
                "in_shift": self.in_shift.tolist(),
                "in_scale": self.in_scale.tolist(),
                "bn_running_mean": self.bn_running_mean.tolist(),
                "bn_running_var": self.bn_running_var.tolist()}

    @classmethod
    def from_spec(cls, spec) -> "ResConvEncoder":
        enc = cls(spec["input_len"], spec["n_channels"], spec["out_dim"],
                  conv_width=spec.get("conv_width", 16),
                  fc_width=spec.get("fc_width", 64),
                  in_shift=spec.get("in_shift"), in_scale=spec.get("in_scale"))
        if "bn_running_mean" in spec:
            enc.bn_running_mean = np.array(spec["bn_running_mean"])
            enc.bn_running_var = np.array(spec["bn_running_var"])
        return enc


class ExtractorEncoder:
    """Physics observables plus a learned bottleneck, feeding a mixing head.

    Two fixed scenario features are computed directly from the window:

    * power gap: the shortfall between total machine injection and served
      demand right after the disturbance, read off the first few samples.
    * stored-energy estimate: the regression coefficient of the cumulative
      accelerating power against the frequency change over the window
      (both smoothed with a low-order polynomial), which is proportional
      to the aggregate rotational inertia behind the measured response.

    A small dense extractor adds ``m_dim`` learned features on top. The head
    maps [fixed features, m, current sample] to the latent block of the
    state. ``extractor_features`` exposes the normalized fixed features
    together with m for correlation analysis against scenario parameters.

    The fixed features assume the window layout produced by the embedding
    builder: frequency first, then per-sample rows whose last channel is
    total served demand and whose other channels are machine injections.
    """

    variant = "extractor"
    N_FIXED = 2

    def __init__(self, input_len: int, n_channels: int, out_dim: int,
                 m_dim: int = 2, hidden: tuple[int, ...] = (96, 96),
                 head_width: int = 48, in_shift=None, in_scale=None,
                 feat_shift=None, feat_scale=None):
        if input_len % n_channels != 0:
            raise ValueError("input_len must be n_channels * window length")
        self.input_len = int(input_len)
        self.n_channels = int(n_channels)
        self.t_len = input_len // n_channels
        self.out_dim = int(out_dim)
        self.m_dim = int(m_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.head_width = int(head_width)
        self.in_shift = np.zeros(input_len) if in_shift is None \
            else np.asarray(in_shift, dtype=float)
        self.in_scale = np.ones(input_len) if in_scale is None \
            else np.asarray(in_scale, dtype=float)
        self.feat_shift = np.zeros(self.N_FIXED) if feat_shift is None \
            else np.asarray(feat_shift, dtype=float)
        self.feat_scale = np.ones(self.N_FIXED) if feat_scale is None \
            else np.asarray(feat_scale, dtype=float)
        deg = min(4, self.t_len - 1)
        grid = np.linspace(0.0, 1.0, self.t_len)
        vand = np.vander(grid, deg + 1, increasing=True)
        self._smooth = vand @ np.linalg.pinv(vand)
        widths = (self.input_len, *self.hidden, self.m_dim)
        self._ext_widths = widths
        self._shapes = []
        for a, b in zip(widths[:-1], widths[1:]):
            self._shapes.append((b, a))
            self._shapes.append((b,))
        hw = self.head_width
        self._shapes.append((hw, self.N_FIXED + self.m_dim + self.n_channels))
        self._shapes.append((hw,))
        self._shapes.append((self.out_dim, hw))
        self._shapes.append((self.out_dim,))
        self.n_params = sum(int(np.prod(s)) for s in self._shapes)

    def set_normalization(self, shift, scale):
        self.in_shift = np.asarray(shift, dtype=float)
        self.in_scale = np.asarray(scale, dtype=float)

    def set_feature_normalization(self, shift, scale):
        self.feat_shift = np.asarray(shift, dtype=float)
        self.feat_scale = np.asarray(scale, dtype=float)

    def _current_sample_idx(self):
        nw, c = self.t_len, self.n_channels
        idx = [nw - 1]
        idx += [nw + (nw - 1) * (c - 1) + j for j in range(c - 1)]
        return np.array(idx)

    def fixed_features(self, X) -> np.ndarray:
        """Raw physics observables [power gap, stored-energy estimate]."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        nw, c = self.t_len, self.n_channels
        if c < 2:
            return np.zeros((n, self.N_FIXED))
        om = X[:, :nw]
        rows = X[:, nw:].reshape(n, nw, c - 1)
        injections = rows[:, :, :-1].sum(axis=2) if c > 2 \
            else np.zeros((n, nw))
        balance = injections - rows[:, :, -1]
        early = min(3, nw)
        gap = -balance[:, :early].mean(axis=1)
        oms = om @ self._smooth.T
        bal_s = balance @ self._smooth.T
        cum = np.cumsum((bal_s[:, 1:] + bal_s[:, :-1]) * 0.5, axis=1)
        cum /= max(nw - 1, 1)
        dom = oms[:, 1:] - oms[:, :1]
        domc = dom - dom.mean(axis=1, keepdims=True)
        cumc = cum - cum.mean(axis=1, keepdims=True)
        var = (domc * domc).sum(axis=1)
        cov = (domc * cumc).sum(axis=1)
        slope = np.divide(cov, var, out=np.zeros(n), where=var > 1e-30)
        return np.column_stack([gap, 0.5 * slope])

    def init_params(self, rng) -> np.ndarray:
        parts = []
        n_ext = len(self._ext_widths) - 1
        for li, (a, b) in enumerate(zip(self._ext_widths[:-1],
                                        self._ext_widths[1:])):
            parts.append(_xavier(rng, a, b, 1.0).ravel())
            parts.append(np.zeros(b))
        parts.append(_xavier(rng, self.N_FIXED + self.m_dim + self.n_channels,
                             self.head_width, 1.0).ravel())
        parts.append(np.zeros(self.head_width))
        parts.append(_xavier(rng, self.head_width, self.out_dim, 0.1).ravel())
        parts.append(np.zeros(self.out_dim))
        _ = n_ext
        return np.concatenate(parts)

    def _unpack(self, params):
        out, pos = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            out.append(params[pos:pos + size].reshape(shape))
            pos += size
        if pos != params.size:
            raise ValueError(f"parameter vector has {params.size} entries, "
                             f"expected {self.n_params}")
        return out

    def forward(self, params, X, train: bool = False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_len:
            raise ValueError(f"encoder expects {self.input_len} inputs, "
                             f"got {X.shape[1]}")
        mats = self._unpack(params)
        fixed = (self.fixed_features(X) - self.feat_shift) / self.feat_scale
        Xn = (X - self.in_shift) / self.in_scale
        h = Xn
        acts = [h]
        n_ext = len(self._ext_widths) - 1
        for li in range(n_ext):
            W, b = mats[2 * li], mats[2 * li + 1]
            z = h @ W.T + b
            h = np.tanh(z) if li < n_ext - 1 else z
            acts.append(h)
        m = h
        cur = Xn[:, self._current_sample_idx()]
        h0 = np.concatenate([fixed, m, cur], axis=1)
        Wh, bh, Wo, bo = mats[-4], mats[-3], mats[-2], mats[-1]
        h1 = np.tanh(h0 @ Wh.T + bh)
        out = h1 @ Wo.T + bo
        cache = {"acts": acts, "mats": mats, "h0": h0, "h1": h1}
        return out, cache

    def extractor_features(self, params, X):
        """Scenario features: normalized fixed observables, then m."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        mats = self._unpack(params)
        fixed = (self.fixed_features(X) - self.feat_shift) / self.feat_scale
        h = (X - self.in_shift) / self.in_scale
        n_ext = len(self._ext_widths) - 1
        for li in range(n_ext):
            W, b = mats[2 * li], mats[2 * li + 1]
            z = h @ W.T + b
            h = np.tanh(z) if li < n_ext - 1 else z
        return np.concatenate([fixed, h], axis=1)

    def backward(self, cache, dY):
        acts, mats = cache["acts"], cache["mats"]
        h0, h1 = cache["h0"], cache["h1"]
        Wh, Wo = mats[-4], mats[-2]
        dY = np.asarray(dY, dtype=float)
        dWo = dY.T @ h1
        dbo = dY.sum(axis=0)
        dh1 = (dY @ Wo) * (1.0 - h1 ** 2)
        dWh = dh1.T @ h0
        dbh = dh1.sum(axis=0)
        dh0 = dh1 @ Wh
        # fixed features and the current sample carry no parameters
        dm = dh0[:, self.N_FIXED:self.N_FIXED + self.m_dim]
        n_ext = len(self._ext_widths) - 1
        grads = [None] * (2 * n_ext)
        delta = dm
        for li in range(n_ext - 1, -1, -1):
            if li < n_ext - 1:
                delta = delta * (1.0 - acts[li + 1] ** 2)
            grads[2 * li] = delta.T @ acts[li]
            grads[2 * li + 1] = delta.sum(axis=0)
            if li > 0:
                delta = delta @ mats[2 * li]
        grads += [dWh, dbh, dWo, dbo]
        return np.concatenate([g.ravel() for g in grads])

    def to_spec(self) -> dict:
        return {"variant": self.variant, "input_len": self.input_len,
                "n_channels": self.n_channels, "out_dim": self.out_dim,
                "m_dim": self.m_dim, "hidden": list(self.hidden),
                "head_width": self.head_width,
                "in_shift": self.in_shift.tolist(),
                "in_scale": self.in_scale.tolist(),
                "feat_shift": self.feat_shift.tolist(),
                "feat_scale": self.feat_scale.tolist()}

    @classmethod
    def from_spec(cls, spec) -> "ExtractorEncoder":
        return cls(spec["input_len"], spec["n_channels"], spec["out_dim"],
                   m_dim=spec.get("m_dim", 2),
                   hidden=tuple(spec.get("hidden", (96, 96))),
                   head_width=spec.get("head_width", 48),
                   in_shift=spec.get("in_shift"), in_scale=spec.get("in_scale"),
                   feat_shift=spec.get("feat_shift"),
                   feat_scale=spec.get("feat_scale"))


_VARIANTS = {"mlp": MlpEncoder, "passthrough": PassthroughEncoder,
             "resconv": ResConvEncoder, "extractor": ExtractorEncoder}


def encoder_from_spec(spec: dict):
    try:
        cls = _VARIANTS[spec["variant"]]
    except KeyError as exc:
        raise ValueError(f"unknown encoder variant {spec.get('variant')!r}") from exc
    return cls.from_spec(spec)
