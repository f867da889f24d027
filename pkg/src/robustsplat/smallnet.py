"""Small dense feed-forward networks with hand-written reverse-mode gradients.

Shared by the inlier classifier and the per-view appearance mapper. Supports
an optional per-layer Lipschitz bound: each layer carries a trainable scalar c
and its weight rows are rescaled by min(1, softplus(c) / absolute-row-sum)
before the affine map, which caps the layer's infinity-operator-norm at
softplus(c). Everything runs on float64 numpy; inputs may be single vectors
or (batch, dim) matrices, and batched parameter gradients are summed.
"""

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    # log(exp(y) - 1), stable for y not tiny
    return y + np.log1p(-np.exp(-y))


def _apply_activation(kind, y):
    if kind == "relu":
        return np.maximum(y, 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-y))
    return y


def _activation_grad(kind, a):
    """d act / d preactivation, expressed through the activation output a."""
    if kind == "relu":
        return (a > 0.0).astype(np.float64)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(a)


@dataclass
class DenseLayer:
    weight: np.ndarray          # (out, in)
    bias: np.ndarray            # (out,)
    lipschitz_c: float
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not np.isfinite(self.lipschitz_c):
            raise ValueError("lipschitz_c must be finite")


@dataclass
class DenseNet:
    layers: list
    lipschitz: bool = False     # enable row rescaling + penalty
    _cache: list | None = field(default=None, repr=False, compare=False)

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].weight.shape[0]

    def row_scales(self, layer: DenseLayer) -> np.ndarray:
        """Per-row rescale factor min(1, softplus(c)/row-abs-sum)."""
        if not self.lipschitz:
            return np.ones(layer.weight.shape[0])
        r = np.abs(layer.weight).sum(axis=1)
        s = softplus(layer.lipschitz_c)
        return np.where(r > s, s / np.maximum(r, 1e-300), 1.0)

    def effective_weight(self, layer: DenseLayer) -> np.ndarray:
        return layer.weight * self.row_scales(layer)[:, None]

    def forward(self, x):
        """Evaluate the net; caches intermediates for a following backward."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        a = x[None, :] if single else x
        if a.shape[1] != self.input_dim:
            raise ValueError(f"expected input dim {self.input_dim}, got {a.shape[1]}")
        cache = [{"x": a}]
        for layer in self.layers:
            u = a @ layer.weight.T          # pre-rescale row dots, needed for dW/dc
            y = u * self.row_scales(layer)[None, :] + layer.bias
            a = _apply_activation(layer.activation, y)
            cache.append({"x": a, "u": u, "a": a})
        self._cache = cache
        return a[0] if single else a

    def backward(self, x, grad_out):
        """Reverse-mode gradients for the most recent forward on x.

        Returns (param_grads, grad_x) where param_grads is a list of
        (dW, db, dc) per layer. Batched inputs sum their parameter gradients.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if self._cache is None or not np.array_equal(self._cache[0]["x"], x2):
            raise ValueError("no forward cache for this input; call forward first")
        g = np.asarray(grad_out, dtype=np.float64)
        g = g[None, :] if single else g

        param_grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            x_in = self._cache[i]["x"]
            a = self._cache[i + 1]["a"]
            u = self._cache[i + 1]["u"]
            gy = g * _activation_grad(layer.activation, a)
            db = gy.sum(axis=0)
            if self.lipschitz:
                r = np.abs(layer.weight).sum(axis=1)
                s = softplus(layer.lipschitz_c)
                norm_rows = r > s
                scale = np.where(norm_rows, s / np.maximum(r, 1e-300), 1.0)
                # normalized row i: w_eff_ij = s*W_ij/r_i, so dW picks up a
                # -sign(W_ij)*scale_i*(g.u)_i/r_i correction and c feeds in via s
                gu = (gy * u).sum(axis=0)
                dw = scale[:, None] * (gy.T @ x_in)
                corr = np.where(norm_rows, scale * gu / np.maximum(r, 1e-300), 0.0)
                dw -= corr[:, None] * np.sign(layer.weight)
                ds = np.where(norm_rows, gu / np.maximum(r, 1e-300), 0.0).sum()
                dc = float(ds / (1.0 + np.exp(-layer.lipschitz_c)))  # softplus' = sigmoid
                w_eff = layer.weight * scale[:, None]
            else:
                dw = gy.T @ x_in
                dc = 0.0
                w_eff = layer.weight
            param_grads[i] = (dw, db, dc)
            g = gy @ w_eff
        return param_grads, (g[0] if single else g)


def dense_net(dims, activations, seed=0, lipschitz=False, zero_init_last=False) -> DenseNet:
    """Build a net with He/Xavier-style init; dims = [in, h1, ..., out]."""
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng(seed)
    layers = []
    for i, act in enumerate(activations):
        fan_in, fan_out = dims[i], dims[i + 1]
        gain = np.sqrt(2.0 / fan_in) if act == "relu" else np.sqrt(1.0 / fan_in)
        w = rng.normal(0.0, gain, size=(fan_out, fan_in))
        if zero_init_last and i == len(activations) - 1:
            w = np.zeros_like(w)
        b = np.zeros(fan_out)
        # start the bound at the actual row norm so rescaling is a no-op
        r_max = max(float(np.abs(w).sum(axis=1).max()), 1e-3)
        layers.append(DenseLayer(w, b, float(inv_softplus(np.float64(r_max))), act))
    return DenseNet(layers, lipschitz=lipschitz)


def classifier_net(input_dim: int, seed: int = 0) -> DenseNet:
    """Default inlier classifier: input -> 64 -> 64 -> 1 with sigmoid output."""
    return dense_net([input_dim, 64, 64, 1], ["relu", "relu", "sigmoid"],
                     seed=seed, lipschitz=True)


def forward(net: DenseNet, x):
    return net.forward(x)


def backward(net: DenseNet, x, grad_out):
    return net.backward(x, grad_out)


def lipschitz_penalty(net: DenseNet) -> float:
    """Product of the per-layer learned bounds, prod_i softplus(c_i)."""
    if not net.lipschitz:
        raise ValueError("Lipschitz normalization is not enabled on this net")
    return float(np.prod([softplus(l.lipschitz_c) for l in net.layers]))


def lipschitz_penalty_grad(net: DenseNet) -> np.ndarray:
    """d penalty / d c_i = sigmoid(c_i) * prod_{j != i} softplus(c_j)."""
    sp = np.array([softplus(l.lipschitz_c) for l in net.layers])
    sig = np.array([1.0 / (1.0 + np.exp(-l.lipschitz_c)) for l in net.layers])
    total = np.prod(sp)
    return sig * total / sp


def grad_check(net: DenseNet, x, step: float = 1e-4) -> float:
    """Max relative error of backward vs central finite differences.

    Probes every weight, bias, and (when normalization is on) every bound c,
    plus the input itself, using the scalar objective sum(forward(x)).
    """
    x = np.asarray(x, dtype=np.float64)

    def objective():
        return float(np.sum(net.forward(x)))

    out = net.forward(x)
    grads, gx = net.backward(x, np.ones_like(out))
    worst = 0.0

    def rel_err(analytic, a, idx):
        nonlocal worst
        orig = a[idx]
        a[idx] = orig + step
        hi = objective()
        a[idx] = orig - step
        lo = objective()
        a[idx] = orig
        fd = (hi - lo) / (2 * step)
        worst = max(worst, abs(analytic - fd) / max(abs(fd), abs(analytic), 1e-6))

    for li, layer in enumerate(net.layers):
        dw, db, dc = grads[li]
        for idx in np.ndindex(layer.weight.shape):
            rel_err(dw[idx], layer.weight, idx)
        for j in range(layer.bias.size):
            rel_err(db[j], layer.bias, (j,))
        if net.lipschitz:
            orig = layer.lipschitz_c
            layer.lipschitz_c = orig + step
            hi = objective()
            layer.lipschitz_c = orig - step
            lo = objective()
            layer.lipschitz_c = orig
            fd = (hi - lo) / (2 * step)
            worst = max(worst, abs(dc - fd) / max(abs(fd), abs(dc), 1e-6))
    flat = x.reshape(-1)       # view: FD probes mutate x in place, then restore
    gflat = np.asarray(gx).reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        hi = objective()
        flat[j] = orig - step
        lo = objective()
        flat[j] = orig
        fd = (hi - lo) / (2 * step)
        worst = max(worst, abs(gflat[j] - fd) / max(abs(fd), abs(gflat[j]), 1e-6))
    net.forward(x)  # restore a clean cache for the probed input
    return worst


class Adam:
    """Adaptive moment optimizer over a flat list of parameter arrays."""

    def __init__(self, shapes, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads, lr=None):
        """Update params in place; scalars are returned (floats are immutable)."""
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            g = np.asarray(g, dtype=np.float64)
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            upd = lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            if isinstance(p, np.ndarray):
                p -= upd
                out.append(p)
            else:
                out.append(p - float(upd))
        return out


def adam_for_net(net: DenseNet, lr=1e-3) -> Adam:
    shapes = []
    for layer in net.layers:
        shapes.extend([layer.weight.shape, layer.bias.shape, ()])
    return Adam(shapes, lr=lr)


def net_adam_step(net: DenseNet, opt: Adam, param_grads, extra_c_grads=None, lr=None):
    """Apply one Adam update to every layer's W, b, c from backward's output.

    extra_c_grads optionally adds a term (e.g. the penalty gradient) to each
    layer's dc before the update.
    """
    params, grads = [], []
    for i, layer in enumerate(net.layers):
        dw, db, dc = param_grads[i]
        if extra_c_grads is not None:
            dc = dc + extra_c_grads[i]
        params.extend([layer.weight, layer.bias, layer.lipschitz_c])
        grads.extend([dw, db, dc])
    new = opt.step(params, grads, lr=lr)
    for i, layer in enumerate(net.layers):
        layer.lipschitz_c = float(new[3 * i + 2])
