"""Trainable heads: shared pre-feature layer, feature head, cluster head.

All layers carry an exact reverse-mode backward pass written against the
forward cache, so that the composed loss gradients can be checked with
finite differences. Data flows row-major (one sample per row) inside the
network; the feature head output is transposed into the d x n embedding
convention at the model boundary.

Checkpoint format (little-endian):
    magic   4 bytes  b"CGMC"
    version u32      1
    dims    u32 x 4  in_dim, hidden_dim, embed_dim, n_clusters
    tau     f64
    blobs   f64      parameter arrays in declaration order:
                     pre:  linear w, b; batchnorm gamma, beta, run_mean, run_var
                     feat: linear w, b; linear w, b
                     clus: linear w, b; linear w, b
"""

import struct

import numpy as np

CHECKPOINT_MAGIC = b"CGMC"
CHECKPOINT_VERSION = 1

GUMBEL_CLIP = 1e-12


class StaleCacheError(RuntimeError):
    """backward() called with a cache from an earlier forward()."""


class Linear:
    def __init__(self, in_dim, out_dim, rng):
        # Kaiming-uniform, fan-in mode, suited to the ReLU stacks used here.
        bound = np.sqrt(6.0 / in_dim)
        self.w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        self.b = np.zeros(out_dim)

    def forward(self, x, train):
        return x @ self.w.T + self.b, x

    def backward(self, cache, gy):
        x = cache
        return gy @ self.w, [gy.T @ x, gy.sum(axis=0)]

    def params(self):
        return [self.w, self.b]

    def state(self):
        return self.params()


class BatchNorm:
    def __init__(self, dim, momentum=0.1, eps=1e-5):
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.run_mean = np.zeros(dim)
        self.run_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, train):
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            self.run_mean = (1 - self.momentum) * self.run_mean + self.momentum * mean
            self.run_var = (1 - self.momentum) * self.run_var + self.momentum * var
            return self.gamma * xhat + self.beta, (True, xhat, inv_std)
        inv_std = 1.0 / np.sqrt(self.run_var + self.eps)
        xhat = (x - self.run_mean) * inv_std
        return self.gamma * xhat + self.beta, (False, xhat, inv_std)

    def backward(self, cache, gy):
        train, xhat, inv_std = cache
        ggamma = (gy * xhat).sum(axis=0)
        gbeta = gy.sum(axis=0)
        if train:
            gxhat = gy * self.gamma
            gx = inv_std * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        else:
            gx = gy * self.gamma * inv_std
        return gx, [ggamma, gbeta]

    def params(self):
        return [self.gamma, self.beta]

    def state(self):
        return [self.gamma, self.beta, self.run_mean, self.run_var]


class ReLU:
    def forward(self, x, train):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, gy):
        return gy * cache, []

    def params(self):
        return []

    def state(self):
        return []


class L2NormRows:
    """Normalize each row to unit Euclidean norm."""

    def forward(self, x, train):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        norms = np.maximum(norms, 1e-30)
        y = x / norms
        return y, (y, norms)

    def backward(self, cache, gy):
        y, norms = cache
        return (gy - y * (gy * y).sum(axis=1, keepdims=True)) / norms, []

    def params(self):
        return []

    def state(self):
        return []


def _softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class GumbelSoftmax:
    """Row-wise softmax((logits + G) / tau) in train mode, softmax(logits / tau) in eval."""

    def __init__(self, tau=1.0):
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.tau = tau

    def forward(self, x, train, rng=None):
        if train:
            if rng is None:
                raise ValueError("train-mode Gumbel-Softmax needs an rng")
            u = rng.uniform(size=x.shape)
            u = np.clip(u, GUMBEL_CLIP, 1.0 - GUMBEL_CLIP)
            x = x + (-np.log(-np.log(u)))
        p = _softmax_rows(x / self.tau)
        return p, p

    def backward(self, cache, gy):
        p = cache
        gx = p * (gy - (gy * p).sum(axis=1, keepdims=True)) / self.tau
        return gx, []

    def params(self):
        return []

    def state(self):
        return []


class Model:
    """Pre-feature layer plus the feature and cluster heads.

    Both heads consume the shared pre-feature output; the pre-feature
    gradient is the sum of the two head paths.
    """

    def __init__(self, in_dim, hidden_dim, embed_dim, n_clusters, tau=1.0, seed=0):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.n_clusters = n_clusters
        self.tau = tau
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        seeds = seq.spawn(5)
        rngs = [np.random.default_rng(s) for s in seeds]
        self.pre = [Linear(in_dim, hidden_dim, rngs[0]), BatchNorm(hidden_dim), ReLU()]
        self.feature_head = [
            Linear(hidden_dim, hidden_dim, rngs[1]), ReLU(),
            Linear(hidden_dim, embed_dim, rngs[2]), L2NormRows(),
        ]
        self.cluster_head = [
            Linear(hidden_dim, hidden_dim, rngs[3]), ReLU(),
            Linear(hidden_dim, n_clusters, rngs[4]), GumbelSoftmax(tau),
        ]
        self._forward_id = 0

    # -- parameter bookkeeping -------------------------------------------

    def _layers(self):
        return self.pre + self.feature_head + self.cluster_head

    def parameters(self):
        out = []
        for layer in self._layers():
            out.extend(layer.params())
        return out

    def parameter_names(self):
        names = []
        for prefix, layers in (("pre", self.pre), ("feat", self.feature_head),
                               ("clus", self.cluster_head)):
            for i, layer in enumerate(layers):
                for j in range(len(layer.params())):
                    part = "w" if j == 0 else "b"
                    names.append(f"{prefix}.{i}.{type(layer).__name__}.{part}")
        return names

    # -- forward / backward ----------------------------------------------

    def forward(self, x, train=False, rng=None):
        """Run a batch (n x in_dim rows) through both heads.

        Returns (z, pi, cache): z is embed_dim x n with unit columns, pi is
        n x n_clusters row-stochastic.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (n, {self.in_dim}), got {x.shape}")
        self._forward_id += 1
        caches = {"id": self._forward_id, "pre": [], "feat": [], "clus": []}
        h = x
        for layer in self.pre:
            h, c = layer.forward(h, train)
            caches["pre"].append(c)
        f = h
        for layer in self.feature_head:
            f, c = layer.forward(f, train)
            caches["feat"].append(c)
        g = h
        for layer in self.cluster_head:
            if isinstance(layer, GumbelSoftmax):
                g, c = layer.forward(g, train, rng)
            else:
                g, c = layer.forward(g, train)
            caches["clus"].append(c)
        return f.T, g, caches

    def backward(self, cache, grad_z, grad_pi):
        """Exact gradients of all parameters given upstream head gradients.

        grad_z is embed_dim x n (matching forward's z), grad_pi is
        n x n_clusters. Returns a flat list aligned with parameters().
        """
        if cache.get("id") != self._forward_id:
            raise StaleCacheError("cache does not match the most recent forward pass")
        gf = np.asarray(grad_z, dtype=np.float64).T
        gg = np.asarray(grad_pi, dtype=np.float64)

        grads = {"pre": None, "feat": [], "clus": []}
        for layer, c in zip(reversed(self.feature_head), reversed(cache["feat"])):
            gf, gp = layer.backward(c, gf)
            grads["feat"] = gp + grads["feat"]
        for layer, c in zip(reversed(self.cluster_head), reversed(cache["clus"])):
            gg, gp = layer.backward(c, gg)
            grads["clus"] = gp + grads["clus"]
        gh = gf + gg  # shared pre-feature layer accumulates both heads
        pre_grads = []
        for layer, c in zip(reversed(self.pre), reversed(cache["pre"])):
            gh, gp = layer.backward(c, gh)
            pre_grads = gp + pre_grads
        return pre_grads + grads["feat"] + grads["clus"]

    def head_param_slices(self):
        """(pre, feature, cluster) index ranges into the flat parameter list."""
        n_pre = sum(len(layer.params()) for layer in self.pre)
        n_feat = sum(len(layer.params()) for layer in self.feature_head)
        n_clus = sum(len(layer.params()) for layer in self.cluster_head)
        return (slice(0, n_pre),
                slice(n_pre, n_pre + n_feat),
                slice(n_pre + n_feat, n_pre + n_feat + n_clus))

    # -- persistence -------------------------------------------------------

    def _state_arrays(self):
        out = []
        for layer in self._layers():
            out.extend(layer.state())
        return out


def save_checkpoint(model: Model, path):
    header = struct.pack(
        "<4sIIIII d", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
        model.in_dim, model.hidden_dim, model.embed_dim, model.n_clusters,
        model.tau)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in model._state_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    head_size = struct.calcsize("<4sIIIII d")
    if len(blob) < head_size:
        raise ValueError(f"checkpoint truncated: {len(blob)} bytes < header {head_size}")
    magic, version, in_dim, hidden, embed, k, tau = struct.unpack("<4sIIIII d", blob[:head_size])
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    model = Model(in_dim, hidden, embed, k, tau=tau, seed=0)
    offset = head_size
    for arr in model._state_arrays():
        nbytes = arr.size * 8
        if offset + nbytes > len(blob):
            raise ValueError(f"checkpoint truncated at byte {offset}")
        arr[...] = np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").reshape(arr.shape)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{len(blob) - offset} trailing bytes in checkpoint")
    return model
