"""Small feed-forward classifier with exact reverse-mode gradients, a
grow-on-demand output head, frozen teacher snapshots, and ADADELTA updates.

Layout convention: inputs are rows of a (batch x features) matrix, weights
are (in x out), so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import NumericError, ParameterError, ShapeError, StateError

DEFAULT_HIDDEN = (64, 32)
ADADELTA_RHO = 0.95
ADADELTA_EPS = 1e-6
HEAD_INIT_STD = 0.01

_CHECKPOINT_MAGIC = b"ILCK"
_CHECKPOINT_VERSION = 1


class Classifier:
    """ReLU MLP.  The final (head) layer starts with head_size outputs and
    gains rows via expand_head; hidden layers are fixed at construction."""

    def __init__(self, input_size, hidden_sizes=DEFAULT_HIDDEN, head_size=0, seed=0):
        rng = np.random.default_rng(seed)
        self.layer_sizes = [int(input_size), *map(int, hidden_sizes), int(head_size)]
        self.weights = []
        self.biases = []
        sizes = self.layer_sizes
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            if i < len(sizes) - 2:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            else:
                w = rng.normal(0.0, HEAD_INIT_STD, size=(fan_in, fan_out))
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))
        self._cache = None

    @property
    def input_size(self):
        return self.layer_sizes[0]

    @property
    def head_size(self):
        return self.layer_sizes[-1]

    def parameters(self):
        """Flat list alternating (W, b) per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def forward(self, batch):
        """Compute logits for a (batch x input_size) matrix, caching
        activations for a subsequent backward call."""
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ShapeError(f"expected (batch, {self.input_size}) inputs, got {x.shape}")
        activations = [x]
        n_layers = len(self.weights)
        h = x
        for i in range(n_layers):
            z = h @ self.weights[i] + self.biases[i]
            if i < n_layers - 1:
                h = np.maximum(z, 0.0)
            else:
                h = z
            activations.append(h)
        self._cache = activations
        return h

    def backward(self, grad_logits):
        """Exact gradients of sum(loss) w.r.t. all parameters, given the loss
        gradient at the logits of the most recent forward pass."""
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        activations = self._cache
        g = np.asarray(grad_logits, dtype=np.float64)
        if g.shape != activations[-1].shape:
            raise ShapeError(
                f"grad shape {g.shape} != logits shape {activations[-1].shape}"
            )
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = activations[i]
            grads[2 * i] = a_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * (activations[i] > 0.0)
        self._cache = None
        return grads

    def copy(self):
        c = Classifier.__new__(Classifier)
        c.layer_sizes = list(self.layer_sizes)
        c.weights = [w.copy() for w in self.weights]
        c.biases = [b.copy() for b in self.biases]
        c._cache = None
        return c


def expand_head(c: Classifier, k_new, seed):
    """Return a copy of c whose head has k_new extra outputs.

    New columns are seeded Gaussian(0, HEAD_INIT_STD) with zero bias; existing
    head columns are copied verbatim, so pre-existing class logits are
    bit-identical before and after expansion.
    """
    if k_new < 1:
        raise ParameterError(f"must add at least one output, got {k_new}")
    rng = np.random.default_rng(seed)
    out = c.copy()
    fan_in = out.layer_sizes[-2]
    new_w = rng.normal(0.0, HEAD_INIT_STD, size=(fan_in, k_new))
    out.weights[-1] = np.concatenate([out.weights[-1], new_w], axis=1)
    out.biases[-1] = np.concatenate([out.biases[-1], np.zeros(k_new)])
    out.layer_sizes[-1] += k_new
    return out


@dataclass(frozen=True)
class TeacherSnapshot:
    """Immutable parameter copy of a classifier at snapshot time."""

    layer_sizes: tuple
    weights: tuple
    biases: tuple

    @property
    def head_size(self):
        return self.layer_sizes[-1]

    def forward(self, batch):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        n_layers = len(self.weights)
        h = x
        for i in range(n_layers):
            z = h @ self.weights[i] + self.biases[i]
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        return h


def snapshot(c: Classifier) -> TeacherSnapshot:
    ws = tuple(w.copy() for w in c.weights)
    bs = tuple(b.copy() for b in c.biases)
    for arr in ws + bs:
        arr.setflags(write=False)
    return TeacherSnapshot(layer_sizes=tuple(c.layer_sizes), weights=ws, biases=bs)


class AdadeltaState:
    """Running squared-gradient and squared-update averages per parameter."""

    def __init__(self, c: Classifier, rho=ADADELTA_RHO, eps=ADADELTA_EPS):
        if not 0.0 < rho < 1.0:
            raise ParameterError(f"rho must lie in (0, 1), got {rho}")
        if eps <= 0:
            raise ParameterError(f"eps must be positive, got {eps}")
        self.rho = rho
        self.eps = eps
        self.acc_grad = [np.zeros_like(p) for p in c.parameters()]
        self.acc_update = [np.zeros_like(p) for p in c.parameters()]

    def sync_shapes(self, c: Classifier):
        """Grow accumulators (zero-padded) after a head expansion."""
        for i, p in enumerate(c.parameters()):
            for acc_list in (self.acc_grad, self.acc_update):
                acc = acc_list[i]
                if acc.shape != p.shape:
                    grown = np.zeros_like(p)
                    grown[tuple(slice(0, s) for s in acc.shape)] = acc
                    acc_list[i] = grown


def adadelta_step(c: Classifier, grads, state: AdadeltaState):
    """Apply one ADADELTA update in place; returns (c, state).

    A non-finite gradient raises before any parameter is touched.
    """
    params = c.parameters()
    if len(grads) != len(params):
        raise ShapeError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    for g, p in zip(grads, params):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; parameters left unchanged")
    rho, eps = state.rho, state.eps
    for i, (g, p) in enumerate(zip(grads, params)):
        state.acc_grad[i] = rho * state.acc_grad[i] + (1.0 - rho) * g * g
        delta = -np.sqrt(state.acc_update[i] + eps) / np.sqrt(state.acc_grad[i] + eps) * g
        state.acc_update[i] = rho * state.acc_update[i] + (1.0 - rho) * delta * delta
        p += delta
    return c, state


def save_checkpoint(c: Classifier, path):
    """Versioned binary checkpoint: layer sizes + little-endian f64 arrays."""
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", _CHECKPOINT_VERSION, len(c.layer_sizes)))
        fh.write(struct.pack(f"<{len(c.layer_sizes)}I", *c.layer_sizes))
        for p in c.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> Classifier:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CHECKPOINT_MAGIC:
        raise NumericError(f"{path}: not a classifier checkpoint")
    version, n_sizes = struct.unpack_from("<II", blob, 4)
    if version != _CHECKPOINT_VERSION:
        raise NumericError(f"{path}: unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{n_sizes}I", blob, 12)
    c = Classifier(sizes[0], hidden_sizes=sizes[1:-1], head_size=sizes[-1], seed=0)
    offset = 12 + 4 * n_sizes
    for i in range(len(c.weights)):
        for attr, shape in ((c.weights, (sizes[i], sizes[i + 1])), (c.biases, (sizes[i + 1],))):
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
            attr[i] = arr.astype(np.float64)
            offset += 8 * count
    if offset != len(blob):
        raise NumericError(f"{path}: checkpoint has {len(blob) - offset} trailing bytes")
    return c
