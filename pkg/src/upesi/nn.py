"""Dense networks on numpy: forward/backward passes, Adam, mse, checkpoints.

The parameters of a network live in one flat array; per-layer weight and bias
arrays are views into it.  That keeps the optimizer, polyak averaging and the
checkpoint format as single vector operations.
"""

import json
import struct
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")
CHECKPOINT_MAGIC = b"UPESIMLP"


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or update stops being finite."""


def _activate(kind, z):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(kind, y, grad):
    # derivative expressed through the activation output y
    if kind == "tanh":
        return grad * (1.0 - y * y)
    if kind == "relu":
        return grad * (y > 0.0)
    return grad


class MLP:
    """Fully connected network with a flat parameter vector.

    ``layer_sizes`` lists the widths from input to output, so a 4-layer
    network has five entries.  Inputs may be a single vector or a batch
    (rows are samples).
    """

    def __init__(self, layer_sizes, hidden_activation="relu",
                 output_activation="identity", rng=None, dtype=np.float64,
                 zero=False):
        layer_sizes = [int(n) for n in layer_sizes]
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise ValueError(f"invalid layer sizes {layer_sizes}")
        if hidden_activation not in ACTIVATIONS or output_activation not in ACTIVATIONS:
            raise ValueError("unknown activation")
        self.layer_sizes = layer_sizes
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.dtype = np.dtype(dtype)
        self.shapes = list(zip(layer_sizes[:-1], layer_sizes[1:]))
        self.params = np.zeros(sum(i * o + o for i, o in self.shapes), dtype=self.dtype)
        self.weights, self.biases = self._views(self.params)
        if not zero:
            rng = np.random.default_rng(rng)
            for w, b in zip(self.weights, self.biases):
                bound = 1.0 / np.sqrt(w.shape[0])
                w[...] = rng.uniform(-bound, bound, size=w.shape)
                b[...] = rng.uniform(-bound, bound, size=b.shape)

    def _views(self, flat):
        weights, biases, k = [], [], 0
        for i, o in self.shapes:
            weights.append(flat[k:k + i * o].reshape(i, o))
            k += i * o
            biases.append(flat[k:k + o])
            k += o
        return weights, biases

    @property
    def n_params(self):
        return self.params.size

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def activation(self, layer):
        if layer == len(self.shapes) - 1:
            return self.output_activation
        return self.hidden_activation

    def copy(self):
        other = MLP(self.layer_sizes, self.hidden_activation, self.output_activation,
                    dtype=self.dtype, zero=True)
        other.params[:] = self.params
        return other

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.in_dim or x.ndim > 2:
            raise ValueError(f"expected input of width {self.in_dim}, got shape {x.shape}")
        return x

    def forward(self, x):
        x = self._check_input(x)
        h = x
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = _activate(self.activation(layer), h @ w + b)
        return h

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass keeping every layer's input and output for backward."""
        x = self._check_input(x)
        if x.ndim == 1:
            x = x[None, :]
        acts = [x]
        h = x
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = _activate(self.activation(layer), h @ w + b)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out, want_input_grad=False, want_param_grad=True):
        """Reverse pass from dLoss/dOutput.

        Returns ``(param_grad, input_grad)``; either may be None when not
        requested.
        """
        grad = np.asarray(grad_out, dtype=self.dtype)
        if grad.ndim == 1:
            grad = grad[None, :]
        flat = np.empty_like(self.params) if want_param_grad else None
        gw, gb = self._views(flat) if want_param_grad else (None, None)
        n_layers = len(self.shapes)
        for layer in range(n_layers - 1, -1, -1):
            delta = _activation_grad(self.activation(layer), acts[layer + 1], grad)
            if want_param_grad:
                np.matmul(acts[layer].T, delta, out=gw[layer])
                gb[layer][...] = delta.sum(axis=0)
            if layer > 0 or want_input_grad:
                grad = delta @ self.weights[layer].T
        return flat, (grad if want_input_grad else None)


def mlp_forward(params, x):
    return params.forward(x)


def loss_eval(predictions, targets, kind="mse"):
    """Mean of squared elementwise differences."""
    if kind != "mse":
        raise ValueError(f"unsupported loss {kind!r}")
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch {predictions.shape} vs {targets.shape}")
    return float(np.mean((predictions - targets) ** 2))


def mse_grad(predictions, targets):
    """Gradient of the batch mse with respect to the predictions."""
    return 2.0 * (predictions - targets) / predictions.size


def mlp_gradient(params, inputs, targets, kind="mse"):
    """Exact gradient of the mean batch loss with respect to the flat parameters."""
    if kind != "mse":
        raise ValueError(f"unsupported loss {kind!r}")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=params.dtype))
    targets = np.atleast_2d(np.asarray(targets, dtype=params.dtype))
    if inputs.shape[0] == 0:
        raise ValueError("empty batch")
    if targets.shape != (inputs.shape[0], params.out_dim):
        raise ValueError(f"targets shape {targets.shape} inconsistent with batch")
    out, acts = params.forward_cache(inputs)
    grad, _ = params.backward(acts, mse_grad(out, targets))
    return grad


class Adam:
    """Bias-corrected adaptive-moment optimizer acting in place on a flat array."""

    def __init__(self, size, learning_rate=3e-4, beta1=0.9, beta2=0.999,
                 epsilon=1e-8, dtype=np.float64):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.first_moment = np.zeros(size, dtype=dtype)
        self.second_moment = np.zeros(size, dtype=dtype)
        self.step_count = 0

    def copy(self):
        other = Adam(self.first_moment.size, self.learning_rate, self.beta1,
                     self.beta2, self.epsilon, self.first_moment.dtype)
        other.first_moment[:] = self.first_moment
        other.second_moment[:] = self.second_moment
        other.step_count = self.step_count
        return other

    def step(self, params, grad):
        if grad.shape != params.shape:
            raise ValueError(f"gradient shape {grad.shape} != params shape {params.shape}")
        if not np.all(np.isfinite(grad)):
            bad = np.flatnonzero(~np.isfinite(grad))
            raise NonFiniteError(
                f"non-finite gradient at step {self.step_count}: "
                f"{bad.size} bad components, first index {bad[0]}")
        self.step_count += 1
        m, v = self.first_moment, self.second_moment
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * (grad * grad)
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        update = m / c1
        update /= np.sqrt(v / c2) + self.epsilon
        update *= self.learning_rate
        params -= update
        return params


def adam_step(state, params, gradient):
    """Functional form of one Adam update: returns new params and new state."""
    state = state.copy()
    params = np.array(params, copy=True)
    state.step(params, np.asarray(gradient, dtype=params.dtype))
    return params, state


def save_mlp(path, net, metadata=None):
    header = {
        "layer_sizes": net.layer_sizes,
        "hidden_activation": net.hidden_activation,
        "output_activation": net.output_activation,
        "dtype": net.dtype.name,
        "n_params": int(net.n_params),
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(net.params.astype("<f8").tobytes())


def load_mlp(path, with_metadata=False):
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a network checkpoint")
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n))
        payload = np.frombuffer(f.read(), dtype="<f8")
    if payload.size != header["n_params"]:
        raise ValueError(f"{path}: payload has {payload.size} values, expected {header['n_params']}")
    net = MLP(header["layer_sizes"], header["hidden_activation"],
              header["output_activation"], dtype=header["dtype"], zero=True)
    net.params[:] = payload
    if with_metadata:
        return net, header["metadata"]
    return net
