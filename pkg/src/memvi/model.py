"""Layered decoder, its vector-Jacobian products, and a small VAE.

Layer ``l`` of a :class:`LayerStack` maps ``h[l+1]`` to the prediction of
``h[l]``: ``layers[0]`` produces the observation and ``layers[-1]`` consumes
the latent ``z``. Decoding therefore runs from the last layer to the first.
"""
import copy
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import MemviError, NumericError, ShapeError

ACTIVATIONS = ("identity", "tanh", "relu")


def _act(name, a):
    if name == "identity":
        return a
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    raise MemviError(f"unknown activation {name!r}")


def _act_grad(name, a):
    if name == "identity":
        return np.ones_like(a)
    if name == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    if name == "relu":
        # subgradient at 0 is 0
        return (a > 0.0).astype(np.float64)
    raise MemviError(f"unknown activation {name!r}")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.atleast_2d(np.asarray(self.weight, dtype=np.float64))
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(f"bias {self.bias.shape} does not match weight {self.weight.shape}")
        if self.activation not in ACTIVATIONS:
            raise MemviError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


def _check_in(layer, h):
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1 or h.shape[0] != layer.in_dim:
        raise ShapeError(f"layer expects input of dim {layer.in_dim}, got shape {h.shape}")
    return h


def layer_forward(layer, h_in):
    h_in = _check_in(layer, h_in)
    return _act(layer.activation, layer.weight @ h_in + layer.bias)


def layer_vjp(layer, h_in, upstream):
    """``J^T upstream`` with ``J`` the Jacobian of :func:`layer_forward` at ``h_in``."""
    h_in = _check_in(layer, h_in)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (layer.out_dim,):
        raise ShapeError(f"upstream shape {upstream.shape} does not match layer output {layer.out_dim}")
    a = layer.weight @ h_in + layer.bias
    return layer.weight.T @ (_act_grad(layer.activation, a) * upstream)


def layer_backward(layer, h_in, upstream):
    """Gradients w.r.t. input, weight and bias for a scalar with output-gradient ``upstream``."""
    a = layer.weight @ h_in + layer.bias
    delta = _act_grad(layer.activation, a) * upstream
    return layer.weight.T @ delta, np.outer(delta, h_in), delta


class LayerStack:
    """Ordered layers; ``layers[l]`` maps ``h[l+1] -> h[l]``."""

    def __init__(self, layers):
        layers = list(layers)
        if not layers:
            raise MemviError("a layer stack needs at least one layer")
        for l in range(len(layers) - 1):
            if layers[l].in_dim != layers[l + 1].out_dim:
                raise ShapeError(
                    f"layer {l} expects input dim {layers[l].in_dim} but layer {l + 1} "
                    f"outputs {layers[l + 1].out_dim}"
                )
        self.layers = layers

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, l):
        return self.layers[l]

    def __iter__(self):
        return iter(self.layers)

    @property
    def depth(self):
        return len(self.layers)

    @property
    def input_dim(self):
        return self.layers[-1].in_dim

    @property
    def output_dim(self):
        return self.layers[0].out_dim

    @property
    def dims(self):
        """``[d0, ..., dL]`` from the observation side to the latent side."""
        return [layer.out_dim for layer in self.layers] + [self.input_dim]

    def copy(self):
        return copy.deepcopy(self)


def decode(stack, z):
    """Pure forward cascade from ``z``.

    Returns ``(predictions, x_hat)`` where ``predictions[l] = f_l(h[l+1])`` and
    ``x_hat = predictions[0]``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (stack.input_dim,):
        raise ShapeError(f"decoder expects latent of dim {stack.input_dim}, got shape {z.shape}")
    preds = [None] * stack.depth
    h = z
    for l in range(stack.depth - 1, -1, -1):
        h = layer_forward(stack[l], h)
        preds[l] = h
    return preds, preds[0]


def stack_vjp(stack, z, upstream):
    """``J^T upstream`` for the whole decoder ``z -> x_hat``, by chaining :func:`layer_vjp`."""
    preds, _ = decode(stack, z)
    g = np.asarray(upstream, dtype=np.float64)
    for l in range(stack.depth):
        h_in = preds[l + 1] if l + 1 < stack.depth else z
        g = layer_vjp(stack[l], h_in, g)
    return g


def random_stack(dims, activations, rng, scale=1.0):
    """Stack with ``N(0, scale^2 / fan_in)`` weights and zero biases.

    ``dims`` runs from the observation side to the latent side, like
    :attr:`LayerStack.dims`; ``activations[l]`` belongs to ``layers[l]``.
    """
    if len(activations) != len(dims) - 1:
        raise MemviError("need one activation per layer")
    layers = []
    for l, act in enumerate(activations):
        out_d, in_d = dims[l], dims[l + 1]
        w = rng.standard_normal((out_d, in_d)) * (scale / math.sqrt(in_d))
        layers.append(Layer(w, np.zeros(out_d), act))
    return LayerStack(layers)


# --------------------------------------------------------------------------
# VAE
# --------------------------------------------------------------------------

@dataclass
class VaeModel:
    encoder: LayerStack
    decoder: LayerStack

    def __post_init__(self):
        d = self.decoder.input_dim
        if self.encoder.output_dim != 2 * d:
            raise ShapeError(f"encoder must output 2*latent_dim = {2 * d}, got {self.encoder.output_dim}")
        if self.encoder.input_dim != self.decoder.output_dim:
            raise ShapeError("encoder input dim must equal decoder output dim")

    @property
    def latent_dim(self):
        return self.decoder.input_dim

    @property
    def obs_dim(self):
        return self.decoder.output_dim

    def copy(self):
        return copy.deepcopy(self)


def init_vae(rng, obs_dim=16, latent_dim=8, hidden=32, activation="tanh"):
    """Default desk-scale VAE: decoder ``latent -> hidden (tanh) -> obs``, encoder mirrored."""
    decoder = random_stack([obs_dim, hidden, latent_dim], ["identity", activation], rng)
    encoder = random_stack([2 * latent_dim, hidden, obs_dim], ["identity", activation], rng)
    return VaeModel(encoder, decoder)


def _run_stack(stack, h):
    """Forward pass keeping every layer input (``inputs[l]`` feeds ``layers[l]``)."""
    inputs = [None] * stack.depth
    for l in range(stack.depth - 1, -1, -1):
        inputs[l] = h
        h = layer_forward(stack[l], h)
    return inputs, h


def encode(vae, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (vae.encoder.input_dim,):
        raise ShapeError(f"encoder expects input of dim {vae.encoder.input_dim}, got shape {x.shape}")
    _, out = _run_stack(vae.encoder, x)
    d = vae.latent_dim
    return out[:d], out[d:]


def _backprop_params(stack, inputs, upstream, lr):
    """Backprop ``upstream`` through ``stack`` and apply an SGD step in place."""
    g = upstream
    for l in range(stack.depth):
        layer = stack[l]
        g_in, gw, gb = layer_backward(layer, inputs[l], g)
        layer.weight -= lr * gw
        layer.bias -= lr * gb
        g = g_in
    return g


def vae_sample_loss(vae, x, eps):
    """Per-sample loss ``0.5*|x_hat - x|^2 + KL(q(z|x) || N(0, I))`` with a fixed noise draw."""
    mu, logvar = encode(vae, x)
    z = mu + np.exp(0.5 * logvar) * eps
    _, x_hat = decode(vae.decoder, z)
    r = x_hat - x
    kl = 0.5 * float(np.sum(np.exp(logvar) + mu * mu - 1.0 - logvar))
    return 0.5 * float(r @ r) + kl


def train_vae(vae, dataset, epochs, learning_rate, rng):
    """Per-sample SGD with the reparameterization trick.

    Works on a private copy; returns ``(trained_vae, loss_trace)`` where
    ``loss_trace[e]`` is the mean per-sample loss during epoch ``e``.
    """
    data = [np.asarray(x, dtype=np.float64) for x in dataset]
    if not data:
        raise MemviError("empty dataset")
    if learning_rate < 0:
        raise MemviError("learning_rate must be non-negative")
    vae = vae.copy()
    d = vae.latent_dim
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for i in order:
            x = data[i]
            enc_in, out = _run_stack(vae.encoder, x)
            mu, logvar = out[:d], out[d:]
            std = np.exp(0.5 * logvar)
            eps = rng.standard_normal(d)
            z = mu + std * eps
            dec_in, x_hat = _run_stack(vae.decoder, z)
            r = x_hat - x
            kl = 0.5 * float(np.sum(std * std + mu * mu - 1.0 - logvar))
            loss = 0.5 * float(r @ r) + kl
            if not math.isfinite(loss):
                raise NumericError(f"non-finite VAE loss at epoch {epoch}, sample {int(i)}: {loss}")
            total += loss
            gz = _backprop_params(vae.decoder, dec_in, r, learning_rate)
            g_mu = gz + mu
            g_logvar = 0.5 * gz * eps * std + 0.5 * (std * std - 1.0)
            _backprop_params(vae.encoder, enc_in, np.concatenate([g_mu, g_logvar]), learning_rate)
        trace.append(total / len(data))
    return vae, trace


def reconstruction_mse(vae, dataset):
    """Mean squared error of ``decode(encode(x).mu)`` over the dataset."""
    errs = []
    for x in dataset:
        mu, _ = encode(vae, x)
        _, x_hat = decode(vae.decoder, mu)
        errs.append(np.mean((x_hat - np.asarray(x)) ** 2))
    return float(np.mean(errs))


# --------------------------------------------------------------------------
# text persistence
# --------------------------------------------------------------------------

def _fmt(values):
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def _dump_stack(out, stack, prefix=""):
    dims = ",".join(str(d) for d in stack.dims)
    acts = ",".join(layer.activation for layer in stack)
    out.write(f"{prefix}layers={stack.depth} dims={dims} activations={acts}\n")
    for layer in stack:
        out.write(_fmt(layer.weight) + "\n")
        out.write(_fmt(layer.bias) + "\n")


def dumps_model(vae=None, precision_raw=None):
    """Serialize a model to the documented text format.

    Layout: a decoder header ``layers=<L> dims=<d0,...,dL> activations=<a0,...>``
    followed by, for each layer ``l = 0..L-1``, one line with the row-major
    weight and one line with the bias. The encoder follows with the same layout
    under an ``encoder layers=...`` header. An optional ``precision_raw= ...``
    line carries trained precision parameters. Floats use 17 significant digits.
    """
    out = io.StringIO()
    if vae is not None:
        _dump_stack(out, vae.decoder)
        _dump_stack(out, vae.encoder, prefix="encoder ")
    if precision_raw is not None:
        out.write("precision_raw= " + _fmt(precision_raw) + "\n")
    return out.getvalue()


def _parse_header(line):
    fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
    try:
        depth = int(fields["layers"])
        dims = [int(v) for v in fields["dims"].split(",")]
    except (KeyError, ValueError) as exc:
        raise MemviError(f"malformed model header: {line!r}") from exc
    acts = fields.get("activations")
    acts = acts.split(",") if acts else ["identity"] * depth
    if len(dims) != depth + 1 or len(acts) != depth:
        raise MemviError(f"inconsistent model header: {line!r}")
    return depth, dims, acts


def _floats(line, count, what):
    vals = np.array([float(v) for v in line.split()], dtype=np.float64)
    if vals.size != count:
        raise MemviError(f"{what}: expected {count} values, got {vals.size}")
    return vals


def loads_model(text):
    """Inverse of :func:`dumps_model`; returns ``(vae_or_None, precision_raw_or_None)``."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    stacks = {}
    precision_raw = None
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("precision_raw="):
            precision_raw = np.array([float(v) for v in line.split("=", 1)[1].split()])
            i += 1
            continue
        role = "encoder" if line.startswith("encoder ") else "decoder"
        if "layers=" not in line:
            raise MemviError(f"unexpected line {i + 1} in model file")
        depth, dims, acts = _parse_header(line)
        if i + 2 * depth >= len(lines):
            raise MemviError(f"truncated model file: {role} needs {2 * depth} parameter lines")
        layers = []
        for l in range(depth):
            out_d, in_d = dims[l], dims[l + 1]
            w = _floats(lines[i + 1 + 2 * l], out_d * in_d, f"{role} layer {l} weight").reshape(out_d, in_d)
            b = _floats(lines[i + 2 + 2 * l], out_d, f"{role} layer {l} bias")
            layers.append(Layer(w, b, acts[l]))
        stacks[role] = LayerStack(layers)
        i += 1 + 2 * depth
    vae = None
    if "decoder" in stacks:
        if "encoder" not in stacks:
            raise MemviError("model file has a decoder but no encoder")
        vae = VaeModel(stacks["encoder"], stacks["decoder"])
    return vae, precision_raw


def save_model(path, vae=None, precision_raw=None):
    with open(path, "w") as fh:
        fh.write(dumps_model(vae, precision_raw))


def load_model(path):
    with open(path) as fh:
        return loads_model(fh.read())
