"""Parameterized layers, the Adam optimizer, and the checkpoint container."""

from __future__ import annotations

import io

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Module:
    """Minimal container: submodules and parameters discovered by attribute."""

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix=""):
        out = []
        for name, val in vars(self).items():
            self._collect(f"{prefix}{name}", val, out)
        return out

    @staticmethod
    def _collect(key, val, out):
        if isinstance(val, Tensor):
            if val.requires_grad:
                out.append((key, val))
        elif isinstance(val, Module):
            out.extend(val.named_parameters(prefix=f"{key}."))
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                Module._collect(f"{key}.{i}", item, out)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, n_in, n_out, rng, init_scale=1.0):
        std = init_scale * np.sqrt(2.0 / n_in)
        self.w = Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x):
        return T.add(T.matmul(x, self.w), self.b)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, init_scale=1.0):
        fan_in = c_in * kernel * kernel
        std = init_scale * np.sqrt(2.0 / fan_in)
        self.w = Tensor(rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)), requires_grad=True)
        self.b = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, channels, num_groups, partition=None, eps=T.GROUP_NORM_EPS):
        if partition is None and channels % num_groups:
            raise ConfigError(f"{channels} channels not divisible by {num_groups} groups")
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.num_groups = num_groups
        self.partition = partition
        self.eps = eps

    def __call__(self, x):
        return T.group_norm(
            x, self.weight, self.bias,
            num_groups=self.num_groups, partition=self.partition, eps=self.eps,
        )


class Adam:
    """Standard Adam over a parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1**self.t)
            vhat = self.v[i] / (1 - b2**self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# -- checkpoint container -----------------------------------------------------
#
# Layout: a utf-8 text header terminated by an ``end-header`` line, followed by
# the raw little-endian float64 payload of each declared array, in order.
#
#   skiplab-checkpoint 1
#   kind <model-kind>
#   config <key> <value>
#   array <name> <dim0> <dim1> ...
#   end-header

CHECKPOINT_MAGIC = "skiplab-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind, config, named_arrays):
    buf = io.StringIO()
    buf.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
    buf.write(f"kind {kind}\n")
    for key, value in config.items():
        buf.write(f"config {key} {value}\n")
    arrays = []
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        dims = " ".join(str(d) for d in arr.shape)
        buf.write(f"array {name} {dims}\n")
        arrays.append(arr)
    buf.write("end-header\n")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue().encode("utf-8"))
        for arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Return (kind, config: dict[str, str], arrays: dict[str, ndarray])."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end-header\n")
    if end < 0:
        raise ConfigError(f"{path}: not a checkpoint file (missing header terminator)")
    header = blob[:end].decode("utf-8").splitlines()
    payload = blob[end + len(b"end-header\n") :]
    magic = header[0].split()
    if magic[0] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: bad magic {magic[0]!r}")
    if int(magic[1]) != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported format version {magic[1]}")
    kind = None
    config = {}
    manifest = []
    for line in header[1:]:
        fields = line.split()
        if fields[0] == "kind":
            kind = fields[1]
        elif fields[0] == "config":
            config[fields[1]] = " ".join(fields[2:])
        elif fields[0] == "array":
            manifest.append((fields[1], tuple(int(d) for d in fields[2:])))
        else:
            raise ConfigError(f"{path}: unknown header line {line!r}")
    arrays = {}
    off = 0
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += n * 8
    if off != len(payload):
        raise ConfigError(f"{path}: payload size mismatch")
    return kind, config, arrays


def load_into_module(module, arrays):
    named = dict(module.named_parameters())
    if set(named) != set(arrays):
        missing = set(named) ^ set(arrays)
        raise ConfigError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
    for name, param in named.items():
        if param.data.shape != arrays[name].shape:
            raise ConfigError(f"parameter {name}: shape {arrays[name].shape} != {param.data.shape}")
        param.data = arrays[name].astype(np.float64)
