"""Network building blocks: dense, strided conv, global average pool, FiLM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter, ShapeError, Tensor


class Module:
    """Base class holding Parameters; supports recursive named_parameters()."""

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = ""):
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(val, Parameter):
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}"))
                    elif isinstance(item, Parameter):
                        out.append((f"{name}.{i}", item))
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = set(own) ^ set(state)
            raise KeyError(f"parameter name mismatch: {sorted(missing)}")
        for n, p in own.items():
            if p.data.shape != state[n].shape:
                raise ShapeError(f"shape mismatch for {n}")
            p.data = np.asarray(state[n], dtype=np.float64).copy()


def _he_init(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


_ACTS = {
    "relu": Tensor.relu,
    "silu": Tensor.silu,
    "tanh": Tensor.tanh,
    "sigmoid": Tensor.sigmoid,
    "none": lambda t: t,
}


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, act: str = "none"):
        self.w = Parameter(_he_init(rng, n_in, (n_in, n_out)))
        self.b = Parameter(np.zeros(n_out))
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.w + self.b
        return _ACTS[self.act](out)


class Conv2d(Module):
    """3x3 convolution, configurable stride, zero padding 1. Input (B, C, H, W)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 stride: int = 2, act: str = "none"):
        self.w = Parameter(_he_init(rng, c_in * 9, (c_out, c_in, 3, 3)))
        self.b = Parameter(np.zeros(c_out))
        self.stride = stride
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        s = self.stride
        B, C, H, W = x.shape
        Ho, Wo = H // s, W // s
        xd = x.data
        xpad = np.zeros((B, C, H + 2, W + 2))
        xpad[:, :, 1:H + 1, 1:W + 1] = xd
        wdat = self.w.data
        out = np.zeros((B, wdat.shape[0], Ho, Wo))
        # unrolled 3x3 taps keep this a handful of large einsums
        views = []
        for di in range(3):
            for dj in range(3):
                v = xpad[:, :, di:di + s * Ho:s, dj:dj + s * Wo:s]
                views.append(v)
                out += np.einsum("bchw,oc->bohw", v, wdat[:, :, di, dj], optimize=True)
        out += self.b.data[None, :, None, None]

        xt, wt, bt = x, self.w, self.b

        def backward(g):
            gw = np.zeros_like(wdat)
            gx_pad = np.zeros_like(xpad)
            k = 0
            for di in range(3):
                for dj in range(3):
                    gw[:, :, di, dj] = np.einsum("bohw,bchw->oc", g, views[k], optimize=True)
                    gx_pad[:, :, di:di + s * Ho:s, dj:dj + s * Wo:s] += np.einsum(
                        "bohw,oc->bchw", g, wdat[:, :, di, dj], optimize=True)
                    k += 1
            gb = g.sum(axis=(0, 2, 3))
            return (gx_pad[:, :, 1:H + 1, 1:W + 1], gw, gb)

        node = Tensor._node(out, (xt, wt, bt), backward)
        return _ACTS[self.act](node)


class GlobalAvgPool(Module):
    """Mean over the spatial dimensions of (B, C, H, W)."""

    def __call__(self, x: Tensor) -> Tensor:
        return x.mean(axis=(2, 3))


class FiLM(Module):
    """Feature-wise linear modulation: f * (1 + gamma) + beta.

    gamma/beta come from a learned projection of the conditioning vector.
    """

    def __init__(self, n_feat: int, n_cond: int, rng: np.random.Generator):
        self.proj = Dense(n_cond, 2 * n_feat, rng)
        self.n_feat = n_feat

    def __call__(self, feat: Tensor, cond: Tensor) -> Tensor:
        gb = self.proj(cond)
        gamma = gb[:, : self.n_feat]
        beta = gb[:, self.n_feat:]
        return feat * (1.0 + gamma) + beta


@dataclass
class LayerSpec:
    kind: str          # dense | conv2d | global_avg_pool | film | activation
    n_in: int = 0
    n_out: int = 0
    stride: int = 2
    act: str = "none"


@dataclass
class NetworkSpec:
    """Declarative layer list; consecutive widths must compose."""

    layers: list[LayerSpec] = field(default_factory=list)

    def validate(self):
        prev_out = None
        for sp in self.layers:
            if sp.kind in ("dense", "conv2d") and prev_out is not None and sp.n_in != prev_out:
                raise ShapeError(f"layer widths do not compose: {prev_out} -> {sp.n_in}")
            if sp.kind in ("dense", "conv2d"):
                prev_out = sp.n_out
        return self


def build_network(spec: NetworkSpec, rng: np.random.Generator) -> list[Module]:
    spec.validate()
    mods: list[Module] = []
    for sp in spec.layers:
        if sp.kind == "dense":
            mods.append(Dense(sp.n_in, sp.n_out, rng, act=sp.act))
        elif sp.kind == "conv2d":
            mods.append(Conv2d(sp.n_in, sp.n_out, rng, stride=sp.stride, act=sp.act))
        elif sp.kind == "global_avg_pool":
            mods.append(GlobalAvgPool())
        elif sp.kind == "film":
            mods.append(FiLM(sp.n_out, sp.n_in, rng))
        else:
            raise ValueError(f"unknown layer kind {sp.kind!r}")
    return mods


class ModuleList(Module):
    def __init__(self, mods):
        self.mods = list(mods)

    def __iter__(self):
        return iter(self.mods)

    def __getitem__(self, i):
        return self.mods[i]
