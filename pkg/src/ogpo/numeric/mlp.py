"""Small multilayer perceptrons, optionally stacked into an ensemble."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape as ad

ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu, "gelu": ad.gelu}


@dataclass
class Mlp:
    """Dense net ``widths[0] -> ... -> widths[-1]`` with a linear output layer.

    With ``ensemble=M`` every weight carries a leading member axis and the
    forward pass returns ``(M, batch, out)``.
    """

    name: str
    widths: tuple[int, ...]
    activation: str = "tanh"
    ensemble: int | None = None
    params: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError(f"bad layer widths {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self, name: str | None = None) -> "Mlp":
        name = name or self.name
        params = {k.replace(self.name + ".", name + ".", 1): v.copy() for k, v in self.params.items()}
        return Mlp(name, self.widths, self.activation, self.ensemble, params)

    def zero_(self) -> "Mlp":
        for p in self.params.values():
            p[...] = 0.0
        return self


def init_mlp(
    name: str,
    widths,
    rng: np.random.Generator,
    activation: str = "tanh",
    ensemble: int | None = None,
    out_scale: float = 1.0,
) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    net = Mlp(name, widths, activation, ensemble)
    lead = () if ensemble is None else (ensemble,)
    for i, (fi, fo) in enumerate(zip(net.widths[:-1], net.widths[1:])):
        bound = np.sqrt(6.0 / (fi + fo))
        if i == net.n_layers - 1:
            bound *= out_scale
        net.params[f"{name}.W{i}"] = rng.uniform(-bound, bound, size=lead + (fi, fo))
        net.params[f"{name}.b{i}"] = np.zeros(lead + ((1, fo) if ensemble else (fo,)))
    return net


def mlp_forward(net: Mlp, x, tape: ad.Tape | None = None, params=None):
    """Forward pass. Returns a ``Var`` when ``tape`` is given, else an array."""
    if params is None:
        params = tape.watch(net.params) if tape is not None else net.params
    xv = ad.value(x)
    if np.shape(xv)[-1] != net.in_dim:
        raise ValueError(f"{net.name}: input dim {np.shape(xv)[-1]} != {net.in_dim}")
    if not isinstance(x, ad.Var) and not np.all(np.isfinite(xv)):
        raise ad.NonFiniteError(f"{net.name}: non-finite input")
    act = ACTIVATIONS[net.activation]
    h = x
    for i in range(net.n_layers):
        h = ad.matmul(h, params[f"{net.name}.W{i}"]) + params[f"{net.name}.b{i}"]
        if i < net.n_layers - 1:
            h = act(h)
    return h
