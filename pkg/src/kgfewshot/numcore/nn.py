"""Multi-layer perceptrons over the tape ops."""

from dataclasses import dataclass

from . import tensor as T
from .params import ConfigurationError, uniform_init


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including the input width, e.g. ``(in, hidden, out)``."""

    widths: tuple
    activation: str = "tanh"
    final_activation: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(int(w) <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive: {self.widths}")
        for act in (self.activation, self.final_activation):
            if act not in T.ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @property
    def n_layers(self):
        return len(self.widths) - 1


def mlp_param_names(spec, prefix):
    return [(f"{prefix}.W{i}", f"{prefix}.b{i}") for i in range(spec.n_layers)]


def mlp_init(spec, store, prefix, rng):
    for i, (wn, bn) in enumerate(mlp_param_names(spec, prefix)):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        store.add(wn, uniform_init(rng, fan_in, (fan_in, fan_out)))
        store.add(bn, uniform_init(rng, fan_in, (1, fan_out)))


def mlp_forward(spec, store, x, prefix):
    if x.cols != spec.widths[0]:
        raise T.DimensionError(f"{prefix}: input width {x.cols} != {spec.widths[0]}")
    names = mlp_param_names(spec, prefix)
    for i, (wn, bn) in enumerate(names):
        if wn not in store or bn not in store:
            raise ConfigurationError(f"{prefix}: missing layer {i} parameters")
        x = T.add(T.matmul(x, store[wn]), store[bn])
        act = spec.final_activation if i == len(names) - 1 else spec.activation
        x = T.activate(act, x)
    return x
