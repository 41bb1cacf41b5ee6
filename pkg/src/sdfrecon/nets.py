"""Small MLPs and sinusoidal encodings used by the decoder and field networks."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def positional_encoding(x: ad.Var, n_freqs: int, include_input: bool = True,
                        band_weights=None) -> ad.Var:
    """Per-channel sinusoidal features [x, sin(2^k x), cos(2^k x)], k < n_freqs.

    x: [N, C] in roughly [-1, 1]. Output width C·(2·n_freqs + include_input).
    band_weights, if given, scales band k's sin/cos block by band_weights[k];
    since the features feed a linear layer, any fixed weighting is equivalent
    to rescaling that layer's rows (see Mlp users that fold windows).
    """
    enc = ad.fourier_encode(x, n_freqs, band_weights)
    if include_input:
        return enc
    return enc[:, x.data.shape[1]:]


def coarse_to_fine_window(alpha: float, n_freqs: int) -> np.ndarray:
    """Per-band weights that fade band k in smoothly as alpha crosses k.

    alpha=0 silences every band (raw input only); alpha>=n_freqs is the full
    encoding. Used to keep high-frequency features from dominating early
    optimization.
    """
    t = np.clip(alpha - np.arange(n_freqs), 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * t))


def encoding_width(in_dim: int, n_freqs: int, include_input: bool = True) -> int:
    return in_dim * (2 * n_freqs + int(include_input))


_ACTIVATIONS = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "tanh": ad.tanh,
    "none": lambda v: v,
}


class Mlp:
    """Fully-connected net; weights live in the shared ParamStore under a prefix."""

    def __init__(
        self,
        store: ad.ParamStore,
        prefix: str,
        widths: list[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        out_activation: str = "none",
        dtype=np.float32,
        create: bool = True,
    ):
        if len(widths) < 2:
            raise ValueError("widths must list input and output dims at least")
        self.prefix = prefix
        self.hidden_activation = hidden_activation
        self.out_activation = out_activation
        self.widths = list(widths)
        self.weight_ids = []
        self.bias_ids = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            wid, bid = f"{prefix}/w{i}", f"{prefix}/b{i}"
            if create:
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
                store.add(wid, w.astype(dtype))
                store.add(bid, np.zeros(fan_out, dtype=dtype))
            self.weight_ids.append(wid)
            self.bias_ids.append(bid)
        self.store = store

    def __call__(self, tape: ad.Tape, x: ad.Var) -> ad.Var:
        if x.data.ndim != 2 or x.data.shape[1] != self.widths[0]:
            raise ad.ShapeError(
                f"{self.prefix}: expected input [N, {self.widths[0]}], got {x.data.shape}"
            )
        act = _ACTIVATIONS[self.hidden_activation]
        h = x
        last = len(self.weight_ids) - 1
        for i, (wid, bid) in enumerate(zip(self.weight_ids, self.bias_ids)):
            w = tape.leaf(self.store.get(wid))
            b = tape.leaf(self.store.get(bid))
            h = ad.add(ad.matmul(h, w), b)
            if i != last:
                h = act(h)
        return _ACTIVATIONS[self.out_activation](h)

    def parameters(self) -> list[ad.Parameter]:
        return [self.store.get(i) for i in self.weight_ids + self.bias_ids]
