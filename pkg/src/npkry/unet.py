"""Convolutional encoder-decoder preconditioner network.

The input vector and the parameter field are stacked as a two-channel
volume. Each encoder level applies a 3x3x3 convolution (levels past the
first are followed by 2x2x2 max pooling); a bottleneck convolution sits at
the coarsest level; each decoder level upsamples with a stride-2 transposed
convolution, concatenates the matching encoder output and convolves back to
the level width. A 1x1x1 projection produces the single output channel.
Leaky-ReLU follows every layer except that projection.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ModelParams, ops
from .autodiff.kernels import transposed_full_size

__all__ = [
    "UNetDescriptor",
    "apply",
    "apply_ad",
    "flatten",
    "forward",
    "init_params",
    "layer_table",
    "pad_or_embed",
]


@dataclass(frozen=True)
class UNetDescriptor:
    """Architecture of the network.

    Parameters
    ----------
    grid : tuple of int
        Volume shape ``(n1, n2, n3)``; the operated vectors have
        ``n1 * n2 * n3`` entries.
    widths : tuple of int
        Channel width per level; ``len(widths)`` is the depth.
    kernel_size : int
        Odd size of the same-padded convolutions.
    up_kernel : int
        Kernel size of the stride-2 transposed convolutions.
    in_channels : int
        Number of stacked input fields (vector and parameter field).
    slope : float
        Negative slope of the leaky ReLU.
    out_scale : float
        Fixed (untrained) factor applied to the output. Setting it to the
        square of the training-set diagonal normalization lets the trainable
        part work at unit scale; Krylov iterates do not depend on it.
    """

    grid: tuple = (9, 9, 9)
    widths: tuple = (8, 16, 32)
    kernel_size: int = 3
    up_kernel: int = 2
    in_channels: int = 2
    slope: float = 0.01
    out_scale: float = 1.0
    level_sizes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        grid = (self.grid,) * 3 if np.isscalar(self.grid) else tuple(int(g) for g in self.grid)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(grid) != 3 or min(grid) < 1:
            raise ValueError(f"grid must be three positive sizes, got {self.grid}")
        if not self.widths or min(self.widths) < 1:
            raise ValueError("widths must be a non-empty tuple of positive ints")
        if not (np.isfinite(self.out_scale) and self.out_scale > 0):
            raise ValueError("out_scale must be positive and finite")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        sizes = [grid]
        for _ in self.widths[1:]:
            nxt = tuple(s // 2 for s in sizes[-1])
            if min(nxt) < 1:
                raise ValueError(f"grid {grid} too small for {len(self.widths)} levels")
            sizes.append(nxt)
        for fine, coarse in zip(sizes, sizes[1:]):
            for f, c in zip(fine, coarse):
                full = transposed_full_size(c, self.up_kernel, 2)
                if not full <= f < full + 2:
                    raise ValueError(f"up kernel {self.up_kernel} cannot map {c} back to {f}")
        object.__setattr__(self, "level_sizes", tuple(sizes))

    @classmethod
    def paper(cls, **kw):
        """Three-level network on a 21^3 grid with widths 32/64/128."""
        return cls(grid=(21, 21, 21), widths=(32, 64, 128), **kw)

    @classmethod
    def desk(cls, grid_n=9, **kw):
        return cls(grid=(grid_n,) * 3, widths=(8, 16, 32), **kw)

    @property
    def depth(self):
        return len(self.widths)

    @property
    def n(self):
        return int(np.prod(self.grid))

    def to_dict(self):
        d = asdict(self)
        d.pop("level_sizes")
        d["grid"] = list(self.grid)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("kind", None)
        return cls(**{**d, "grid": tuple(d["grid"]), "widths": tuple(d["widths"])})

    def layer_shapes(self):
        """Ordered ``name -> shape`` of every parameter tensor."""
        k, ku, w = self.kernel_size, self.up_kernel, self.widths
        shapes = {"enc0.w": (w[0], self.in_channels, k, k, k)}
        for j in range(1, self.depth):
            shapes[f"enc{j}.w"] = (w[j], w[j - 1], k, k, k)
        shapes["bottleneck.w"] = (w[-1], w[-1], k, k, k)
        for j in range(self.depth - 1, 0, -1):
            shapes[f"up{j}.w"] = (w[j], w[j - 1], ku, ku, ku)
            shapes[f"up{j}.b"] = (w[j - 1],)
            shapes[f"dec{j}.w"] = (w[j - 1], 2 * w[j - 1], k, k, k)
        shapes["head.w"] = (1, w[0], 1, 1, 1)
        shapes["head.b"] = (1,)
        return shapes


def _layout(desc):
    layout, pos = {}, 0
    for name, shape in desc.layer_shapes().items():
        size = int(np.prod(shape))
        layout[name] = (pos, pos + size, shape)
        pos += size
    return layout, pos


def _fan_in(name, shape, desc):
    if name.startswith("up"):
        return max(1, shape[0] * (desc.up_kernel // 2) ** 3)
    return int(np.prod(shape[1:]))


def init_params(desc: UNetDescriptor, seed=0) -> ModelParams:
    """Fan-in scaled uniform (Kaiming) initialization; biases start at zero."""
    rng = np.random.default_rng(seed)
    layout, total = _layout(desc)
    theta = np.zeros(total)
    gain = np.sqrt(2.0 / (1.0 + desc.slope ** 2))
    for name, (start, stop, shape) in layout.items():
        if name.endswith(".b"):
            continue
        g = 1.0 if name.startswith("head") else gain
        bound = g * np.sqrt(3.0 / _fan_in(name, shape, desc))
        theta[start:stop] = rng.uniform(-bound, bound, size=stop - start)
    return ModelParams(theta, layout, {"kind": "unet", **desc.to_dict()})


def descriptor_of(params: ModelParams) -> UNetDescriptor:
    return UNetDescriptor.from_dict(params.arch)


def pad_or_embed(v, grid):
    """Row-major reshape of a length-N vector into a volume of shape ``grid``."""
    grid = (grid,) * 3 if np.isscalar(grid) else tuple(grid)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size != int(np.prod(grid)):
        raise ValueError(f"vector of length {v.size} does not fill a {grid} grid")
    return v.reshape(grid)


def flatten(volume):
    return np.asarray(volume).reshape(-1)


def forward(params: ModelParams, v, d, theta=None, desc=None):
    """Evaluate the network on one vector ``(N,)`` or a batch ``(B, N)``.

    ``theta`` (a tape Variable) switches to recorded evaluation; ``v`` may
    also be a Variable. ``d`` is the constant parameter field, shaped like
    ``v`` or ``(N,)`` to share it across the batch.
    """
    desc = desc or descriptor_of(params)
    vv = ops.value_of(v)
    single = vv.ndim == 1
    if vv.shape[-1] != desc.n:
        raise ValueError(f"input length {vv.shape[-1]} does not match grid {desc.grid}")
    B = 1 if single else vv.shape[0]
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != desc.n:
        raise ValueError(f"parameter field length {d.shape[-1]} does not match grid {desc.grid}")
    d = np.broadcast_to(d, (B, desc.n))
    vol = (B, 1) + desc.grid
    x = ops.concat_channels([ops.reshape(v, vol), d.reshape(vol)])

    P = params.view(theta)
    act = lambda t: ops.leaky_relu(t, desc.slope)  # noqa: E731
    h = act(ops.conv3d(x, P["enc0.w"]))
    skips = [h]
    for j in range(1, desc.depth):
        h = ops.maxpool3d(act(ops.conv3d(h, P[f"enc{j}.w"])))
        skips.append(h)
    h = act(ops.conv3d(h, P["bottleneck.w"]))
    for j in range(desc.depth - 1, 0, -1):
        target = desc.level_sizes[j - 1]
        h = act(ops.conv3d_transposed(h, P[f"up{j}.w"], P[f"up{j}.b"], stride=2, out_size=target))
        h = act(ops.conv3d(ops.concat_channels([h, skips[j - 1]]), P[f"dec{j}.w"]))
    out = ops.conv3d(h, P["head.w"], P["head.b"])
    if desc.out_scale != 1.0:
        out = ops.scale(out, desc.out_scale)
    return ops.reshape(out, (desc.n,) if single else (B, desc.n))


def apply(params: ModelParams, v, d):
    """Plain evaluation returning a numpy array."""
    return forward(params, np.asarray(v, dtype=np.float64), d)


def apply_ad(params: ModelParams, theta, v, d):
    """Recorded evaluation with parameter Variable ``theta``."""
    return forward(params, v, d, theta=theta)


def layer_table(desc: UNetDescriptor):
    """Per-block parameter accounting.

    Returns rows ``(kind, in_size, out_size, in_channels, out_channels,
    n_params)``; each decoder row counts its transposed convolution (with
    bias) together with the convolution applied after the skip
    concatenation.
    """
    shapes = desc.layer_shapes()
    count = lambda name: int(np.prod(shapes[name]))  # noqa: E731
    sizes, w = desc.level_sizes, desc.widths
    rows = [("Conv.", sizes[0], sizes[0], desc.in_channels, w[0], count("enc0.w"))]
    for j in range(1, desc.depth):
        rows.append(("Conv. + Max Pooling", sizes[j - 1], sizes[j], w[j - 1], w[j], count(f"enc{j}.w")))
    rows.append(("Conv.", sizes[-1], sizes[-1], w[-1], w[-1], count("bottleneck.w")))
    for j in range(desc.depth - 1, 0, -1):
        n = count(f"up{j}.w") + count(f"up{j}.b") + count(f"dec{j}.w")
        rows.append(("Transposed Conv.", sizes[j], sizes[j - 1], w[j], w[j - 1], n))
    rows.append(("Projection", sizes[0], sizes[0], w[0], 1, count("head.w") + count("head.b")))
    return rows
