"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Values are float64 throughout. Operations are recorded on an explicit
:class:`Tape`; calling :meth:`Tape.backward` on a scalar output walks the
tape in reverse and accumulates gradients into every tensor flagged with
``requires_grad``. Tapes are single-owner: never share one between threads.

The primitive set is exactly what the tracker network, the crop pipeline
and the adversarial losses need: strided 2-D convolution, affine layers,
relu/sigmoid, elementwise arithmetic, reductions, bilinear resampling and
array plumbing (concat/reshape/transpose/slice).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DiffError",
    "ShapeError",
    "Tensor",
    "Tape",
    "grad_check",
    "PRIMITIVES",
]


def _tune_allocator():
    # Tapes allocate and free many multi-MB buffers per step; glibc's
    # adaptive mmap threshold then serves each from a fresh mmap, paying a
    # page fault per touched page. Pin the threshold high once (no-op off
    # glibc). M_MMAP_THRESHOLD == -3.
    try:
        import ctypes
        ctypes.CDLL("libc.so.6").mallopt(-3, 512 * 1024 * 1024)
    except Exception:
        pass


_tune_allocator()


class DiffError(ValueError):
    """Base error for autodiff failures."""


class ShapeError(DiffError):
    """Raised when operand shapes are incompatible with an op."""


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    ``requires_grad`` on a leaf marks it as a differentiation target; on op
    outputs it records whether any input needs a gradient, so backward can
    skip dead branches.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DiffError("Tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path: skip the finite check for op outputs.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g: np.ndarray, owned: bool = False):
        # ``owned=True`` promises g is a fresh array no other node aliases,
        # so the first accumulation can adopt it without copying.
        if self.grad is None:
            if owned:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn", "op")

    def __init__(self, op, out, inputs, backward_fn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


def _bilinear_gather(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, padding: str):
    """Shared forward helper: sample ``img`` (H,W,C) at continuous pixel
    coordinates. Returns (values, index/weight tuples) so the backward pass
    can scatter with identical coefficients.

    ``padding='zeros'`` treats out-of-range neighbours as zero;
    ``padding='clamp'`` clamps coordinates to the valid range first (under
    which sampling a constant image returns the constant exactly).
    """
    h, w = img.shape[0], img.shape[1]
    if padding == "clamp":
        ys = np.clip(ys, 0.0, h - 1.0)
        xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    wy1 = ys - y0
    wy0 = 1.0 - wy1
    wx1 = xs - x0
    wx0 = 1.0 - wx1

    parts = []
    for yi, wy in ((y0, wy0), (y1, wy1)):
        for xi, wx in ((x0, wx0), (x1, wx1)):
            if padding == "zeros":
                valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
                weight = wy * wx * valid
            else:
                valid = None
                weight = wy * wx
            yc = np.clip(yi, 0, h - 1)
            xc = np.clip(xi, 0, w - 1)
            parts.append((yc, xc, weight))
    out = np.zeros(ys.shape + (img.shape[2],), dtype=np.float64)
    for yc, xc, weight in parts:
        out += img[yc, xc] * weight[..., None]
    return out, parts


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """Contiguous (N*Ho*Wo, kh*kw*C) patch matrix from an NHWC input."""
    n, h, w, c = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N,Ho,Wo,C,kh,kw)
    pm = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    return pm.reshape(n * ho * wo, kh * kw * c), ho, wo


class Tape:
    """Ordered record of executed primitives; reverse order is a valid
    topological order, so backward is a single reversed sweep."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    # -- recording ---------------------------------------------------------

    def _emit(self, op: str, out_data: np.ndarray, inputs, backward_fn) -> Tensor:
        needs = any(t.requires_grad for t in inputs)
        out = Tensor._wrap(out_data, needs)
        if needs:
            self._nodes.append(_Node(op, out, inputs, backward_fn))
        return out

    # -- elementwise -------------------------------------------------------

    @staticmethod
    def _check_binary(op: str, a: Tensor, b: Tensor):
        if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
            raise ShapeError(f"{op}: operand shapes {a.shape} vs {b.shape}")

    @staticmethod
    def _reduce_to(shape, g: np.ndarray) -> np.ndarray:
        # Undo scalar broadcasting in binary ops.
        if shape == g.shape:
            return g
        return np.sum(g).reshape(shape)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_binary("add", a, b)

        def bw(g):
            if a.requires_grad:
                r = self._reduce_to(a.shape, g)
                a._accum(r, owned=r is not g)
            if b.requires_grad:
                r = self._reduce_to(b.shape, g)
                b._accum(r, owned=r is not g)

        return self._emit("add", a.data + b.data, (a, b), bw)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_binary("sub", a, b)

        def bw(g):
            if a.requires_grad:
                r = self._reduce_to(a.shape, g)
                a._accum(r, owned=r is not g)
            if b.requires_grad:
                b._accum(self._reduce_to(b.shape, -g), owned=True)

        return self._emit("sub", a.data - b.data, (a, b), bw)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        self._check_binary("mul", a, b)

        def bw(g):
            if a.requires_grad:
                a._accum(self._reduce_to(a.shape, g * b.data), owned=True)
            if b.requires_grad:
                b._accum(self._reduce_to(b.shape, g * a.data), owned=True)

        return self._emit("mul", a.data * b.data, (a, b), bw)

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)

        def bw(g):
            if a.requires_grad:
                a._accum(g * c, owned=True)

        return self._emit("scale", a.data * c, (a,), bw)

    def abs(self, a: Tensor) -> Tensor:
        def bw(g):
            if a.requires_grad:
                a._accum(g * np.sign(a.data), owned=True)

        return self._emit("abs", np.abs(a.data), (a,), bw)

    def relu(self, a: Tensor) -> Tensor:
        # Gradient at exactly 0 is defined as 0.
        def bw(g):
            if a.requires_grad:
                a._accum(g * (a.data > 0), owned=True)

        return self._emit("relu", np.maximum(a.data, 0.0), (a,), bw)

    def sigmoid(self, a: Tensor) -> Tensor:
        x = a.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)

        def bw(g):
            if a.requires_grad:
                a._accum(g * y * (1.0 - y), owned=True)

        return self._emit("sigmoid", y, (a,), bw)

    def sqrt(self, a: Tensor) -> Tensor:
        if np.any(a.data < 0):
            raise DiffError("sqrt: negative input")
        y = np.sqrt(a.data)

        # Derivative at 0 is defined as 0 (deterministic subgradient).
        def bw(g):
            if a.requires_grad:
                d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
                a._accum(g * d, owned=True)

        return self._emit("sqrt", y, (a,), bw)

    def minimum(self, a: Tensor, c: float) -> Tensor:
        c = float(c)

        def bw(g):
            if a.requires_grad:
                a._accum(g * (a.data < c), owned=True)

        return self._emit("minimum", np.minimum(a.data, c), (a,), bw)

    def maximum(self, a: Tensor, c: float) -> Tensor:
        c = float(c)

        def bw(g):
            if a.requires_grad:
                a._accum(g * (a.data > c), owned=True)

        return self._emit("maximum", np.maximum(a.data, c), (a,), bw)

    # -- reductions --------------------------------------------------------

    def mean(self, a: Tensor) -> Tensor:
        n = a.size

        def bw(g):
            if a.requires_grad:
                a._accum(np.full_like(a.data, float(g) / n), owned=True)

        return self._emit("mean", np.asarray(a.data.mean()), (a,), bw)

    def sum(self, a: Tensor) -> Tensor:
        def bw(g):
            if a.requires_grad:
                a._accum(np.full_like(a.data, float(g)), owned=True)

        return self._emit("sum", np.asarray(a.data.sum()), (a,), bw)

    # -- array plumbing ----------------------------------------------------

    def reshape(self, a: Tensor, shape) -> Tensor:
        shape = tuple(shape)

        def bw(g):
            if a.requires_grad:
                a._accum(g.reshape(a.shape))

        return self._emit("reshape", a.data.reshape(shape), (a,), bw)

    def transpose(self, a: Tensor, axes) -> Tensor:
        axes = tuple(axes)
        inv = np.argsort(axes)

        def bw(g):
            if a.requires_grad:
                a._accum(g.transpose(inv))

        return self._emit("transpose", a.data.transpose(axes), (a,), bw)

    def concat(self, tensors, axis: int = 0) -> Tensor:
        tensors = list(tensors)
        if not tensors:
            raise ShapeError("concat: empty input list")
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bw(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t._accum(g[tuple(sl)])

        out = np.concatenate([t.data for t in tensors], axis=axis)
        return self._emit("concat", out, tuple(tensors), bw)

    def slice(self, a: Tensor, key) -> Tensor:
        out = a.data[key]

        def bw(g):
            if a.requires_grad:
                z = np.zeros_like(a.data)
                z[key] += g
                a._accum(z, owned=True)

        return self._emit("slice", np.array(out, copy=True), (a,), bw)

    # -- dense layers ------------------------------------------------------

    def affine(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        if x.data.ndim != 2 or w.data.ndim != 2:
            raise ShapeError(f"affine: expected 2-D x and w, got {x.shape}, {w.shape}")
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f"affine: x columns {x.shape[1]} != w rows {w.shape[0]}")
        if b.shape != (w.shape[1],):
            raise ShapeError(f"affine: bias shape {b.shape} != ({w.shape[1]},)")
        out = x.data @ w.data + b.data

        def bw(g):
            if x.requires_grad:
                x._accum(g @ w.data.T, owned=True)
            if w.requires_grad:
                w._accum(x.data.T @ g, owned=True)
            if b.requires_grad:
                b._accum(g.sum(axis=0), owned=True)

        return self._emit("affine", out, (x, w, b), bw)

    def conv2d(self, x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
        """Strided valid convolution on NHWC input with (kh,kw,C,F) weights."""
        if x.data.ndim != 4 or w.data.ndim != 4:
            raise ShapeError(f"conv2d: expected NHWC input and KKCF weight, got {x.shape}, {w.shape}")
        n, h, wd, c = x.shape
        kh, kw, cw, f = w.shape
        if c != cw:
            raise ShapeError(f"conv2d: input channels {c} != weight channels {cw}")
        if kh > h or kw > wd:
            raise ShapeError(f"conv2d: kernel ({kh},{kw}) larger than input ({h},{wd})")
        if b.shape != (f,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({f},)")
        s = int(stride)
        pm, ho, wo = _im2col(x.data, kh, kw, s)
        wm = w.data.reshape(kh * kw * c, f)
        out = (pm @ wm).reshape(n, ho, wo, f)
        out += b.data

        def bw(g):
            gm = g.reshape(n * ho * wo, f)
            if w.requires_grad:
                w._accum((pm.T @ gm).reshape(kh, kw, c, f), owned=True)
            if b.requires_grad:
                b._accum(gm.sum(axis=0), owned=True)
            if x.requires_grad:
                dpat = (gm @ wm.T).reshape(n, ho, wo, kh, kw, c)
                dx = np.zeros_like(x.data)
                for u in range(kh):
                    for v in range(kw):
                        dx[:, u:u + s * ho:s, v:v + s * wo:s, :] += dpat[:, :, :, u, v, :]
                x._accum(dx, owned=True)

        return self._emit("conv2d", out, (x, w, b), bw)

    # -- resampling --------------------------------------------------------

    def bilinear_sample(self, img: Tensor, ys: np.ndarray, xs: np.ndarray,
                        padding: str = "zeros") -> Tensor:
        """Sample an (H,W,C) image at continuous pixel coordinates ``ys, xs``
        (same shape). Coordinates are parameters, not differentiation
        targets; gradients flow to the image only."""
        if img.data.ndim != 3:
            raise ShapeError(f"bilinear_sample: expected (H,W,C) image, got {img.shape}")
        if ys.shape != xs.shape:
            raise ShapeError(f"bilinear_sample: grid shapes {ys.shape} vs {xs.shape}")
        if padding not in ("zeros", "clamp"):
            raise DiffError(f"bilinear_sample: unknown padding {padding!r}")
        out, parts = _bilinear_gather(img.data, ys, xs, padding)

        def bw(g):
            if img.requires_grad:
                acc = np.zeros_like(img.data)
                for yc, xc, weight in parts:
                    np.add.at(acc, (yc, xc), g * weight[..., None])
                img._accum(acc, owned=True)

        return self._emit("bilinear_sample", out, (img,), bw)

    def bilinear_resize(self, img: Tensor, out_h: int, out_w: int) -> Tensor:
        """Resize an (H,W,C) image with the align-corners-false convention
        (source coordinates clamped, so resizing a constant image is exact)."""
        if out_h <= 0 or out_w <= 0:
            raise ShapeError(f"bilinear_resize: bad output size ({out_h},{out_w})")
        h, w = img.shape[0], img.shape[1]
        ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
        xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        return self.bilinear_sample(img, gy, gx, padding="clamp")

    # -- generic dispatch ---------------------------------------------------

    def apply(self, op_kind: str, inputs, params: dict | None = None) -> Tensor:
        """Dispatch a primitive by name; raises DiffError for unknown kinds."""
        params = params or {}
        try:
            fn = PRIMITIVES[op_kind]
        except KeyError:
            raise DiffError(f"unknown primitive {op_kind!r}; known: {sorted(PRIMITIVES)}")
        return fn(self, *inputs, **params)

    # -- reverse sweep -----------------------------------------------------

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(output)/d(leaf) into ``.grad`` for every tensor on a
        requires_grad path, and return {leaf: grad} for flagged leaves.

        Output must be scalar. Previous gradients on the tape's tensors are
        cleared first; the tape itself is left intact.
        """
        if output.size != 1:
            raise DiffError(f"backward requires a scalar output, got shape {output.shape}")
        produced = set()
        for node in self._nodes:
            node.out.grad = None
            produced.add(id(node.out))
            for t in node.inputs:
                t.grad = None
        output.grad = np.ones_like(output.data)
        for node in reversed(self._nodes):
            if node.out.grad is not None:
                node.backward_fn(node.out.grad)
        grads: dict[Tensor, np.ndarray] = {}
        for node in self._nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced and t.grad is not None:
                    grads[t] = t.grad
        if output.requires_grad and id(output) not in produced:
            grads[output] = output.grad
        return grads


PRIMITIVES = {
    "add": Tape.add,
    "sub": Tape.sub,
    "mul": Tape.mul,
    "scale": Tape.scale,
    "abs": Tape.abs,
    "relu": Tape.relu,
    "sigmoid": Tape.sigmoid,
    "sqrt": Tape.sqrt,
    "minimum": Tape.minimum,
    "maximum": Tape.maximum,
    "mean": Tape.mean,
    "sum": Tape.sum,
    "reshape": Tape.reshape,
    "transpose": Tape.transpose,
    "concat": Tape.concat,
    "slice": Tape.slice,
    "affine": Tape.affine,
    "conv2d": Tape.conv2d,
    "bilinear_sample": Tape.bilinear_sample,
    "bilinear_resize": Tape.bilinear_resize,
}


def grad_check(f, x: Tensor, step: float = 1e-4, eps: float = 1e-6) -> float:
    """Compare the analytic gradient of ``f`` against central finite
    differences and return the max relative error over coordinates.

    ``f(tape, tensor) -> scalar Tensor`` must be evaluable at x +- step per
    coordinate. Relative error per coordinate is
    ``|analytic - numeric| / (|numeric| + eps)``.
    """
    tape = Tape()
    xt = Tensor(x.data.copy(), requires_grad=True)
    y = f(tape, xt)
    if y.size != 1:
        raise DiffError("grad_check: f must return a scalar")
    grads = tape.backward(y)
    analytic = grads.get(xt)
    if analytic is None:
        analytic = np.zeros_like(x.data)

    flat = x.data.ravel().copy()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tape(), Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - step
        lo = f(Tape(), Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)

    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise DiffError("grad_check: non-finite gradient values")
    rel = np.abs(analytic.ravel() - numeric) / (np.abs(numeric) + eps)
    return float(rel.max()) if rel.size else 0.0
