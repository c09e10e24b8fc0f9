import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# ==============================================================================
# CONFIGURATION
# ==============================================================================
DTYPE = np.float64
FD_STEP = 1e-5          # central-difference step for gradient checks
FD_RTOL = 1e-4
FD_ATOL = 1e-8
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(message)s')
log = logging.getLogger("TensorCore")
# ==============================================================================


class ShapeError(ValueError):
    """Raised when tensor shapes, strides or paddings do not line up."""


class NumericalError(ArithmeticError):
    """Raised when a pass produces NaN/Inf or a quantity is undefined."""


class DataError(Exception):
    """Raised for unreadable, orphaned or corrupted files (datasets, checkpoints, perturbations)."""


ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass(frozen=True)
class TapeNode:
    """One recorded op: its kind, its inputs and the rule that maps the
    output gradient to input gradients (the rule closes over the saved
    forward context)."""
    op: str
    inputs: Tuple["Tensor", ...]
    backward_fn: BackwardFn


class Tensor:
    """
    Dense float64 array plus the tape node that produced it.
    Values are read-only once written; every op returns a fresh Tensor.
    """
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, node: Optional[TapeNode] = None):
        arr = np.array(data, dtype=DTYPE, copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if self.requires_grad else None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        op = self.node.op if self.node else "leaf"
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"

    # --- operator sugar ---
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __neg__(self): return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("Tensor*Tensor is not supported; use weighted_sum or scale")
        return scale(self, float(other))

    __rmul__ = __mul__


def _as_tensor(value: Union["Tensor", ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _as_array(value: Union["Tensor", ArrayLike, None]) -> Optional[np.ndarray]:
    if value is None:
        return None
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=DTYPE)


def _record(data: np.ndarray, op: str, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    tracked = any(t.requires_grad for t in inputs)
    node = TapeNode(op, inputs, backward_fn) if tracked else None
    out = Tensor(data, requires_grad=False, node=node)
    out.requires_grad = tracked  # interior node: gradients live only inside backward()
    return out


# ==============================================================================
# ELEMENTWISE / REDUCTIONS
# ==============================================================================

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _record(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record(a.data * factor, "scale", (a,), lambda g: (g * factor,))


def shift(a: Tensor, offset: float) -> Tensor:
    return _record(a.data + float(offset), "shift", (a,), lambda g: (g,))


def affine(a: Tensor, factor: float, offset: float) -> Tensor:
    """factor * a + offset, the input normalization of the segmentation net."""
    factor = float(factor)
    return _record(a.data * factor + float(offset), "affine", (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    gate = a.data > 0.0  # subgradient at exactly 0 is 0
    return _record(np.where(gate, a.data, 0.0), "relu", (a,), lambda g: (g * gate,))


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array(a.data.sum()), "sum", (a,), lambda g: (np.full(shape, float(g)),))


def spatial_mean(a: Tensor) -> Tensor:
    """Mean over every axis but the last: H×W×N -> N."""
    shape = a.shape
    count = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    out = a.data.reshape(count, shape[-1]).mean(axis=0)
    return _record(out, "spatial_mean", (a,),
                   lambda g: (np.broadcast_to(g / count, shape).copy(),))


def weighted_sum(a: Tensor, weights: ArrayLike) -> Tensor:
    """Scalar sum(a * weights) with constant weights."""
    w = np.asarray(weights, dtype=DTYPE)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} do not match tensor {a.shape}")
    return _record(np.array((a.data * w).sum()), "weighted_sum", (a,), lambda g: (float(g) * w,))


def l2_norm(a: Tensor) -> Tensor:
    norm = float(np.sqrt((a.data * a.data).sum()))

    def _backward(g):
        if norm == 0.0:
            return (np.zeros_like(a.data),)
        return (float(g) * a.data / norm,)

    return _record(np.array(norm), "l2_norm", (a,), _backward)


def tensor_log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise NumericalError("log of a non-positive value")
    x = a.data
    return _record(np.log(x), "log", (a,), lambda g: (g / x,))


# ==============================================================================
# CONVOLUTION / RESAMPLING
# ==============================================================================

def conv2d(inp: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Cross-correlation of an H×W×Cin map with a k×k×Cin×Cout kernel (im2col form).
    """
    x, K, b = inp.data, kernel.data, bias.data
    if x.ndim != 3:
        raise ShapeError(f"conv2d: input must be H×W×C, got {x.shape}")
    if K.ndim != 4 or K.shape[0] != K.shape[1]:
        raise ShapeError(f"conv2d: kernel must be k×k×Cin×Cout, got {K.shape}")
    k, _, cin, cout = K.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if cin != x.shape[2]:
        raise ShapeError(f"conv2d: input has {x.shape[2]} channels, kernel expects {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match Cout={cout}")
    if int(stride) < 1:
        raise ShapeError(f"conv2d: stride must be a positive integer, got {stride}")
    if int(padding) < 0:
        raise ShapeError(f"conv2d: padding must be non-negative, got {padding}")
    stride, padding = int(stride), int(padding)

    H, W = x.shape[:2]
    xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    oh = (H + 2 * padding - k) // stride + 1
    ow = (W + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: {H}×{W} input too small for k={k}, padding={padding}")

    # (Hp-k+1, Wp-k+1, Cin, k, k) -> (oh, ow, k, k, Cin)
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride][:oh, :ow]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(oh * ow, k * k * cin)
    kmat = K.reshape(k * k * cin, cout)
    out = (cols @ kmat + b).reshape(oh, ow, cout)

    def _backward(g):
        g2 = g.reshape(oh * ow, cout)
        d_kernel = (cols.T @ g2).reshape(K.shape)
        d_bias = g2.sum(axis=0)
        dcols = (g2 @ kmat.T).reshape(oh, ow, k, k, cin)
        dxp = np.zeros(xp.shape, dtype=DTYPE)
        for ky in range(k):
            y_end = ky + stride * (oh - 1) + 1
            for kx in range(k):
                x_end = kx + stride * (ow - 1) + 1
                dxp[ky:y_end:stride, kx:x_end:stride, :] += dcols[:, :, ky, kx, :]
        return dxp[padding:padding + H, padding:padding + W, :], d_kernel, d_bias

    return _record(out, "conv2d", (inp, kernel, bias), _backward)


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row o holds the bilinear weights of output sample o (half-pixel centers, edge clamp)."""
    m = np.zeros((n_out, n_in), dtype=DTYPE)
    src = (np.arange(n_out, dtype=DTYPE) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(inp: Tensor, out_h: int, out_w: int) -> Tensor:
    x = inp.data
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize: input must be H×W×C, got {x.shape}")
    if int(out_h) < 1 or int(out_w) < 1:
        raise ShapeError(f"bilinear_resize: output size must be positive, got {out_h}×{out_w}")
    H, W, _ = x.shape
    ry = interpolation_matrix(H, int(out_h))
    rx = interpolation_matrix(W, int(out_w))
    out = np.einsum("pw,owc->opc", rx, np.einsum("oh,hwc->owc", ry, x))

    def _backward(g):
        gt = np.einsum("pw,opc->owc", rx, g)
        return (np.einsum("oh,owc->hwc", ry, gt),)

    return _record(out, "bilinear_resize", (inp,), _backward)


# ==============================================================================
# LOSS
# ==============================================================================

def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits, dtype=DTYPE)))


def softmax_cross_entropy(logits: Tensor, target: ArrayLike, pixel_weights: Union[Tensor, ArrayLike, None] = None) -> Tensor:
    """
    Per-position softmax + NLL of the target class, summed with optional
    weights and divided by the number of positions. Works for H×W×N maps
    (target H×W) and for N-vectors (scalar target).
    """
    z = logits.data
    n = z.shape[-1]
    flat = z.reshape(-1, n)
    t = np.asarray(target)
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"softmax_cross_entropy: target must hold integer class ids, got {t.dtype}")
    t = t.reshape(-1).astype(np.int64)
    if t.size != flat.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: target has {t.size} entries for {flat.shape[0]} positions")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise ValueError(f"softmax_cross_entropy: class id out of range [0, {n})")
    w = _as_array(pixel_weights)
    if w is None:
        w = np.ones(flat.shape[0], dtype=DTYPE)
    else:
        w = w.reshape(-1)
        if w.size != flat.shape[0]:
            raise ShapeError(f"softmax_cross_entropy: {w.size} weights for {flat.shape[0]} positions")

    count = flat.shape[0]
    logp = log_softmax(flat)
    rows = np.arange(count)
    nll = -logp[rows, t]
    loss = float((w * nll).sum() / count)

    def _backward(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= (float(g) / count) * w[:, None]
        return (d.reshape(z.shape),)

    return _record(np.array(loss), "softmax_cross_entropy", (logits,), _backward)


# ==============================================================================
# REVERSE SWEEP
# ==============================================================================

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor]) -> List[np.ndarray]:
    """
    Reverse sweep from a scalar loss. Writes .grad on each requested leaf
    (exact zeros when a leaf is unreachable) and returns the gradients.
    The tape itself is left untouched, so several sweeps may share a graph.
    """
    leaves = list(leaves)
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss is not on the tape (no input requires grad)")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for t in reversed(_topological_order(loss)):
        g = grads.get(id(t))
        if g is None or t.node is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=DTYPE, copy=True)

    out = []
    for leaf in leaves:
        g = grads.get(id(leaf))
        g = np.zeros(leaf.shape, dtype=DTYPE) if g is None else g.reshape(leaf.shape)
        if not np.all(np.isfinite(g)):
            raise NumericalError("backward produced non-finite gradients")
        leaf.grad = g
        out.append(g)
    return out


# ==============================================================================
# GRADIENT CHECKING
# ==============================================================================

def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, indices: Optional[Sequence[Tuple[int, ...]]] = None,
                       step: float = FD_STEP) -> Dict[Tuple[int, ...], float]:
    """Central differences of a scalar function at the given indices (all by default)."""
    x = np.array(x, dtype=DTYPE, copy=True)
    if indices is None:
        indices = [tuple(int(v) for v in idx) for idx in np.ndindex(*x.shape)]
    result = {}
    for idx in indices:
        orig = x[idx]
        x[idx] = orig + step
        f_plus = fn(x)
        x[idx] = orig - step
        f_minus = fn(x)
        x[idx] = orig
        result[tuple(idx)] = (f_plus - f_minus) / (2.0 * step)
    return result


def gradcheck(fn: Callable[[np.ndarray], float], analytic: np.ndarray, x: np.ndarray,
              indices: Optional[Sequence[Tuple[int, ...]]] = None,
              step: float = FD_STEP, rtol: float = FD_RTOL, atol: float = FD_ATOL) -> float:
    """
    Compares an analytic gradient against central differences.
    Returns the worst relative error; raises AssertionError above rtol.
    """
    numeric = numerical_gradient(fn, x, indices, step)
    worst = 0.0
    for idx, num in numeric.items():
        ana = float(analytic[idx])
        denom = max(abs(ana), abs(num), atol)
        err = abs(ana - num) / denom if abs(ana - num) > atol else 0.0
        worst = max(worst, err)
    log.debug(f"gradcheck over {len(numeric)} entries: worst relative error {worst:.3e}")
    if worst > rtol:
        raise AssertionError(f"gradient check failed: worst relative error {worst:.3e} > {rtol:.1e}")
    return worst


class TensorCoreMS:
    """
    The Engine Room: dense float64 tensors with a reverse-mode tape, just
    enough to express a small conv net and hand back d(loss)/d(input).
    """
    Tensor = Tensor
    add = staticmethod(add)
    sub = staticmethod(sub)
    scale = staticmethod(scale)
    shift = staticmethod(shift)
    affine = staticmethod(affine)
    relu = staticmethod(relu)
    total = staticmethod(total)
    spatial_mean = staticmethod(spatial_mean)
    weighted_sum = staticmethod(weighted_sum)
    l2_norm = staticmethod(l2_norm)
    log = staticmethod(tensor_log)
    conv2d = staticmethod(conv2d)
    bilinear_resize = staticmethod(bilinear_resize)
    softmax_cross_entropy = staticmethod(softmax_cross_entropy)
    backward = staticmethod(backward)
    gradcheck = staticmethod(gradcheck)


# --- Independent Test Block ---
if __name__ == "__main__":
    rng = np.random.default_rng(0)

    print("--- conv2d of ones ---")
    ones = Tensor(np.ones((5, 5, 1)))
    out = conv2d(ones, Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)))
    print(out.data[..., 0])

    print("\n--- conv2d input-gradient check ---")
    kernel = Tensor(rng.normal(size=(3, 3, 2, 3)))
    bias = Tensor(rng.normal(size=3))
    x0 = rng.normal(size=(6, 6, 2))

    def f(arr):
        return float(total(relu(conv2d(Tensor(arr), kernel, bias, 1, 1))).data)

    x = Tensor(x0, requires_grad=True)
    backward(total(relu(conv2d(x, kernel, bias, 1, 1))), [x])
    worst = gradcheck(f, x.grad, x0)
    print(f"✅ worst relative error: {worst:.2e}")

    print("\n--- uniform softmax ---")
    loss = softmax_cross_entropy(Tensor(np.zeros((2, 2, 19))), np.zeros((2, 2), dtype=int))
    print(f"loss = {loss.item():.4f} (ln 19 = {np.log(19):.4f})")
