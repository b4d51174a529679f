"""Dense tensor math with hand-derived backward passes, parameter storage and optimizers.

Tensors are plain numpy arrays. 32-bit floats are the default working precision; the
"high" precision (64-bit) is used for gradient checks. Every backward function returns
exact analytic gradients of its forward counterpart.
"""

import hashlib

import numpy as np

from modules import util
from modules.util import NumericError
from modules.util import ShapeError

logger = util.logger

PRECISIONS = {"fast": np.float32, "high": np.float64}
ACTIVATIONS = ("relu", "none")


def dtype_for(precision):
    """Map a precision name to a numpy dtype"""
    if precision not in PRECISIONS:
        raise util.Failed(f"Config Error: precision must be one of {list(PRECISIONS)}, got {precision}")
    return PRECISIONS[precision]


def check_finite(name, *arrays):
    """Raise NumericError if any array holds NaN or Inf"""
    for array in arrays:
        array = np.asarray(array)
        if array.size and not np.all(np.isfinite(array)):
            bad = int(np.size(array) - np.count_nonzero(np.isfinite(array)))
            raise NumericError(f"Numeric Error: {name} holds {bad} non-finite value(s)")


def _shape_error(op, a_name, a_shape, b_name, b_shape):
    return ShapeError(f"Shape Error: {op}: {a_name} {tuple(a_shape)} does not conform with {b_name} {tuple(b_shape)}")


def linear_forward(x, w, b):
    """y = x . w + b, row-wise. x is (B, Din), w is (Din, Dout), b is (Dout,)"""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise _shape_error("linear_forward", "x", x.shape, "w", w.shape)
    if b.shape != (w.shape[1],):
        raise _shape_error("linear_forward", "b", b.shape, "w", w.shape)
    return x @ w + b


def linear_backward(x, w, dy):
    """Gradients (dx, dw, db) of linear_forward given the upstream gradient dy"""
    if dy.ndim != 2 or dy.shape != (x.shape[0], w.shape[1]):
        raise _shape_error("linear_backward", "dy", dy.shape, "forward output", (x.shape[0], w.shape[1]))
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0)
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x, dy):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)


def sigmoid_forward(x):
    """Numerically stable logistic function"""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def max_pool_rows(x):
    """
    Columnwise max over the row axis.

    Args:
        x (np.ndarray): (..., K, D) groups of K rows.

    Returns:
        tuple: (y of shape (..., D), argmax of shape (..., D)). Ties go to the lowest row index.

    Raises:
        ShapeError: if a group is empty (K == 0).
    """
    if x.ndim < 2 or x.shape[-2] == 0:
        raise ShapeError(f"Shape Error: max_pool_rows: empty group, input shape {tuple(x.shape)}")
    argmax = np.argmax(x, axis=-2)
    y = np.take_along_axis(x, argmax[..., None, :], axis=-2)[..., 0, :]
    return y, argmax


def max_pool_rows_backward(argmax, dy, k):
    """Route dy to the argmax row of every column; all other rows get 0"""
    dx = np.zeros(dy.shape[:-1] + (k, dy.shape[-1]), dtype=dy.dtype)
    np.put_along_axis(dx, argmax[..., None, :], dy[..., None, :], axis=-2)
    return dx


def conv3x3_forward(x, w, b):
    """
    Same-padded 3x3 convolution over an (H, W, Cin) grid.

    The kernel is stored im2col-style as a (9 * Cin, Cout) matrix whose rows are ordered
    (row offset, column offset, input channel).

    Returns:
        tuple: (y of shape (H, W, Cout), cols cache for the backward pass)
    """
    if x.ndim != 3 or w.shape[0] != 9 * x.shape[2]:
        raise _shape_error("conv3x3_forward", "x", x.shape, "w", w.shape)
    h, wd, cin = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[di : di + h, dj : dj + wd, :] for di in range(3) for dj in range(3)], axis=-1)
    cols = cols.reshape(h * wd, 9 * cin)
    y = linear_forward(cols, w, b).reshape(h, wd, w.shape[1])
    return y, cols


def conv3x3_backward(cols, w, dy):
    """Gradients (dx, dw, db) of conv3x3_forward"""
    h, wd, cout = dy.shape
    cin = w.shape[0] // 9
    dcols, dw, db = linear_backward(cols, w, dy.reshape(h * wd, cout))
    dcols = dcols.reshape(h, wd, 9, cin)
    dxp = np.zeros((h + 2, wd + 2, cin), dtype=dy.dtype)
    for k in range(9):
        di, dj = divmod(k, 3)
        dxp[di : di + h, dj : dj + wd, :] += dcols[:, :, k, :]
    return dxp[1:-1, 1:-1, :], dw, db


class MlpSpec:
    """Layer widths plus one activation per layer"""

    def __init__(self, layer_widths, activations=None):
        self.layer_widths = [int(w) for w in layer_widths]
        if not self.layer_widths or any(w <= 0 for w in self.layer_widths):
            raise util.Failed(f"Config Error: MLP layer widths must be a non-empty list of positive ints, got {layer_widths}")
        if activations is None:
            activations = ["relu"] * len(self.layer_widths)
        self.activations = list(activations)
        if len(self.activations) != len(self.layer_widths) or any(a not in ACTIVATIONS for a in self.activations):
            raise util.Failed(f"Config Error: MLP activations {self.activations} do not match widths {self.layer_widths}")

    @classmethod
    def linear_output(cls, layer_widths):
        """ReLU on every hidden layer, linear final layer"""
        return cls(layer_widths, ["relu"] * (len(layer_widths) - 1) + ["none"])

    @property
    def out_dim(self):
        return self.layer_widths[-1]

    def as_dict(self):
        return {"layer_widths": list(self.layer_widths), "activations": list(self.activations)}

    def __eq__(self, other):
        return isinstance(other, MlpSpec) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"MlpSpec({self.layer_widths}, {self.activations})"


class Parameter:
    """A learned tensor plus its gradient slot"""

    def __init__(self, name, value):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


class ModelParams:
    """
    Named parameter collection for the backbone (g.*), flow head (s.*) and detection head (h.*).

    Names are unique and every name lives in exactly one namespace.
    """

    NAMESPACES = ("g", "s", "h")
    VERSION = 1

    def __init__(self, dtype=np.float32, configs=None):
        self.dtype = dtype
        self.configs = configs or {}
        self.version = self.VERSION
        self._params = {}

    def add(self, name, value):
        namespace = name.split(".", 1)[0]
        if namespace not in self.NAMESPACES or "." not in name:
            raise util.Failed(f"Parameter Error: {name} is not inside one of the namespaces {self.NAMESPACES}")
        if name in self._params:
            raise util.Failed(f"Parameter Error: duplicate parameter name {name}")
        self._params[name] = Parameter(name, np.array(value, dtype=self.dtype))
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def parameter(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise util.Failed(f"Parameter Error: unknown parameter {name}") from None

    def value(self, name):
        return self.parameter(name).value

    def grad(self, name):
        return self.parameter(name).grad

    def accumulate(self, name, grad):
        param = self.parameter(name)
        if grad.shape != param.value.shape:
            raise _shape_error("accumulate", name, param.value.shape, "grad", grad.shape)
        param.grad += grad.astype(param.grad.dtype, copy=False)

    def assign(self, name, value):
        param = self.parameter(name)
        value = np.asarray(value)
        if value.shape != param.value.shape:
            raise _shape_error("assign", name, param.value.shape, "value", value.shape)
        param.value = value.astype(self.dtype, copy=True)

    def names(self, namespaces=None):
        if namespaces is None:
            return list(self._params)
        namespaces = tuple(namespaces)
        return [n for n in self._params if n.split(".", 1)[0] in namespaces]

    def zero_grad(self, namespaces=None):
        for name in self.names(namespaces):
            self._params[name].grad[...] = 0

    def copy(self, dtype=None):
        clone = ModelParams(dtype=dtype or self.dtype, configs=self.configs)
        for name, param in self._params.items():
            clone.add(name, param.value)
        return clone

    def astype(self, dtype):
        return self.copy(dtype=dtype)

    def digest(self, namespaces=None):
        """SHA-256 over names, shapes and little-endian float32 values of the selected namespaces"""
        sha = hashlib.sha256()
        for name in sorted(self.names(namespaces)):
            value = self._params[name].value
            sha.update(name.encode("utf-8"))
            sha.update(str(value.shape).encode("utf-8"))
            sha.update(value.astype("<f4").tobytes())
        return sha.hexdigest()

    def num_values(self, namespaces=None):
        return int(sum(self._params[n].value.size for n in self.names(namespaces)))


def he_normal(rng, fan_in, fan_out, dtype, scale=1.0):
    return (rng.standard_normal((fan_in, fan_out)) * scale * np.sqrt(2.0 / fan_in)).astype(dtype)


class Mlp:
    """Shared per-row MLP whose weights live in a ModelParams collection under `prefix`"""

    def __init__(self, prefix, in_dim, spec):
        self.prefix = prefix
        self.in_dim = int(in_dim)
        self.spec = spec

    def weight_names(self, layer):
        return f"{self.prefix}.{layer}.w", f"{self.prefix}.{layer}.b"

    def init(self, params, rng, final_scale=1.0):
        fan_in = self.in_dim
        for layer, width in enumerate(self.spec.layer_widths):
            w_name, b_name = self.weight_names(layer)
            scale = final_scale if layer == len(self.spec.layer_widths) - 1 else 1.0
            params.add(w_name, he_normal(rng, fan_in, width, params.dtype, scale=scale))
            params.add(b_name, np.zeros(width, dtype=params.dtype))
            fan_in = width

    def forward(self, params, x):
        """Apply the MLP to the last axis of x; returns (y, cache)"""
        lead = x.shape[:-1]
        if x.shape[-1] != self.in_dim:
            raise _shape_error(f"mlp {self.prefix}", "x", x.shape, "in_dim", (self.in_dim,))
        h = x.reshape(-1, self.in_dim)
        cache = []
        for layer, activation in enumerate(self.spec.activations):
            w_name, b_name = self.weight_names(layer)
            w = params.value(w_name)
            z = linear_forward(h, w, params.value(b_name))
            cache.append((h, z))
            h = relu_forward(z) if activation == "relu" else z
        return h.reshape(lead + (h.shape[-1],)), cache

    def backward(self, params, cache, dy):
        """Accumulate weight gradients and return dL/dx"""
        lead = dy.shape[:-1]
        d = dy.reshape(-1, dy.shape[-1])
        for layer in reversed(range(len(self.spec.activations))):
            h, z = cache[layer]
            if self.spec.activations[layer] == "relu":
                d = relu_backward(z, d)
            w_name, b_name = self.weight_names(layer)
            d, dw, db = linear_backward(h, params.value(w_name), d)
            params.accumulate(w_name, dw)
            params.accumulate(b_name, db)
        return d.reshape(lead + (self.in_dim,))


def _trainable(params, names):
    names = params.names() if names is None else list(names)
    for name in names:
        param = params.parameter(name)
        if not np.all(np.isfinite(param.grad)):
            raise NumericError(f"Numeric Error: non-finite gradient in {name}, optimizer step aborted")
    return names


def sgd_step(params, lr, names=None, weight_decay=0.0):
    """value <- value - lr * grad, then zero the gradients of the stepped parameters"""
    names = _trainable(params, names)
    for name in names:
        param = params.parameter(name)
        if weight_decay:
            param.value -= (lr * weight_decay * param.value).astype(param.value.dtype)
        param.value -= (lr * param.grad).astype(param.value.dtype)
        param.grad[...] = 0
    return params


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, state=None, names=None, weight_decay=0.0):
    """
    One Adam update with bias correction.

    Every parameter keeps its own update count in state["t"], so moments carried over from
    another run stay bias-corrected for the steps they have actually seen while fresh
    parameters start their correction at 1.

    Args:
        params (ModelParams): parameters with populated gradients.
        state (dict, optional): {"step": int, "m": {name: array}, "v": {name: array}, "t": {name: 0-d array}};
            empty/None on the first step.

    Returns:
        dict: the updated optimizer state.
    """
    names = _trainable(params, names)
    if not state:
        state = {"step": 0, "m": {}, "v": {}, "t": {}}
    state.setdefault("t", {})
    for name in names:
        param = params.parameter(name)
        g = param.grad.astype(np.float64)
        m = state["m"].get(name)
        v = state["v"].get(name)
        if m is None or v is None or m.shape != g.shape or v.shape != g.shape:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
            t = 1
        else:
            # moments written before per-parameter counts were kept share the global step
            t = int(state["t"].get(name, state.get("step", 0))) + 1
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            update = update + lr * weight_decay * param.value
        param.value = (param.value - update).astype(param.value.dtype)
        state["m"][name] = m
        state["v"][name] = v
        state["t"][name] = np.array(t, dtype=np.float64)
        param.grad[...] = 0
    state["step"] = state.get("step", 0) + 1
    return state


ADAM_SLOTS = ("m", "v", "t")


class Optimizer:
    """Optimizer selected by config: plain SGD or Adam"""

    KINDS = {"sgd": "Stochastic Gradient Descent", "adam": "Adam with bias correction"}

    def __init__(self, kind="adam", lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        if kind not in self.KINDS:
            raise util.Failed(f"Config Error: optimizer kind must be one of {list(self.KINDS)}, got {kind}")
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {}

    @classmethod
    def from_config(cls, settings):
        return cls(
            kind=settings["kind"],
            lr=settings["lr"],
            beta1=settings["beta1"],
            beta2=settings["beta2"],
            eps=settings["eps"],
            weight_decay=settings["weight_decay"],
        )

    def step(self, params, names=None):
        if self.kind == "sgd":
            sgd_step(params, self.lr, names=names, weight_decay=self.weight_decay)
            self.state["step"] = self.state.get("step", 0) + 1
        else:
            self.state = adam_step(
                params, self.lr, self.beta1, self.beta2, self.eps, state=self.state, names=names,
                weight_decay=self.weight_decay,
            )

    def state_dict(self):
        state = {"kind": self.kind, "step": self.state.get("step", 0)}
        state.update({slot: self.state.get(slot, {}) for slot in ADAM_SLOTS})
        return state

    def load_state_dict(self, state):
        if not state:
            self.state = {}
            return
        if state.get("kind", self.kind) != self.kind:
            logger.warning(f"Optimizer state was written by {state.get('kind')}, starting {self.kind} fresh")
            self.state = {}
            return
        self.state = {"step": int(state.get("step", 0))}
        self.state.update({slot: dict(state.get(slot, {})) for slot in ADAM_SLOTS})


def namespace_slots(state, namespaces):
    """The per-parameter optimizer slots of `state` whose names fall in `namespaces`"""
    namespaces = tuple(namespaces)
    return {
        slot: {name: value for name, value in (state or {}).get(slot, {}).items() if name.split(".", 1)[0] in namespaces}
        for slot in ADAM_SLOTS
    }


class GradCheckReport:
    """Maximum relative error of analytic vs central-difference directional derivatives, per input"""

    def __init__(self, name, rtol):
        self.name = name
        self.rtol = rtol
        self.errors = {}

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return all(err <= self.rtol for err in self.errors.values())

    def lines(self):
        status = "PASS" if self.passed else "FAIL"
        yield f"{status} {self.name}: max rel err {self.max_error:.3e} (rtol {self.rtol:.0e})"
        for key, err in self.errors.items():
            yield f"    {key}: {err:.3e}"


def grad_check(forward, backward, inputs, rtol=1e-4, eps=1e-6, n_directions=3, seed=0, name="op", floor=1e-5):
    """
    Compare analytic gradients against central finite differences.

    The op output is reduced to a scalar with a fixed random projection R, so the analytic side is
    `backward(R, **inputs)` and the numeric side is d/dh sum(forward(x + h v) * R) along random
    directions v. Failures are reported, never raised.

    Args:
        forward (callable): forward(**inputs) -> array.
        backward (callable): backward(dy, **inputs) -> {input name: gradient}; only returned names are checked.
        inputs (dict): name -> array, cast to 64-bit floats.

    Returns:
        GradCheckReport
    """
    rng = np.random.default_rng(seed)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out = np.asarray(forward(**inputs), dtype=np.float64)
    proj = rng.standard_normal(out.shape) if out.ndim else np.float64(1.0)
    grads = backward(np.asarray(proj, dtype=np.float64), **inputs)
    report = GradCheckReport(name, rtol)

    def objective(values):
        return float(np.sum(np.asarray(forward(**values), dtype=np.float64) * proj))

    for key, analytic_grad in grads.items():
        worst = 0.0
        for _ in range(n_directions):
            direction = rng.standard_normal(inputs[key].shape)
            plus = dict(inputs)
            minus = dict(inputs)
            plus[key] = inputs[key] + eps * direction
            minus[key] = inputs[key] - eps * direction
            numeric = (objective(plus) - objective(minus)) / (2.0 * eps)
            analytic = float(np.sum(np.asarray(analytic_grad, dtype=np.float64) * direction))
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
        report.errors[key] = worst
    return report
