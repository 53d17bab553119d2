"""Finite-difference gradient checking shared by the test modules."""
import numpy as np

from hierinv.tensor import Tensor, default_dtype

# (step, relative tolerance, denominator floor as a fraction of max |numeric grad|) per precision.
# The floor keeps elements whose true gradient is ~0 from dividing difference noise by ~0.
SETTINGS = {np.float32: (1e-2, 1e-2, 1e-2), np.float64: (1e-5, 1e-4, 1e-5)}


def numeric_grad(f, arrays, i, weights, h):
    """Central differences of sum(f(*arrays) * weights) w.r.t. arrays[i]."""
    dtype = default_dtype()
    base = [np.array(a, dtype=dtype) for a in arrays]
    grad = np.zeros(base[i].shape, dtype=np.float64)
    flat = base[i].reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = float(np.sum(np.asarray(f(*[Tensor(a) for a in base]).data, np.float64) * weights))
        flat[k] = orig - h
        down = float(np.sum(np.asarray(f(*[Tensor(a) for a in base]).data, np.float64) * weights))
        flat[k] = orig
        grad.reshape(-1)[k] = (up - down) / (2 * h)
    return grad


def analytic_grads(f, arrays, weights):
    dtype = default_dtype()
    ts = [Tensor(np.array(a, dtype=dtype), requires_grad=True) for a in arrays]
    out = f(*ts)
    out.backward(np.asarray(weights, dtype=out.data.dtype).reshape(out.shape))
    return [t.grad for t in ts]


def max_relative_error(f, arrays, seed=0, check=None):
    """Largest per-element relative error over the inputs listed in ``check``."""
    h, _, floor = SETTINGS[default_dtype()]
    rng = np.random.default_rng([seed, 7919])  # distinct from the input generator's stream
    out = f(*[Tensor(np.array(a, dtype=default_dtype())) for a in arrays])
    weights = rng.standard_normal(out.shape)
    grads = analytic_grads(f, arrays, weights)
    worst = 0.0
    for i in (range(len(arrays)) if check is None else check):
        num = numeric_grad(f, arrays, i, weights, h)
        ana = np.zeros_like(num) if grads[i] is None else grads[i].astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor * max(np.abs(num).max(), 1e-12))
        rel = np.abs(ana - num) / denom
        worst = max(worst, float(rel.max()))
    return worst


def tolerance():
    return SETTINGS[default_dtype()][1]


# -- the differentiable-op catalogue -------------------------------------------
def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _gradcases():
    from hierinv import tensor as T
    from hierinv.objectives import barlow_twins_loss, negative_cosine
    stats = T.RunningStats(3)
    stats.mean = np.array([0.1, -0.2, 0.3])
    stats.var = np.array([0.5, 1.5, 2.0])
    fixed_labels = np.array([0, 2, 1, 2])

    def bn_eval(x, g, b):
        s = T.RunningStats(3)
        s.mean, s.var = stats.mean.astype(x.data.dtype), stats.var.astype(x.data.dtype)
        return T.batch_norm(x, g, b, s, training=False)

    return {
        "add": (lambda a, b: a + b, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4,))]),
        "sub": (lambda a, b: a - b, lambda r: [r.standard_normal((3, 1)), r.standard_normal((3, 4))]),
        "mul": (lambda a, b: a * b, lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))]),
        "div": (lambda a, b: a / b, lambda r: [r.standard_normal((2, 3)), _positive(r, (3,))]),
        "power": (lambda a: a ** 3.0, lambda r: [r.standard_normal((2, 3))]),
        "sqrt": (T.sqrt, lambda r: [_positive(r, (2, 3))]),
        "relu": (T.relu, lambda r: [_away_from_zero(r, (3, 4))]),
        "reshape": (lambda a: a.reshape(6, 2) * a.reshape(6, 2), lambda r: [r.standard_normal((3, 4))]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)) ** 2.0, lambda r: [r.standard_normal((2, 3, 4))]),
        "getitem_slice": (lambda a: a[1:, ::2] ** 2.0, lambda r: [r.standard_normal((3, 4))]),
        "getitem_fancy": (lambda a: a[(np.array([0, 2, 0]), np.array([1, 1, 3]))] ** 2.0,
                          lambda r: [r.standard_normal((3, 4))]),
        "concat": (lambda a, b: T.concat([a, b, a], axis=1) ** 2.0,
                   lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
        "split": (lambda a: T.split(a, [1, 3], axis=0)[1] ** 2.0, lambda r: [r.standard_normal((4, 3))]),
        "sum": (lambda a: T.tsum(a * a, axis=1), lambda r: [r.standard_normal((3, 4))]),
        "mean": (lambda a: T.mean(a * a, axis=0, keepdims=True), lambda r: [r.standard_normal((3, 4))]),
        "global_average_pool": (lambda a: T.global_average_pool(a * a), lambda r: [r.standard_normal((2, 3, 4, 4))]),
        "matmul": (T.matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
        "linear": (T.linear, lambda r: [r.standard_normal((5, 4)), r.standard_normal((3, 4)), r.standard_normal(3)]),
        "conv2d_s1p1": (lambda x, w: T.conv2d(x, w, 1, 1),
                        lambda r: [r.standard_normal((2, 2, 5, 5)), r.standard_normal((3, 2, 3, 3))]),
        "conv2d_s2p1": (lambda x, w: T.conv2d(x, w, 2, 1),
                        lambda r: [r.standard_normal((2, 3, 6, 6)), r.standard_normal((2, 3, 3, 3))]),
        "conv2d_s1p0": (lambda x, w: T.conv2d(x, w, 1, 0),
                        lambda r: [r.standard_normal((1, 2, 4, 5)), r.standard_normal((2, 2, 3, 3))]),
        "batch_norm_train_nc": (lambda x, g, b: T.batch_norm(x, g, b, None, training=True),
                                lambda r: [r.standard_normal((6, 3)), _positive(r, 3), r.standard_normal(3)]),
        "batch_norm_train_nchw": (lambda x, g, b: T.batch_norm(x, g, b, None, training=True),
                                  lambda r: [r.standard_normal((3, 3, 2, 2)), _positive(r, 3), r.standard_normal(3)]),
        "batch_norm_train_noaffine": (lambda x: T.batch_norm(x, None, None, None, training=True),
                                      lambda r: [r.standard_normal((5, 3))]),
        "batch_norm_eval": (bn_eval, lambda r: [r.standard_normal((4, 3)), _positive(r, 3), r.standard_normal(3)]),
        "l2_normalize": (lambda v: T.l2_normalize(v, axis=1), lambda r: [r.standard_normal((3, 5))]),
        "log_softmax": (lambda x: T.log_softmax(x, axis=1), lambda r: [r.standard_normal((3, 5))]),
        "cross_entropy": (lambda x: T.cross_entropy(x, fixed_labels), lambda r: [r.standard_normal((4, 3))]),
        "negative_cosine": (negative_cosine, lambda r: [r.standard_normal((4, 5)), r.standard_normal((4, 5))]),
        "barlow_twins": (barlow_twins_loss, lambda r: [r.standard_normal((6, 3)), r.standard_normal((6, 3))]),
    }


GRADCASES = _gradcases()
GRAD_INSTANCES = 5
