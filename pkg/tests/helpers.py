"""Shared finite-difference utilities for the test-suite."""
import numpy as np

from qres.tensor import Tensor


def numeric_grad(f, arrays, index, h=1e-5):
    """Central finite differences of scalar ``f(arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f(arrays)
        x[i] = orig - h
        fm = f(arrays)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    """Norm-wise relative error, guarded for near-zero gradients."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.linalg.norm(a), 1e-8))


def check_grads(fn, arrays, seed=0, h=1e-5):
    """Compare backward against central differences for ``sum(fn(*tensors) * w)``.

    Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays])
    w = np.random.default_rng(seed + 10_000).normal(size=probe.shape)

    def scalar(arrs):
        return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * w))

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    (out * Tensor(w)).sum().backward()
    worst = 0.0
    for k, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, k, h)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        worst = max(worst, rel_err(ana, num))
    return worst


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from_zero(rng, shape):
    x = rng.uniform(0.2, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_cases():
    """(name, fn, input-factory) for every differentiable operation.

    Inputs of non-smooth ops are kept away from their kinks.
    """
    from qres import functional as F
    from qres import metrics
    from qres import tensor as T
    from qres.probability import PriorStats, pixel_log_likelihood, prior_logpdf

    n = lambda rng, s: rng.normal(size=s)  # noqa: E731
    return [
        ("add", T.add, lambda r: [n(r, (2, 3)), n(r, (2, 3))]),
        ("add_scalar", lambda a: T.add(a, 1.5), lambda r: [n(r, (4,))]),
        ("sub", T.sub, lambda r: [n(r, (2, 3)), n(r, (2, 3))]),
        ("mul", T.mul, lambda r: [n(r, (2, 3)), n(r, (2, 3))]),
        ("div", T.div, lambda r: [n(r, (2, 3)), _positive(r, (2, 3))]),
        ("power", lambda a: T.power(a, 1.7), lambda r: [_positive(r, (5,))]),
        ("square", T.square, lambda r: [n(r, (5,))]),
        ("exp", T.exp, lambda r: [n(r, (5,))]),
        ("log", T.log, lambda r: [_positive(r, (5,))]),
        ("abs", T.abs_, lambda r: [_away_from_zero(r, (6,))]),
        ("softplus", T.softplus, lambda r: [n(r, (6,))]),
        ("clamp", lambda a: T.clamp(a, -0.1, 0.1), lambda r: [_away_from_zero(r, (6,)) * 0.3]),
        ("relu", T.relu, lambda r: [_away_from_zero(r, (6,))]),
        ("normal_cdf", T.normal_cdf, lambda r: [n(r, (6,))]),
        ("gelu", T.gelu, lambda r: [n(r, (6,))]),
        ("sum_axis", lambda a: T.tsum(a, axis=(1, 2)), lambda r: [n(r, (2, 3, 4))]),
        ("mean", lambda a: T.mean(a, axis=1), lambda r: [n(r, (2, 3, 4))]),
        ("reshape", lambda a: T.reshape(a, (6, 2)), lambda r: [n(r, (3, 4))]),
        ("concat_channels", lambda a, b: T.concat_channels([a, b]),
         lambda r: [n(r, (1, 2, 3, 3)), n(r, (1, 3, 3, 3))]),
        ("channels", lambda a: T.channels(a, 1, 3), lambda r: [n(r, (2, 4, 2, 2))]),
        ("bias_add", T.bias_add, lambda r: [n(r, (2, 3, 2, 2)), n(r, (3,))]),
        ("tile_spatial", lambda a: T.tile_spatial(a, 2, 3, 2), lambda r: [n(r, (1, 3, 1, 1))]),
        ("pad_edge", lambda a: T.pad_edge(a, 2, 1), lambda r: [n(r, (1, 2, 3, 3))]),
        ("crop", lambda a: T.crop(a, 2, 3), lambda r: [n(r, (1, 2, 4, 4))]),
        ("conv2d", lambda x, w, b: F.conv2d(x, w, b, stride=1, padding=1),
         lambda r: [n(r, (2, 3, 5, 5)), n(r, (4, 3, 3, 3)), n(r, (4,))]),
        ("conv2d_strided", lambda x, w, b: F.conv2d(x, w, b, stride=2),
         lambda r: [n(r, (1, 2, 6, 6)), n(r, (3, 2, 2, 2)), n(r, (3,))]),
        ("conv2d_depthwise", lambda x, w, b: F.conv2d(x, w, b, padding=1, groups=3),
         lambda r: [n(r, (2, 3, 4, 4)), n(r, (3, 1, 3, 3)), n(r, (3,))]),
        ("conv2d_grouped", lambda x, w: F.conv2d(x, w, groups=2),
         lambda r: [n(r, (1, 4, 4, 4)), n(r, (6, 2, 3, 3))]),
        ("conv2d_1x1", lambda x, w: F.conv2d(x, w),
         lambda r: [n(r, (2, 3, 3, 3)), n(r, (5, 3, 1, 1))]),
        ("pixel_shuffle", lambda a: F.pixel_shuffle(a, 2), lambda r: [n(r, (1, 8, 2, 3))]),
        ("pixel_unshuffle", lambda a: F.pixel_unshuffle(a, 2), lambda r: [n(r, (1, 2, 4, 6))]),
        ("layer_norm", lambda x, g, b: F.layer_norm(x, g, b),
         lambda r: [n(r, (2, 4, 3, 3)), n(r, (4,)), n(r, (4,))]),
        ("linear", F.linear, lambda r: [n(r, (3, 4)), n(r, (5, 4)), n(r, (5,))]),
        ("avg_pool2", F.avg_pool2, lambda r: [n(r, (1, 2, 5, 4))]),
        ("prior_logpdf", lambda z, m, s: prior_logpdf(z, PriorStats(m, s)),
         lambda r: [n(r, (8,)) * 2, n(r, (8,)), r.uniform(0.3, 3.0, size=8)]),
        ("pixel_log_likelihood", lambda m, s: pixel_log_likelihood(
            Tensor(np.array([0.0, 3.0, 128.0, 200.0, 255.0, 17.0])), m, s),
         lambda r: [r.uniform(-5, 260, size=6), r.uniform(2.0, 30.0, size=6)]),
        ("ms_ssim", lambda a, b: metrics.ms_ssim_tensor(a, b)[0],
         lambda r: [r.uniform(0.2, 0.8, size=(1, 2, 12, 12)), r.uniform(0.2, 0.8, size=(1, 2, 12, 12))]),
    ]


def full_loss_gradient_error(seed, lmbda=64.0, entries=4, h=1e-5):
    """Backward vs central differences for the training loss of a tiny N=2 model on 8x8 input.

    A few random entries of every parameter tensor are probed; the noise draw
    is fixed by reseeding the generator for each evaluation.
    """
    from qres.model import ModelConfig, QResVAE
    from qres.train import loss

    model = QResVAE(ModelConfig.tiny(), seed=seed)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(0, 1, size=(2, 3, 8, 8)))

    def value():
        return loss(x, model, lmbda, np.random.default_rng(seed + 99)).total.item()

    model.zero_grad()
    loss(x, model, lmbda, np.random.default_rng(seed + 99)).total.backward()
    ana, num = [], []
    for _, p in model.named_parameters():
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(entries, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num.append((fp - fm) / (2 * h))
            ana.append(p.grad.reshape(-1)[i])
    return rel_err(np.array(ana), np.array(num))
