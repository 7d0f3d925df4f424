"""Central finite-difference checks for the differentiable operations."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

__all__ = ["GradCheckReport", "grad_check", "gradient_suite", "relative_error", "kd_reference"]


@dataclass(frozen=True)
class GradCheckReport:
    op: str
    max_rel_error: float
    tolerance: float
    instances: int = 1

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op:<22} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e} n={self.instances}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest per-coordinate ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps coordinates whose true gradient is essentially zero from
    dominating through round-off.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den))


def grad_check(
    fn: Callable[..., Tensor],
    point: Sequence[np.ndarray],
    epsilon: float = 1e-5,
    tolerance: float = 1e-5,
    *,
    wrt: Optional[Sequence[int]] = None,
    reference: Optional[Callable[..., float]] = None,
    name: str = "fn",
    dtype=np.float64,
) -> GradCheckReport:
    """Compare tape gradients of ``fn`` with central finite differences.

    ``fn`` takes tensors and returns a scalar tensor.  The finite differences
    are taken on ``reference`` (a function of plain arrays returning a float)
    when given, otherwise on ``fn`` itself evaluated without a tape.  Passing an
    independent ``reference`` turns the check into a test of the loss formula,
    not only of the backward rules.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    arrays = [np.array(p, dtype=dtype, copy=True) for p in point]
    wrt = range(len(arrays)) if wrt is None else wrt
    wrt = list(wrt)

    tensors = [Tensor(a, requires_grad=i in wrt, dtype=dtype) for i, a in enumerate(arrays)]
    with Tape() as tape:
        loss = fn(*tensors)
    ad.backward(tape, loss)

    if reference is None:

        def reference(*arrs):
            return float(fn(*[Tensor(a, dtype=dtype) for a in arrs]).data)

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
        numeric = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            fp = reference(*arrays)
            flat[k] = orig - epsilon
            fm = reference(*arrays)
            flat[k] = orig
            nflat[k] = (fp - fm) / (2 * epsilon)
        worst = max(worst, relative_error(analytic, numeric))
    return GradCheckReport(name, worst, tolerance)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum_all(ad.mul(out, Tensor(w, dtype=out.dtype)))


def _away_from(x: np.ndarray, margin: float) -> np.ndarray:
    """Push entries with ``|x| < margin`` out to ``±margin`` plus a little."""
    s = np.where(x >= 0, 1.0, -1.0)
    return np.where(np.abs(x) < margin, s * (margin + np.abs(x)), x)


def _untied_pool_input(rng, shape, window, gap):
    """Random input whose pooling windows have a unique maximum by ``gap``."""
    while True:
        x = rng.normal(size=shape)
        n, c, h, w = shape
        ho, wo = h // window, w // window
        win = x[:, :, : ho * window, : wo * window].reshape(n, c, ho, window, wo, window)
        win = np.sort(win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1), axis=-1)
        if np.all(win[..., -1] - win[..., -2] > gap):
            return x


def _cases(rng: np.random.Generator, kd_fn):
    """Yield (name, fn, point) triples for one random instance of every op."""
    from .distill import DistillConfig

    x = rng.normal(size=(1, 2, 5, 5))
    k = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    w = rng.normal(size=(1, 3, 3, 3))
    yield "conv2d", lambda x_, k_, b_: _weighted(ad.conv2d(x_, k_, b_), w), (x, k, b)

    w2 = rng.normal(size=(1, 3, 3, 3))
    yield "conv2d_s2p1", lambda x_, k_, b_: _weighted(ad.conv2d(x_, k_, b_, stride=2, padding=1), w2), (x, k, b)

    xd = rng.normal(size=(2, 3, 5, 5))
    kd = rng.normal(size=(3, 1, 3, 3))
    bd = rng.normal(size=3)
    wd = rng.normal(size=(2, 3, 3, 3))
    yield "depthwise_conv2d", lambda x_, k_, b_: _weighted(ad.depthwise_conv2d(x_, k_, b_, 2, 1), wd), (xd, kd, bd)

    xi = rng.normal(size=(4, 6))
    wi = rng.normal(size=(6, 3))
    bi = rng.normal(size=3)
    ww = rng.normal(size=(4, 3))
    yield "dense", lambda x_, w_, b_: _weighted(ad.dense(x_, w_, b_), ww), (xi, wi, bi)

    xr = _away_from(rng.normal(size=(3, 4)), 0.1)
    wr = rng.normal(size=(3, 4))
    yield "relu", lambda x_: _weighted(ad.relu(x_), wr), (xr,)

    xp = _untied_pool_input(rng, (1, 2, 4, 4), 2, 0.1)
    wp = rng.normal(size=(1, 2, 2, 2))
    yield "max_pool2d", lambda x_: _weighted(ad.max_pool2d(x_, 2, 2), wp), (xp,)

    xg = rng.normal(size=(2, 3, 4, 4))
    wg = rng.normal(size=(2, 3))
    yield "global_avg_pool2d", lambda x_: _weighted(ad.global_avg_pool2d(x_), wg), (xg,)

    xa = rng.normal(size=(1, 2, 3, 3))
    xb = rng.normal(size=(1, 3, 3, 3))
    wc = rng.normal(size=(1, 5, 3, 3))
    yield "concat_channels", lambda a_, b_: _weighted(ad.concat_channels(a_, b_), wc), (xa, xb)

    wf = rng.normal(size=(1, 18))
    yield "flatten", lambda a_: _weighted(ad.flatten(a_), wf), (xa,)

    drop_seed = int(rng.integers(2**32))
    wdp = rng.normal(size=(5, 4))
    xdp = rng.normal(size=(5, 4))
    yield (
        "dropout",
        lambda x_: _weighted(ad.dropout(x_, 0.5, True, np.random.Generator(np.random.Philox(drop_seed))), wdp),
        (xdp,),
    )

    xl = rng.normal(size=(3, 4)) * 3
    wl = rng.normal(size=(3, 4))
    yield "log_softmax", lambda x_: _weighted(ad.log_softmax(x_), wl), (xl,)

    # conv -> relu -> dense -> log_softmax, all kinks at least 0.1 away
    while True:
        nx = rng.normal(size=(2, 1, 4, 4))
        nk = rng.normal(size=(2, 1, 3, 3))
        nb = rng.normal(size=2) * 0.1
        pre = ad.conv2d(Tensor(nx, dtype=np.float64), Tensor(nk, dtype=np.float64), Tensor(nb, dtype=np.float64))
        if np.all(np.abs(pre.data) > 0.1):
            break
    nw = rng.normal(size=(8, 2)) * 0.5
    nbd = rng.normal(size=2)
    labels = rng.integers(0, 2, size=2)

    def network(x_, k_, b_, w_, bd_):
        h = ad.relu(ad.conv2d(x_, k_, b_))
        return ad.scale(ad.sum_all(ad.pick(ad.log_softmax(ad.dense(ad.flatten(h), w_, bd_)), labels)), -0.5)

    yield "network", network, (nx, nk, nb, nw, nbd)

    s = rng.normal(size=(4, 3)) * 2
    t = rng.normal(size=(4, 3)) * 2
    y = rng.integers(0, 3, size=4)
    for direction in ("teacher", "student"):
        cfg = DistillConfig(alpha=float(rng.uniform(0.1, 0.9)), temperature=4.0, kl_direction=direction)
        yield (
            f"kd_loss[{direction}]",
            lambda s_, cfg=cfg: kd_fn(s_, Tensor(t, dtype=np.float64), y, cfg),
            (s,),
            lambda s_, cfg=cfg: kd_reference(s_, t, y, cfg.alpha, cfg.temperature, cfg.kl_direction),
        )


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def kd_reference(student, teacher, labels, alpha: float, temperature: float, direction: str = "teacher") -> float:
    """Plain float64 evaluation of ``alpha*T^2*KL + (1-alpha)*CE``, written without the tape.

    Finite differences of this function check the distillation gradient
    against the formula itself, so a dropped or misplaced T^2 shows up.
    """
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher, dtype=np.float64)
    n = s.shape[0]
    log_p = _log_softmax_np(s / temperature)
    log_q = _log_softmax_np(t / temperature)
    if direction == "teacher":
        kl = np.sum(np.exp(log_q) * (log_q - log_p)) / n
    else:
        kl = np.sum(np.exp(log_p) * (log_p - log_q)) / n
    ce = -np.mean(_log_softmax_np(s)[np.arange(n), np.asarray(labels)])
    return float(alpha * temperature**2 * kl + (1 - alpha) * ce)


def gradient_suite(
    instances: int = 100, seed: int = 0, tolerance: float = 1e-5, epsilon: float = 1e-5, kd_fn=None
) -> list:
    """Check every differentiable op on ``instances`` seeded random points (64-bit).

    ``kd_fn`` replaces the distillation loss under test; the mutation test
    uses it to confirm a broken loss is caught.
    """
    if kd_fn is None:
        from .distill import kd_loss as kd_fn
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, fn, point, *ref in _cases(rng, kd_fn):
            rep = grad_check(fn, point, epsilon=epsilon, tolerance=tolerance, name=name, reference=ref[0] if ref else None)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
    return [GradCheckReport(name, err, tolerance, instances) for name, err in worst.items()]
