"""Central finite-difference check of analytic gradients."""
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..errors import GradCheckError

FD_EPS = 1e-5
# |a - n| / max(|a|, |n|, REL_FLOOR); the floor sits above finite-difference roundoff
REL_FLOOR = 1e-5
# probes that straddle a ReLU kink retry with eps / 10 down to this
MIN_FD_EPS = 1e-8

@dataclass
class TensorCheck:
    name: str
    n_probed: int
    max_rel_error: float
    worst_coord: tuple
    exact_zero_pairs: int
    # coordinates whose eps had to shrink to keep both probes on one ReLU piece
    refined: int = 0


@dataclass
class GradCheckReport:
    tolerance: float
    tensors: list = field(default_factory=list)

    @property
    def max_rel_error(self):
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    @property
    def passed(self):
        return all(t.max_rel_error < self.tolerance for t in self.tensors)

    @property
    def failures(self):
        return [t for t in self.tensors if t.max_rel_error >= self.tolerance]

    def lines(self):
        out = []
        for t in self.tensors:
            flag = "ok  " if t.max_rel_error < self.tolerance else "FAIL"
            out.append(f"{flag} {t.name:<34} probed={t.n_probed:<5} max_rel={t.max_rel_error:.3e} "
                       f"worst={t.worst_coord} zero_pairs={t.exact_zero_pairs} refined={t.refined}")
        return out


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


def _coords(name, shape, n_coords, rng):
    size = int(np.prod(shape))
    if ".conv." in name or size <= n_coords:
        flat = np.arange(size)
    else:
        flat = np.sort(rng.choice(size, size=n_coords, replace=False))
    return [np.unravel_index(i, shape) for i in flat]


def _probe(p, c, value, loss_fn, batch):
    p.data[c] = value
    with T.no_grad(), T.relu_patterns() as seen:
        out = loss_fn(batch).item()
    return out, seen


def _same_pieces(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central_difference(p, c, loss_fn, batch):
    """``(derivative estimate, eps used)`` at coordinate ``c`` of ``p``.

    Starts at :data:`FD_EPS`; if the ReLU on/off pattern differs between the
    two probes the function is not smooth across them, so eps shrinks tenfold
    (to at most :data:`MIN_FD_EPS`).
    """
    orig = p.data[c]
    eps = FD_EPS
    try:
        while True:
            up, seen_up = _probe(p, c, orig + eps, loss_fn, batch)
            down, seen_down = _probe(p, c, orig - eps, loss_fn, batch)
            if _same_pieces(seen_up, seen_down) or eps / 10 < MIN_FD_EPS * (1 - 1e-9):
                return (up - down) / (2 * eps), eps
            eps /= 10
    finally:
        p.data[c] = orig


def grad_check(model_builder, input_sampler, tolerance=1e-4, n_coords=32, seed=0,
               grad_hook=None, raise_on_fail=True):
    """Compare autodiff gradients with central differences.

    ``model_builder()`` returns ``(params, loss_fn)`` where ``params`` is a
    ``name -> Tensor`` dict and ``loss_fn(batch)`` builds a scalar loss.
    ``input_sampler(rng)`` returns the batch.  Every conv kernel coordinate is
    probed; other tensors get ``n_coords`` sampled coordinates.  ``grad_hook``
    may rewrite analytic gradients (negative controls).
    """
    rng = np.random.default_rng(seed)
    params, loss_fn = model_builder()
    batch = input_sampler(rng)
    names = list(params)
    loss = loss_fn(batch)
    analytic = dict(zip(names, T.gradients(loss, [params[n] for n in names])))
    if grad_hook is not None:
        analytic = {n: grad_hook(n, g) for n, g in analytic.items()}
    report = GradCheckReport(tolerance)
    for name in names:
        p = params[name]
        worst, worst_at, zeros, refined = 0.0, (), 0, 0
        coords = _coords(name, p.shape, n_coords, rng)
        for c in coords:
            num, eps = _central_difference(p, c, loss_fn, batch)
            refined += eps < FD_EPS
            a = analytic[name][c]
            if a == 0.0 and num == 0.0:
                zeros += 1
            err = float(relative_error(a, num))
            if err > worst or not worst_at:
                worst, worst_at = err, tuple(int(i) for i in c)
        report.tensors.append(TensorCheck(name, len(coords), worst, worst_at, zeros, refined))
    if raise_on_fail and not report.passed:
        bad = report.failures[0]
        raise GradCheckError(f"gradient mismatch in {bad.name} at {bad.worst_coord}: "
                             f"relative error {bad.max_rel_error:.3e} >= {tolerance}", report)
    return report


def model_grad_check(model, task_loss, input_sampler, **kw):
    """:func:`grad_check` for an :class:`~eatn.model.EATransformer` and a batch loss."""
    def builder():
        return model.params, lambda batch: task_loss(model, batch)
    return grad_check(builder, input_sampler, **kw)
