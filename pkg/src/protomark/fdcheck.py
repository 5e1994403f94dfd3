"""Central finite-difference verification of autograd gradients."""

from dataclasses import dataclass, field

import torch


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple = ()                 # (name, flat index, autograd, numeric)
    per_tensor: dict = field(default_factory=dict)
    n_checked: int = 0


def _rel(a, n, floor):
    return abs(a - n) / max(abs(a), abs(n), floor)


@torch.no_grad()
def _eval(fn, keys):
    out = fn()
    if keys is None:
        return [float(out)]
    return [float(out[k]) for k in keys]


def check_gradients(fn, params: dict, eps: float = 1e-5, floor: float = 1e-6,
                    max_entries: int | None = None):
    """Compare d fn / d p for every entry of every tensor in ``params``.

    ``fn`` is a zero-argument closure returning a scalar tensor, or a dict of
    scalar tensors checked together (one perturbation sweep serves all of
    them; a dict of results is returned). It must be deterministic.

    Relative error is ``|a - n| / max(|a|, |n|, floor * max(1, |fn|))``, so
    entries whose true gradient is ~0 are judged on absolute error. The floor
    grows with the output value because central-difference roundoff does.
    ``max_entries`` subsamples evenly spaced entries of large tensors.
    """
    tensors = {k: v for k, v in params.items() if v.requires_grad}
    for v in tensors.values():
        if v.dtype != torch.float64:
            raise TypeError("finite-difference checks need float64 tensors")
        v.grad = None
    with torch.enable_grad():
        out = fn()
        keys = list(out) if isinstance(out, dict) else None
        outs = [out[k] for k in keys] if keys else [out]
        grads = [torch.autograd.grad(o, list(tensors.values()), allow_unused=True, retain_graph=True)
                 for o in outs]
    floors = [floor * max(1.0, abs(float(o.detach()))) for o in outs]

    results = [GradCheckResult(0.0) for _ in outs]
    for t_idx, (name, t) in enumerate(tensors.items()):
        flat = t.data.view(-1)
        gflat = [torch.zeros_like(t).view(-1) if g[t_idx] is None else g[t_idx].reshape(-1) for g in grads]
        idx = range(flat.numel())
        if max_entries and flat.numel() > max_entries:
            step = flat.numel() / max_entries
            idx = sorted({int(i * step) for i in range(max_entries)})
        worst_here = [0.0] * len(outs)
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = _eval(fn, keys)
            flat[i] = orig - eps
            down = _eval(fn, keys)
            flat[i] = orig
            for o, res in enumerate(results):
                num = (up[o] - down[o]) / (2 * eps)
                a = gflat[o][i].item()
                err = _rel(a, num, floors[o])
                worst_here[o] = max(worst_here[o], err)
                if err >= res.max_rel_error:
                    res.max_rel_error = err
                    res.worst = (name, i, a, num)
                res.n_checked += 1
        for o, res in enumerate(results):
            res.per_tensor[name] = worst_here[o]
    return dict(zip(keys, results)) if keys else results[0]
