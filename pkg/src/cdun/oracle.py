"""Independent verifiers for the solver.

Nothing here calls ``z_update`` or ``warp``; the oracles index pixels
directly with numpy so they can check those functions.
"""
from __future__ import annotations

import numpy as np
import torch

from .errors import ContractError


def _integer_shift(flow):
    """Return (dx, dy) if ``flow`` (2, H, W) is a constant integer field."""
    f = np.asarray(flow, dtype=np.float64)
    dx, dy = f[0].flat[0], f[1].flat[0]
    if not (np.all(f[0] == dx) and np.all(f[1] == dy)) or dx != round(dx) or dy != round(dy):
        raise ContractError("oracle only supports constant integer-shift warps")
    return int(dx), int(dy)


def brute_z_min(b_prev, frames, T, D, flows, weights, gamma):
    """Per-pixel minimiser of the fidelity subproblem for integer-shift warps.

    All inputs are single-frame, unbatched arrays: ``b_prev`` (C, H, W), and
    per-window-member ``frames[j]`` (C, H, W), ``T[j]``/``D[j]`` (1, H, W),
    ``flows[j]`` the flow from member j to the target frame and
    ``weights[j]`` (1, H, W) the motion weight.

    For each pixel p and member j the residual pixel is
    ``q = clamp(p + shift_j)``; summing ``U_j(p) * (F_j(q) - D_j(q) - T_j(q) z)^2``
    over j, dividing by the window size and adding the penalty
    ``gamma * (z - b_prev(p))^2`` gives a scalar quadratic ``b z^2 - 2 a z``
    whose minimiser ``a / b`` is returned.
    """
    b_prev = np.asarray(b_prev, dtype=np.float64)
    C, H, W = b_prev.shape
    n = len(frames)
    shifts = [_integer_shift(m) for m in flows]
    arr = lambda x: np.asarray(x, dtype=np.float64)
    frames, T, D, weights = map(lambda s: [arr(x) for x in s], (frames, T, D, weights))
    out = np.empty_like(b_prev)
    for y in range(H):
        for x in range(W):
            for ch in range(C):
                a = gamma * b_prev[ch, y, x]
                b = gamma
                for j in range(n):
                    qx = min(max(x + shifts[j][0], 0), W - 1)
                    qy = min(max(y + shifts[j][1], 0), H - 1)
                    u = weights[j][0, y, x]
                    t = T[j][0, qy, qx]
                    r = frames[j][ch, qy, qx] - D[j][0, qy, qx]
                    a += u * t * r / n
                    b += u * t * t / n
                out[ch, y, x] = a / b
    return out


def quadratic_gradient(z, b_prev, frames, T, D, flows, weights, gamma):
    """Analytic gradient of the per-pixel objective used by ``brute_z_min``."""
    z = np.asarray(z, dtype=np.float64)
    b_prev = np.asarray(b_prev, dtype=np.float64)
    C, H, W = z.shape
    n = len(frames)
    g = gamma * (z - b_prev)
    for j in range(n):
        dx, dy = _integer_shift(flows[j])
        ys = np.clip(np.arange(H) + dy, 0, H - 1)
        xs = np.clip(np.arange(W) + dx, 0, W - 1)
        t = np.asarray(T[j], dtype=np.float64)[0][np.ix_(ys, xs)]
        r = (np.asarray(frames[j], dtype=np.float64) - np.asarray(D[j], dtype=np.float64))[:, ys][:, :, xs]
        u = np.asarray(weights[j], dtype=np.float64)[0]
        g = g + u * t * (t * z - r) / n
    return g


def _pick(fp, f0, fm, h, ref):
    """Central difference, or the one-sided difference nearest ``ref``.

    ReLU layers make the networks piecewise smooth. When a kink falls inside
    [x - h, x + h] the central difference is wrong by O(1) while the
    one-sided difference on the far side of the kink is still accurate, so
    with a reference value the closest of the three estimates is used.
    """
    central = (fp - fm) / (2 * h)
    if ref is None:
        return central
    return min((central, (fp - f0) / h, (f0 - fm) / h), key=lambda e: abs(e - ref))


def fd_grad(fn, x, h=1e-5, index=None, reference=None):
    """Finite-difference gradient of scalar ``fn`` at tensor ``x``.

    ``index`` optionally restricts the estimate to a subset of flat
    positions; the rest of the returned gradient is NaN. ``reference``
    (same shape as ``x``) enables the kink-tolerant choice of ``_pick``.
    """
    x = x.detach().clone()
    flat = x.view(-1)
    ref = None if reference is None else reference.detach().reshape(-1)
    g = torch.full_like(flat, float("nan"))
    positions = range(flat.numel()) if index is None else index
    with torch.no_grad():
        f0 = float(fn(x)) if ref is not None else None
        for p in positions:
            orig = flat[p].item()
            flat[p] = orig + h
            fp = float(fn(x))
            flat[p] = orig - h
            fm = float(fn(x))
            flat[p] = orig
            g[p] = _pick(fp, f0, fm, h, None if ref is None else float(ref[p]))
    return g.view_as(x)


def max_rel_err(estimate, reference):
    """max |estimate - reference| scaled by max |reference| (NaNs ignored)."""
    e, r = estimate.reshape(-1), reference.reshape(-1)
    keep = ~torch.isnan(e)
    e, r = e[keep], r[keep]
    return float((e - r).abs().max() / r.abs().max().clamp(min=1e-30))


def check_grad(fn, x, h=1e-5, index=None, kinks=False):
    """Compare autograd against finite differences; returns max relative error."""
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return max_rel_err(fd_grad(fn, x, h, index, g if kinks else None), g)


def check_param_grad(fn, param, n_coords=12, h=1e-5, seed=0, kinks=False):
    """Gradient check of ``fn()`` with respect to a random subset of ``param``."""
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randperm(param.numel(), generator=gen)[:n_coords].tolist()
    (g,) = torch.autograd.grad(fn(), param)
    gf = g.view(-1)
    flat = param.data.view(-1)
    est = torch.empty(len(idx), dtype=param.dtype)
    with torch.no_grad():
        f0 = float(fn()) if kinks else None
        for n, p in enumerate(idx):
            orig = flat[p].item()
            flat[p] = orig + h
            fp = float(fn())
            flat[p] = orig - h
            fm = float(fn())
            flat[p] = orig
            est[n] = _pick(fp, f0, fm, h, float(gf[p]) if kinks else None)
    return max_rel_err(est, gf[idx])


def influence_probe(model, frames, T, D, provider, j, delta, iters=None):
    """Per-output-frame max-abs change when input frame ``j`` (0-based) moves by ``delta``."""
    with torch.no_grad():
        base = model(frames, T, D, provider, iters)
        pert = frames.clone()
        pert[..., j, :, :, :] += delta
        out = model(pert, T, D, provider, iters)
    diff = (out - base).abs()
    return diff.reshape(*diff.shape[:-3], -1).amax(-1)


# suites shared by the CLI probes and the acceptance tests ------------------


def random_window(gen, H=8, W=8, n=3, C=3, max_shift=2, dtype=torch.float64):
    """Random single-frame z-update instance with constant integer-shift flows."""
    u = lambda *s: torch.rand(*s, generator=gen, dtype=dtype)
    shifts = torch.randint(-max_shift, max_shift + 1, (n, 2), generator=gen).to(dtype)
    shifts[n // 2] = 0
    return dict(
        b_prev=u(C, H, W),
        frames=[u(C, H, W) for _ in range(n)],
        T=[0.1 + 0.9 * u(1, H, W) for _ in range(n)],
        D=[0.3 * u(1, H, W) for _ in range(n)],
        flows=[s.view(2, 1, 1).expand(2, H, W).clone() for s in shifts],
        weights=[0.05 + 0.9 * u(1, H, W) for _ in range(n)],
        gamma=float(0.05 + u(1)),
    )


def oracle_suite(instances=50, seed=0, H=8, W=8):
    """Rows (instance, max_rel_err, grad_norm) comparing z_update with brute_z_min."""
    from .solver import z_update

    gen = torch.Generator().manual_seed(seed)
    rows = []
    for n in range(instances):
        w = random_window(gen, H, W)
        z = z_update(w["b_prev"], w["frames"], w["T"], w["D"], w["flows"], w["weights"], w["gamma"])
        args = [w[k] for k in ("b_prev", "frames", "T", "D", "flows", "weights", "gamma")]
        ref = brute_z_min(*args)
        g = quadratic_gradient(ref, *args)
        err = float(np.abs(z.numpy() - ref).max() / np.abs(ref).max())
        rows.append(dict(instance=n, max_rel_err=err, grad_norm=float(np.abs(g).max())))
    return rows


def _perturb(module, scale, gen):
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def gradient_suite(seed=0):
    """Finite-difference checks at 64-bit: rows (instance, max_rel_err, grad_norm, tol)."""
    from .losses import loss_sup
    from .motion import ExactFlow, MotionWeight, RobustWarp
    from .solver import CDUN, SolverConfig, z_update

    dt = torch.float64
    torch.manual_seed(seed)  # module initialisers draw from the global RNG
    gen = torch.Generator().manual_seed(seed)
    rnd = lambda *s: torch.rand(*s, generator=gen, dtype=dt)
    rows = []

    def record(name, fn, x, tol, index=None):
        x = x.detach().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(fn(x), x)
        err = max_rel_err(fd_grad(fn, x, index=index, reference=g), g)
        rows.append(dict(instance=name, max_rel_err=err, grad_norm=float(g.norm()), tol=tol))

    # supervised loss (SSIM needs at least an 11x11 image)
    y = rnd(1, 3, 12, 12)
    record("loss_sup", lambda x: loss_sup(x, y), rnd(1, 3, 12, 12), 1e-4)

    # robust warp: trained-like (perturbed) parameters, fractional flow
    flow = (0.3 + 0.4 * rnd(1, 2, 8, 8))
    for c in (3, 1):
        net = _perturb(RobustWarp(c).double(), 0.1, gen)
        xj, xi = rnd(1, c, 8, 8), rnd(1, c, 8, 8)
        record(f"rwm{c}_objective", lambda x: (net(xj, x, flow) ** 2).sum(), xi, 1e-4)
        record(f"rwm{c}_operand", lambda x: (net(x, xi, flow) ** 2).sum(), xj, 1e-4)

    mw = _perturb(MotionWeight().double(), 0.05, gen).eval()
    record("motion_weight", lambda f: (mw(f) ** 2).sum(), 3 * rnd(1, 2, 8, 8) - 1.5, 1e-4)

    # closed-form update with non-trivial robust warps
    w = random_window(gen, 8, 8)
    r3 = _perturb(RobustWarp(3).double(), 0.05, gen)
    r1 = _perturb(RobustWarp(1).double(), 0.05, gen)
    wf = [f + 0.25 for f in w["flows"]]
    zu = lambda **kw: z_update(**{**dict(b_prev=w["b_prev"], frames=w["frames"], T=w["T"], D=w["D"], flows=wf,
                                         weights=w["weights"], gamma=w["gamma"], rwm3=r3, rwm1=r1), **kw})
    record("z_update_b_prev", lambda x: (zu(b_prev=x) ** 2).sum(), w["b_prev"], 1e-4)
    record("z_update_frame", lambda x: (zu(frames=[w["frames"][0], x, w["frames"][2]]) ** 2).sum(), w["frames"][1], 1e-4)
    record("z_update_T", lambda x: (zu(T=[x, w["T"][1], w["T"][2]]) ** 2).sum(), w["T"][0], 1e-4)

    # end to end, N=2 on a 16x16 clip
    torch.manual_seed(seed)
    model = CDUN(SolverConfig(N=2)).double()
    for part in (*model.priors, *model.rwm3, *model.rwm1):
        _perturb(part, 0.02, gen)
    model.eval()
    F, Y = rnd(1, 3, 3, 16, 16), rnd(1, 3, 3, 16, 16)
    T, D = 0.3 + 0.7 * rnd(1, 3, 1, 16, 16), 0.2 * rnd(1, 3, 1, 16, 16)
    prov = ExactFlow(torch.tensor([[[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]]], dtype=dt))
    loss = lambda out: ((out - Y) ** 2).mean()
    for name, param in (("prior_0.head.weight", model.priors[0].head.weight),
                        ("prior_1.enc1.weight", model.priors[1].enc1[0].weight),
                        ("rwm3_0.fuse1.weight", model.rwm3[0].fuse1.weight)):
        fn = lambda: loss(model(F, T, D, prov))
        (g,) = torch.autograd.grad(fn(), param)
        rows.append(dict(instance=f"restore_{name}", max_rel_err=check_param_grad(fn, param, seed=seed, kinks=True),
                         grad_norm=float(g.norm()), tol=1e-3))
    idx = torch.randperm(F.numel(), generator=gen)[:12].tolist()
    record("restore_input", lambda x: loss(model(x, T, D, prov)), F, 1e-3, index=idx)
    return rows


def receptive_field(N=5, l=12, size=32, center=None, delta=0.1, seed=0):
    """Sensitivity of output frame ``center`` (0-based) to each input frame.

    Uses a synthetic clip with ground-truth motion, exact flows and the
    pass-through initialisation. Returns {input index: sensitivity}.
    """
    from .degrade import MotionSpec, synth_clip
    from .motion import ExactFlow
    from .solver import CDUN, SolverConfig

    spec = MotionSpec(kind="haze", displacements=((1, 0),), seed=seed)
    clean, degraded, fields, _ = synth_clip(spec, l, size, size, dtype=torch.float64)
    torch.manual_seed(seed)
    model = CDUN(SolverConfig(N=N)).double().eval()
    prov = ExactFlow(torch.as_tensor(spec.offsets(l), dtype=torch.float64)[None])
    center = l // 2 if center is None else center
    out = {}
    for j in range(l):
        sens = influence_probe(model, degraded.frames[None], fields.T[None], fields.D[None], prov, j, delta)
        out[j] = float(sens[0, center])
    return out
