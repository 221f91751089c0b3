"""Independent reference implementations shared by the unit and acceptance tests.

Everything here is written with explicit Python loops over scalars so that it
shares no code path with the vectorised library functions it checks.
"""

import math

import numpy as np
import torch


def loop_softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [v / s for v in e]


def loop_linear(W, b, x):
    out = []
    for i in range(len(W)):
        acc = 0.0 if b is None else float(b[i])
        for j in range(len(x)):
            acc += float(W[i][j]) * float(x[j])
        out.append(acc)
    return out


def loop_cross_attention(q_lin, k_lin, v_lin, query, context, scale=True):
    """Single-head attention over one batch item; ``*_lin`` are (W, b) pairs of nested lists."""
    Q = [loop_linear(*q_lin, row) for row in query]
    K = [loop_linear(*k_lin, row) for row in context]
    V = [loop_linear(*v_lin, row) for row in context]
    d = len(Q[0])
    s = 1.0 / math.sqrt(d) if scale else 1.0
    out = []
    for qi in Q:
        logits = [s * sum(qi[a] * kj[a] for a in range(d)) for kj in K]
        w = loop_softmax(logits)
        out.append([sum(w[j] * V[j][c] for j in range(len(V))) for c in range(len(V[0]))])
    return out


def linear_params(layer):
    W = layer.weight.detach().double().tolist()
    b = None if layer.bias is None else layer.bias.detach().double().tolist()
    return W, b


def loop_spade(F, gamma, beta):
    F, gamma, beta = (np.asarray(a, dtype=np.float64) for a in (F, gamma, beta))
    out = np.empty_like(F)
    for idx in np.ndindex(F.shape):
        out[idx] = (1.0 + gamma[idx]) * F[idx] + beta[idx]
    return out


def loop_inject(F, A, V):
    """F (C, H, W), A (H*W, K), V (K, C): F_i + sum_j A_ij V_j / sum_j A_ij at row-major location i."""
    C, H, W = F.shape
    out = np.array(F, dtype=np.float64)
    for y in range(H):
        for x in range(W):
            i = y * W + x
            den = sum(float(A[i][j]) for j in range(len(V)))
            for c in range(C):
                out[c, y, x] += sum(float(A[i][j]) * float(V[j][c]) for j in range(len(V))) / den
    return out


def central_fd(loss_fn, tensor, h=1e-6, max_coords=None, rng=None):
    """Central finite differences of a scalar ``loss_fn()`` w.r.t. entries of ``tensor`` (in place)."""
    flat = tensor.data.view(-1)
    n = flat.numel()
    coords = range(n)
    if max_coords is not None and n > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = sorted(rng.choice(n, size=max_coords, replace=False).tolist())
    out = []
    with torch.no_grad():
        for i in coords:
            old = flat[i].item()
            flat[i] = old + h
            up = float(loss_fn())
            flat[i] = old - h
            down = float(loss_fn())
            flat[i] = old
            out.append((up - down) / (2 * h))
    return list(coords), np.array(out)


def grad_check(loss_fn, params, rtol=1e-3, atol=1e-8, max_coords=24, seed=0):
    """Compare autograd gradients of ``loss_fn`` with central differences for each named parameter.

    Returns a dict name -> (max relative error, ok).  Parameters must already be float64.
    """
    rng = np.random.default_rng(seed)
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    report = {}
    for (name, p), g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        coords, fd = central_fd(loss_fn, p, max_coords=max_coords, rng=rng)
        ad = g.detach().reshape(-1)[coords].numpy()
        ok = bool(np.allclose(ad, fd, rtol=rtol, atol=atol))
        scale = np.maximum(np.abs(fd), atol / rtol)
        report[name] = (float(np.max(np.abs(ad - fd) / scale)), ok)
    return report
