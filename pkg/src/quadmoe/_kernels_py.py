"""Pure numpy implementation of the batched MoE kernels.

Mirrors ``_ckernels.pyx``. Rows are processed in fixed chunks of ``CHUNK``;
per-chunk partial sums are combined with a fixed pairwise tree so the result
does not depend on how chunks are scheduled. ``einsum`` without ``optimize``
is used instead of ``@`` to keep BLAS threading out of the arithmetic.
"""
import numpy as np

CHUNK = 1024

LINEAR = 0
TWO_LAYER = 1
RELU = 0
TANH = 1


def tree_sum(parts):
    parts = list(parts)
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def _act(z, code):
    if code == RELU:
        return np.maximum(z, 0.0), (z > 0).astype(np.float64)
    t = np.tanh(z)
    return t, 1.0 - t * t


def _gates(X, A, B, C, top_k):
    S = np.einsum("nd,kde,ne->nk", X, A, X) + np.einsum("nd,kd->nk", X, B) + C
    if top_k and top_k < S.shape[1]:
        order = np.argsort(-S, axis=1, kind="stable")
        drop = order[:, top_k:]
        S = S.copy()
        np.put_along_axis(S, drop, -np.inf, axis=1)
    S = S - S.max(axis=1, keepdims=True)
    E = np.exp(S)
    return E / E.sum(axis=1, keepdims=True)


def _experts(X, Eta, family, m, act):
    d = X.shape[1]
    if family == LINEAR:
        return np.einsum("nd,kd->nk", X, Eta[:, :d]) + Eta[:, d], None
    N = Eta.shape[0]
    W = Eta[:, : m * d].reshape(N, m, d)
    V = Eta[:, m * d : m * d + m]
    a = Eta[:, m * d + m : m * d + 2 * m]
    Z = np.einsum("nd,kmd->nkm", X, W) + V
    F, dF = _act(Z, act)
    H = np.einsum("nkm,km->nk", F, a) + Eta[:, -1]
    return H, (F, dF, a)


def predict(X, A, B, C, Eta, family, m, act, top_k):
    out = np.empty(X.shape[0])
    for s in range(0, X.shape[0], CHUNK):
        Xc = X[s : s + CHUNK]
        G = _gates(Xc, A, B, C, top_k)
        H, _ = _experts(Xc, Eta, family, m, act)
        out[s : s + CHUNK] = (G * H).sum(axis=1)
    return out


def _chunk(Xc, Yc, A, B, C, Eta, family, m, act, top_k):
    d = Xc.shape[1]
    G = _gates(Xc, A, B, C, top_k)
    H, extra = _experts(Xc, Eta, family, m, act)
    f = (G * H).sum(axis=1)
    e = Yc - f
    loss = (e * e).sum()
    w = -2.0 * e
    T = w[:, None] * G * (H - f[:, None])  # d loss_i / d score_k
    dC = T.sum(axis=0)
    dB = np.einsum("nk,nd->kd", T, Xc)
    dA = np.einsum("nk,nd,ne->kde", T, Xc, Xc)
    WG = w[:, None] * G  # d loss_i / d h_k
    if family == LINEAR:
        dEta = np.concatenate([np.einsum("nk,nd->kd", WG, Xc), WG.sum(axis=0)[:, None]], axis=1)
    else:
        F, dF, a = extra
        P = WG[:, :, None] * a[None] * dF  # d loss_i / d z_km
        N = Eta.shape[0]
        dW = np.einsum("nkm,nd->kmd", P, Xc).reshape(N, m * d)
        dEta = np.concatenate(
            [dW, P.sum(axis=0), np.einsum("nk,nkm->km", WG, F), WG.sum(axis=0)[:, None]], axis=1
        )
    return loss, dA, dB, dC, dEta


def loss_grad(X, Y, A, B, C, Eta, family, m, act, top_k):
    """Sum of squared residuals and its gradient blocks (unnormalised)."""
    parts = []
    for s in range(0, X.shape[0], CHUNK):
        loss, dA, dB, dC, dEta = _chunk(
            X[s : s + CHUNK], Y[s : s + CHUNK], A, B, C, Eta, family, m, act, top_k
        )
        parts.append(np.concatenate([[loss], dA.ravel(), dB.ravel(), dC, dEta.ravel()]))
    total = tree_sum(parts)
    N, d = B.shape
    q = Eta.shape[1]
    i = 1
    dA = total[i : i + N * d * d].reshape(N, d, d)
    i += N * d * d
    dB = total[i : i + N * d].reshape(N, d)
    i += N * d
    dC = total[i : i + N]
    i += N
    dEta = total[i : i + N * q].reshape(N, q)
    return total[0], dA, dB, dC, dEta
