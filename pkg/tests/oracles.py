"""Independent reference solutions used by the scheme and acceptance tests."""
import numpy as np


def newton_2x2(n_prev, dt, delta, mu):
    """Dense Newton on the 8 coupled equations of a 2x2 grid of (-1/2,1/2)^2.

    Geometry written out by hand: m(K) = 1/4, tau = 1, cells 0 1 / 2 3 in
    row-major order with neighbours (0,1), (2,3), (0,2), (1,3).
    """
    m, pairs = 0.25, [(0, 1), (2, 3), (0, 2), (1, 3)]
    nbrs = {k: [] for k in range(4)}
    for a, b in pairs:
        nbrs[a].append(b)
        nbrs[b].append(a)

    def F(z):
        n, S = z[:4], z[4:]
        out = np.zeros(8)
        for K in range(4):
            flux_n = sum(-(n[L] - n[K]) + max(S[L] - S[K], 0) * n[K] - max(S[K] - S[L], 0) * n[L]
                         for L in nbrs[K])
            out[K] = m / dt * (n[K] - n_prev[K]) + flux_n
            out[4 + K] = (sum(S[K] - S[L] for L in nbrs[K]) + m * S[K]
                          - delta * sum(n[L] - n[K] for L in nbrs[K]) - mu * m * n[K])
        return out

    n0 = np.asarray(n_prev, float)
    z = np.concatenate([n0, mu * n0])
    for _ in range(60):
        f = F(z)
        J = np.zeros((8, 8))
        h = 1e-7
        for j in range(8):
            e = np.zeros(8)
            e[j] = h * max(1.0, abs(z[j]))
            J[:, j] = (F(z + e) - F(z - e)) / (2 * e[j])
        step = np.linalg.solve(J, -f)
        z = z + step
        if np.max(np.abs(step)) < 1e-15 * max(1.0, np.max(np.abs(z))):
            break
    assert np.max(np.abs(F(z))) < 1e-12
    return z[:4], z[4:]
